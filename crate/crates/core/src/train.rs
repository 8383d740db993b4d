//! Per-relation prompt tuning: the baseline MLM objective and the full
//! joint objective (object equalization + biased-object obstruction),
//! the undersampling baseline, evaluation into logit dumps, and prompt
//! checkpointing.
//!
//! The backbone stays frozen throughout; only the continuous prompt and,
//! when active, the object selector receive gradient. One relation is one
//! job; jobs share nothing mutable and can run in parallel.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{RelationEval, RetrievalResult};
use crate::autodiff::{Adam, Tape};
use crate::backend::{argmax_with_id_ties, sub_rng, MaskedLm, TinyMlm};
use crate::data::{FactTriple, Split};
use crate::objectives::{
    contrastive_on_tape, joint_on_tape, max_entropy_on_tape, sample_gumbel, selector_on_tape,
    top_k_candidates, MecodConfig, SelectorParams,
};
use crate::prompt::ContinuousPrompt;
use crate::templates::{subject_mask, PromptTemplate, RenderedInput};
use crate::tensorio::{TensorFile, TensorFileWriter};
use crate::{Error, Result, TokenId};

const DUMP_MAGIC: &[u8; 4] = b"MDMP";
const PROMPT_MAGIC: &[u8; 4] = b"MCPT";

/// Top-m kept in logit dumps (clamped to the vocabulary size).
pub const DUMP_TOP_M: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Baseline,
    Mecod,
    AblateNoOe,
    AblateNoBoo,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "mecod" => Ok(Self::Mecod),
            "ablate_no_oe" => Ok(Self::AblateNoOe),
            "ablate_no_boo" => Ok(Self::AblateNoBoo),
            other => Err(Error::Train(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 20,
            batch_size: 16,
            seed: 0,
            mode: TrainMode::Baseline,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Train("lr must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Train("epochs and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Loss weights after applying the mode's ablation switches.
    pub fn effective_lambdas(&self, mecod: &MecodConfig) -> (f64, f64) {
        match self.mode {
            TrainMode::Baseline => (0.0, 0.0),
            TrainMode::Mecod => (mecod.lambda1, mecod.lambda2),
            TrainMode::AblateNoOe => (0.0, mecod.lambda2),
            TrainMode::AblateNoBoo => (mecod.lambda1, 0.0),
        }
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_mlm: f64,
    pub l_me: f64,
    pub l_cl: f64,
    pub l_total: f64,
    pub dev_p1: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub relation_id: String,
    pub prompt: ContinuousPrompt,
    pub selector: Option<SelectorParams>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_p1: f64,
}

struct Sample {
    rendered_o: RenderedInput,
    rendered_m: RenderedInput,
    gold_id: TokenId,
}

fn prepare_samples(
    triples: &[FactTriple],
    split: Split,
    template: &PromptTemplate,
    model: &TinyMlm,
) -> Result<Vec<Sample>> {
    triples
        .iter()
        .filter(|t| t.split == split)
        .map(|t| {
            let rendered_o = template.render(&t.subject, model)?;
            let (rendered_m, _) = subject_mask(&rendered_o, model);
            let gold = model.tokenize(&t.object)?;
            if gold.len() != 1 {
                return Err(Error::Train(format!(
                    "object {:?} is not a single token under the active tokenizer",
                    t.object
                )));
            }
            Ok(Sample {
                rendered_o,
                rendered_m,
                gold_id: gold[0],
            })
        })
        .collect()
}

/// Tunes one continuous prompt for one relation.
///
/// Each step renders the original and (when a debiasing term is active)
/// subject-masked paths through one shared prompt, applies the mode's loss
/// terms, and jointly updates prompt and selector with Adam. The best
/// checkpoint by dev P@1 is returned together with the full epoch log.
pub fn train_relation(
    triples: &[FactTriple],
    template: &PromptTemplate,
    model: &TinyMlm,
    mecod: &MecodConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome> {
    train.validate()?;
    if !model.frozen() {
        return Err(Error::Train("backbone must be frozen for prompt tuning".into()));
    }
    let relation_id = match triples.first() {
        Some(t) => t.relation_id.clone(),
        None => return Err(Error::Train("empty training set".into())),
    };
    if triples.iter().any(|t| t.relation_id != relation_id) {
        return Err(Error::Train("train_relation expects a single relation".into()));
    }
    let vocab_size = model.handle().vocab_size;
    let pool_size = mecod.effective_pool_size(vocab_size);
    let (lambda1, lambda2) = train.effective_lambdas(mecod);
    let selector_active = lambda1 > 0.0 || lambda2 > 0.0;

    let train_samples = prepare_samples(triples, Split::Train, template, model)?;
    let dev_samples = prepare_samples(triples, Split::Dev, template, model)?;
    if train_samples.is_empty() {
        return Err(Error::Train(format!("relation {relation_id}: empty train split")));
    }

    let mut prompt = ContinuousPrompt::init(
        template.tunable_count(),
        model,
        train.seed ^ 0x9e3779b97f4a7c15,
    );
    let mut selector =
        selector_active.then(|| SelectorParams::init(model, train.seed ^ 0x2545f4914f6cdd1d));

    let mut shuffle_rng = sub_rng(train.seed, 0xA1);
    let mut gumbel_rng = sub_rng(train.seed, 0xB2);
    let mut opt = Adam::new(train.lr);

    let mut log = Vec::with_capacity(train.epochs);
    let mut best: Option<(usize, f64, ContinuousPrompt, Option<SelectorParams>)> = None;

    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sum_mlm = 0.0;
        let mut sum_me = 0.0;
        let mut sum_cl = 0.0;
        let mut sum_total = 0.0;

        for (batch_idx, batch) in order.chunks(train.batch_size).enumerate() {
            let mut tape = Tape::new();
            let pv = prompt.register(&mut tape);
            let mv = model.register(&mut tape);
            let sel_vars = selector
                .as_ref()
                .map(|s| (tape.param(s.weight.clone()), tape.param(s.bias.clone())));
            let slots = prompt.encode_slots_on_tape(&mut tape, &pv);

            let mut joint_terms = Vec::with_capacity(batch.len());
            for &si in batch {
                let sample = &train_samples[si];
                let mask_pos = sample.rendered_o.object_mask_position().ok_or_else(|| {
                    Error::Train("rendered input lacks an object mask".into())
                })?;

                let e_o = prompt.assemble_on_tape(&mut tape, slots, &mv, &sample.rendered_o)?;
                let h_all = model.forward_on_tape(&mut tape, &mv, e_o)?;
                let h_o = tape.pick_row(h_all, mask_pos);
                let logits_o = model.head_on_tape(&mut tape, &mv, h_o);
                let l_mlm = tape.cross_entropy_logits(logits_o, sample.gold_id);
                sum_mlm += tape.scalar(l_mlm);

                let mut l_me = None;
                let mut l_cl = None;
                if selector_active {
                    let (sel_w, sel_b) = sel_vars.unwrap();
                    let e_m = prompt.assemble_on_tape(&mut tape, slots, &mv, &sample.rendered_m)?;
                    let h_m_all = model.forward_on_tape(&mut tape, &mv, e_m)?;
                    let h_m = tape.pick_row(h_m_all, mask_pos);
                    let logits_m = model.head_on_tape(&mut tape, &mv, h_m);

                    let masked_row = tape.value(logits_m).row(0).to_owned();
                    let pool = top_k_candidates(masked_row.view(), pool_size);
                    let pool_ids: Vec<usize> = pool.iter().map(|&(id, _)| id).collect();
                    let pooled = tape.gather_cols(logits_m, &pool_ids);

                    let pool_embeds = model.embed(&pool_ids)?;
                    let noise = sample_gumbel(pool_ids.len(), 2, &mut gumbel_rng);
                    let pe = tape.constant(pool_embeds.clone());
                    let decision =
                        selector_on_tape(&mut tape, pe, sel_w, sel_b, &noise, mecod.gumbel_tau);

                    if lambda1 > 0.0 {
                        let me = max_entropy_on_tape(&mut tape, pooled, decision.v);
                        sum_me += tape.scalar(me);
                        l_me = Some(me);
                    }
                    if lambda2 > 0.0 {
                        let negatives: Vec<usize> = (0..pool_ids.len())
                            .filter(|&i| decision.hard[i] == 1.0 && pool_ids[i] != sample.gold_id)
                            .collect();
                        let cl = if negatives.is_empty() {
                            tape.constant(Array2::zeros((1, 1)))
                        } else {
                            let gold_emb = model.embed(&[sample.gold_id])?;
                            let mut cands =
                                Array2::zeros((1 + negatives.len(), model.handle().hidden_dim));
                            cands.row_mut(0).assign(&gold_emb.row(0));
                            for (j, &ni) in negatives.iter().enumerate() {
                                cands.row_mut(j + 1).assign(&pool_embeds.row(ni));
                            }
                            let one = tape.constant(Array2::ones((1, 1)));
                            let neg_w = tape.gather_cols(decision.v, &negatives);
                            let weights = tape.concat_cols(&[one, neg_w]);
                            contrastive_on_tape(&mut tape, h_o, &cands, weights, mecod.tau)?
                        };
                        sum_cl += tape.scalar(cl);
                        l_cl = Some(cl);
                    }
                }

                let weights = MecodConfig {
                    lambda1,
                    lambda2,
                    ..mecod.clone()
                };
                let joint = joint_on_tape(&mut tape, l_mlm, l_me, l_cl, &weights);
                sum_total += tape.scalar(joint);
                joint_terms.push(joint);
            }

            let mut total = joint_terms[0];
            for t in &joint_terms[1..] {
                total = tape.add(total, *t);
            }
            let batch_loss = tape.scale(total, 1.0 / joint_terms.len() as f64);
            let loss_value = tape.scalar(batch_loss);
            if !loss_value.is_finite() {
                return Err(Error::Train(nan_dump(
                    &relation_id,
                    epoch,
                    batch_idx,
                    loss_value,
                    &log,
                )));
            }
            tape.backward(batch_loss)?;

            let mut grads = prompt.grads(&tape, &pv);
            if let Some((w, b)) = sel_vars {
                grads.push(tape.grad(w));
                grads.push(tape.grad(b));
            }
            let mut params = prompt.each_param_mut();
            if let Some(s) = selector.as_mut() {
                params.push(&mut s.weight);
                params.push(&mut s.bias);
            }
            opt.step(&mut params, &grads);
        }

        if !prompt.all_finite() || selector.as_ref().is_some_and(|s| !s.all_finite()) {
            return Err(Error::Train(nan_dump(&relation_id, epoch, usize::MAX, f64::NAN, &log)));
        }

        let n = train_samples.len() as f64;
        let dev_p1 = dev_precision_at_1(&prompt, &dev_samples, model)?;
        let record = EpochRecord {
            epoch,
            l_mlm: sum_mlm / n,
            l_me: sum_me / n,
            l_cl: sum_cl / n,
            l_total: sum_total / n,
            dev_p1,
        };
        // Ties keep the latest checkpoint: the joint objective keeps
        // shaping the masked-path distribution after dev accuracy plateaus.
        let improved = best.as_ref().map_or(true, |(_, p, _, _)| dev_p1 >= *p);
        if improved {
            best = Some((epoch, dev_p1, prompt.clone(), selector.clone()));
        }
        log.push(record);
    }

    let (best_epoch, best_dev_p1, best_prompt, best_selector) = best.unwrap();
    Ok(TrainOutcome {
        relation_id,
        prompt: best_prompt,
        selector: best_selector,
        log,
        best_epoch,
        best_dev_p1,
    })
}

fn nan_dump(
    relation_id: &str,
    epoch: usize,
    batch: usize,
    loss: f64,
    log: &[EpochRecord],
) -> String {
    let tail: Vec<String> = log
        .iter()
        .rev()
        .take(3)
        .map(|r| format!("epoch {} l_total {:.6}", r.epoch, r.l_total))
        .collect();
    format!(
        "relation {relation_id}: non-finite loss {loss} at epoch {epoch} batch {batch}; recent: [{}]",
        tail.join(", ")
    )
}

fn dev_precision_at_1(
    prompt: &ContinuousPrompt,
    dev: &[Sample],
    model: &TinyMlm,
) -> Result<f64> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for sample in dev {
        let pos = sample
            .rendered_o
            .object_mask_position()
            .ok_or_else(|| Error::Train("rendered input lacks an object mask".into()))?;
        let embeds = prompt.encode(&sample.rendered_o, model)?;
        let logits = model.logits_at(&embeds, pos)?;
        if argmax_with_id_ties(logits.as_slice().unwrap()) == sample.gold_id {
            hits += 1;
        }
    }
    Ok(hits as f64 / dev.len() as f64)
}

/// Rebalances a relation's triples by shrinking the two largest object
/// groups to the third-largest group's size, sampling without replacement.
/// Fewer than three distinct objects leaves the input unchanged with a
/// warning flag.
pub fn undersample(triples: &[FactTriple], seed: u64) -> (Vec<FactTriple>, UndersampleOutcome) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in triples.iter().enumerate() {
        groups.entry(t.object.as_str()).or_default().push(i);
    }
    let before: BTreeMap<String, usize> = groups
        .iter()
        .map(|(k, v)| (k.to_string(), v.len()))
        .collect();
    if groups.len() < 3 {
        return (
            triples.to_vec(),
            UndersampleOutcome {
                warned: true,
                before: before.clone(),
                after: before,
            },
        );
    }
    // Order groups by size descending, ties by object name, and shrink the
    // first two to the third's size.
    let mut ordered: Vec<(&str, usize)> = groups.iter().map(|(k, v)| (*k, v.len())).collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let target = ordered[2].1;

    let mut rng = sub_rng(seed, 0xC3);
    let mut keep: HashSet<usize> = (0..triples.len()).collect();
    for &(obj, size) in ordered.iter().take(2) {
        if size <= target {
            continue;
        }
        let members = &groups[obj];
        let chosen = rand::seq::index::sample(&mut rng, members.len(), target);
        let chosen: HashSet<usize> = chosen.into_iter().map(|j| members[j]).collect();
        for &idx in members {
            if !chosen.contains(&idx) {
                keep.remove(&idx);
            }
        }
    }
    let out: Vec<FactTriple> = triples
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, t)| t.clone())
        .collect();
    let mut after: BTreeMap<String, usize> = BTreeMap::new();
    for t in &out {
        *after.entry(t.object.clone()).or_default() += 1;
    }
    (
        out,
        UndersampleOutcome {
            warned: false,
            before,
            after,
        },
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UndersampleOutcome {
    pub warned: bool,
    pub before: BTreeMap<String, usize>,
    pub after: BTreeMap<String, usize>,
}

/// Full-vocabulary evaluation of a trained prompt: for each triple the
/// original-path and subject-masked-path logits, stored as top-m lists.
/// The selector plays no role at evaluation time; it is accepted so dumps
/// can record whether one existed.
pub fn evaluate_prompt(
    prompt: &ContinuousPrompt,
    _selector: Option<&SelectorParams>,
    triples: &[FactTriple],
    template: &PromptTemplate,
    model: &TinyMlm,
) -> Result<Vec<RetrievalResult>> {
    let m = DUMP_TOP_M.min(model.handle().vocab_size);
    let mut out = Vec::with_capacity(triples.len());
    for (i, t) in triples.iter().enumerate() {
        let rendered_o = template.render(&t.subject, model)?;
        let (rendered_m, _) = subject_mask(&rendered_o, model);
        let pos = rendered_o
            .object_mask_position()
            .ok_or_else(|| Error::Train("rendered input lacks an object mask".into()))?;
        let gold = model.tokenize(&t.object)?;
        if gold.len() != 1 {
            return Err(Error::Train(format!("object {:?} is not single-token", t.object)));
        }
        let e_o = prompt.encode(&rendered_o, model)?;
        let logits_o = model.logits_at(&e_o, pos)?;
        let e_m = prompt.encode(&rendered_m, model)?;
        let logits_m = model.logits_at(&e_m, pos)?;
        out.push(RetrievalResult::from_full_logits(
            i,
            gold[0],
            logits_o.view(),
            logits_m.view(),
            m,
        ));
    }
    Ok(out)
}

/// The relation-level subject-masked query: the subject slot filled with
/// `subject_mask_count` mask tokens, no concrete subject. Returns the top-m
/// (id, logit) list that entropy and slope are computed from.
pub fn relation_masked_query(
    prompt: &ContinuousPrompt,
    template: &PromptTemplate,
    model: &TinyMlm,
    subject_mask_count: usize,
) -> Result<Vec<(TokenId, f64)>> {
    let rendered = template.render_masked_query(subject_mask_count, model)?;
    let pos = rendered
        .object_mask_position()
        .ok_or_else(|| Error::Train("rendered input lacks an object mask".into()))?;
    let embeds = prompt.encode(&rendered, model)?;
    let logits = model.logits_at(&embeds, pos)?;
    let m = DUMP_TOP_M.min(logits.len());
    Ok(top_k_candidates(logits.view(), m))
}

/// Evaluates one relation into the analytics input: per-triple results on
/// the requested split plus the relation's masked query.
pub fn evaluate_relation(
    prompt: &ContinuousPrompt,
    selector: Option<&SelectorParams>,
    triples: &[FactTriple],
    split: Split,
    template: &PromptTemplate,
    model: &TinyMlm,
    subject_mask_count: usize,
) -> Result<RelationEval> {
    let relation_id = triples
        .first()
        .map(|t| t.relation_id.clone())
        .ok_or_else(|| Error::Train("empty relation".into()))?;
    let subset: Vec<FactTriple> = triples.iter().filter(|t| t.split == split).cloned().collect();
    if subset.is_empty() {
        return Err(Error::Train(format!(
            "relation {relation_id}: no triples in requested split"
        )));
    }
    let results = evaluate_prompt(prompt, selector, &subset, template, model)?;
    let masked_query = relation_masked_query(prompt, template, model, subject_mask_count)?;
    Ok(RelationEval {
        relation_id,
        results,
        masked_query,
    })
}

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    relation_id: String,
    m: usize,
    n_results: usize,
    gold_ids: Vec<TokenId>,
    triple_ids: Vec<usize>,
}

/// Writes a relation's evaluation to a binary logit dump; bit-exact on
/// round trip.
pub fn write_dump(path: &Path, eval: &RelationEval) -> Result<()> {
    let header = DumpHeader {
        relation_id: eval.relation_id.clone(),
        m: eval.results.first().map(|r| r.m).unwrap_or(0),
        n_results: eval.results.len(),
        gold_ids: eval.results.iter().map(|r| r.gold_id).collect(),
        triple_ids: eval.results.iter().map(|r| r.triple_id).collect(),
    };
    let mut w = TensorFileWriter::create(path, DUMP_MAGIC, &serde_json::to_string(&header)?)?;
    let pairs_to_tensor = |pairs: &[(TokenId, f64)]| -> Array2<f64> {
        let mut t = Array2::zeros((2, pairs.len()));
        for (j, &(id, logit)) in pairs.iter().enumerate() {
            t[(0, j)] = id as f64;
            t[(1, j)] = logit;
        }
        t
    };
    for (i, r) in eval.results.iter().enumerate() {
        w.write_tensor(&format!("r{i}.original"), &pairs_to_tensor(&r.original))?;
        w.write_tensor(&format!("r{i}.masked"), &pairs_to_tensor(&r.masked))?;
    }
    w.write_tensor("masked_query", &pairs_to_tensor(&eval.masked_query))?;
    w.finish()
}

pub fn read_dump(path: &Path) -> Result<RelationEval> {
    let mut file = TensorFile::read(path, DUMP_MAGIC)?;
    let header: DumpHeader = serde_json::from_str(&file.header_json)?;
    let tensor_to_pairs = |t: &Array2<f64>| -> Vec<(TokenId, f64)> {
        (0..t.ncols()).map(|j| (t[(0, j)] as TokenId, t[(1, j)])).collect()
    };
    let mut results = Vec::with_capacity(header.n_results);
    for i in 0..header.n_results {
        let original = tensor_to_pairs(&file.take(&format!("r{i}.original"))?);
        let masked = tensor_to_pairs(&file.take(&format!("r{i}.masked"))?);
        results.push(RetrievalResult {
            triple_id: header.triple_ids[i],
            gold_id: header.gold_ids[i],
            m: header.m,
            original,
            masked,
        });
    }
    let masked_query = tensor_to_pairs(&file.take("masked_query")?);
    Ok(RelationEval {
        relation_id: header.relation_id,
        results,
        masked_query,
    })
}

#[derive(Serialize, Deserialize)]
struct PromptCheckpointHeader {
    relation_id: String,
    template_spec: String,
    prompt: crate::prompt::PromptHeader,
    has_selector: bool,
}

/// One checkpoint per relation: the prompt (raw vectors + reparameterizer)
/// and, when trained, the selector. The template spec travels with the
/// checkpoint so evaluation renders exactly what training saw.
pub fn save_prompt_checkpoint(
    path: &Path,
    relation_id: &str,
    template: &PromptTemplate,
    prompt: &ContinuousPrompt,
    selector: Option<&SelectorParams>,
) -> Result<()> {
    let header = PromptCheckpointHeader {
        relation_id: relation_id.to_string(),
        template_spec: template.to_spec_string(),
        prompt: prompt.header(),
        has_selector: selector.is_some(),
    };
    let mut w = TensorFileWriter::create(path, PROMPT_MAGIC, &serde_json::to_string(&header)?)?;
    prompt.write_into(&mut w)?;
    if let Some(s) = selector {
        w.write_tensor("selector.weight", &s.weight)?;
        w.write_tensor("selector.bias", &s.bias)?;
    }
    w.finish()
}

pub fn load_prompt_checkpoint(
    path: &Path,
) -> Result<(String, PromptTemplate, ContinuousPrompt, Option<SelectorParams>)> {
    let mut file = TensorFile::read(path, PROMPT_MAGIC)?;
    let header: PromptCheckpointHeader = serde_json::from_str(&file.header_json)?;
    let template = PromptTemplate::parse(&header.relation_id, &header.template_spec)?;
    let prompt = ContinuousPrompt::read_from(&mut file, &header.prompt)?;
    let selector = if header.has_selector {
        Some(SelectorParams {
            weight: file.take("selector.weight")?,
            bias: file.take("selector.bias")?,
        })
    } else {
        None
    };
    Ok((header.relation_id, template, prompt, selector))
}

/// Writes the epoch log as JSON-lines.
pub fn write_train_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for record in log {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One relation-training job and its inputs.
pub struct RelationJob<'a> {
    pub triples: &'a [FactTriple],
    pub template: &'a PromptTemplate,
}

/// Runs independent relation jobs in parallel (rayon); output order
/// follows input order and results are independent of scheduling.
pub fn run_relation_jobs(
    jobs: &[RelationJob<'_>],
    model: &TinyMlm,
    mecod: &MecodConfig,
    train: &TrainConfig,
) -> Vec<Result<TrainOutcome>> {
    jobs.par_iter()
        .map(|job| train_relation(job.triples, job.template, model, mecod, train))
        .collect()
}
