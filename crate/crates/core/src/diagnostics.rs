//! Interpretability probes for trained prompts: nearest vocabulary
//! neighbors of each prompt-token embedding, MLM candidate words at the
//! prompt-token positions, and per-triple case-study tables comparing the
//! original and subject-masked paths.
//!
//! Everything here is read-only over the prompt and model.

use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::analytics::{gold_rank, QueryPath, RetrievalResult};
use crate::backend::{MaskedLm, TinyMlm};
use crate::data::FactTriple;
use crate::objectives::top_k_candidates;
use crate::prompt::ContinuousPrompt;
use crate::templates::{subject_mask, PromptTemplate, RenderedInput, Slot};
use crate::train::DUMP_TOP_M;
use crate::{Error, Result, TokenId};

/// A ranked word with its score (cosine similarity or raw logit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedWord {
    pub word: String,
    pub score: f64,
}

fn cosine_or_zero(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Top vocabulary tokens by cosine similarity against the embedding table,
/// descending (ties by ascending id).
pub fn nearest_to_vector(
    query: ArrayView1<f64>,
    model: &dyn MaskedLm,
    top_m: usize,
) -> Vec<RankedWord> {
    let table = model.embedding_table();
    let mut sims: Vec<(TokenId, f64)> = (0..table.nrows())
        .map(|id| (id, cosine_or_zero(query, table.row(id))))
        .collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    sims.truncate(top_m);
    sims.into_iter()
        .map(|(id, score)| RankedWord {
            word: model.token_text(id).unwrap_or("<?>").to_string(),
            score,
        })
        .collect()
}

/// Nearest vocabulary neighbors of each reparameterized prompt-slot
/// embedding.
pub fn nearest_neighbors(
    prompt: &ContinuousPrompt,
    model: &dyn MaskedLm,
    top_m: usize,
) -> Vec<Vec<RankedWord>> {
    let slots = prompt.encode_slots();
    slots
        .rows()
        .into_iter()
        .map(|slot| nearest_to_vector(slot, model, top_m))
        .collect()
}

/// MLM candidate words at each tunable position: the assembled embedding
/// sequence is run through the encoder and each prompt position's hidden
/// state is projected through the MLM head.
pub fn mlm_candidates_at_prompt_positions(
    prompt: &ContinuousPrompt,
    rendered: &RenderedInput,
    model: &TinyMlm,
    top_m: usize,
) -> Result<Vec<Vec<RankedWord>>> {
    let embeds = prompt.encode(rendered, model)?;
    let hidden = model.forward_values(&embeds)?;
    let mut out = Vec::new();
    for (pos, _) in rendered.tunable_positions() {
        let logits = model.mlm_head(&hidden.row(pos).to_owned())?;
        let top = top_k_candidates(logits.view(), top_m);
        out.push(
            top.into_iter()
                .map(|(id, score)| RankedWord {
                    word: model.token_text(id).unwrap_or("<?>").to_string(),
                    score,
                })
                .collect(),
        );
    }
    Ok(out)
}

/// One side of a case study: ranked candidates plus where the gold object
/// landed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSide {
    pub candidates: Vec<RankedWord>,
    pub gold_rank: usize,
    pub gold_logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudy {
    pub relation_id: String,
    pub subject: String,
    pub object: String,
    pub top_k: usize,
    pub original: CaseSide,
    pub masked: CaseSide,
}

/// Top-k object candidates extracted by the original and subject-masked
/// prompts for one triple, with the gold object's rank and logit on each
/// path.
pub fn case_study(
    triple: &FactTriple,
    prompt: &ContinuousPrompt,
    template: &PromptTemplate,
    model: &TinyMlm,
    top_k: usize,
) -> Result<CaseStudy> {
    let rendered = template.render(&triple.subject, model)?;
    let (masked, _) = subject_mask(&rendered, model);
    let pos = rendered
        .object_mask_position()
        .ok_or_else(|| Error::Template("template lacks an object mask".into()))?;
    let gold = model.tokenize(&triple.object)?;
    if gold.len() != 1 {
        return Err(Error::Data(format!("object {:?} is not single-token", triple.object)));
    }
    let gold_id = gold[0];

    let logits_o = model.logits_at(&prompt.encode(&rendered, model)?, pos)?;
    let logits_m = model.logits_at(&prompt.encode(&masked, model)?, pos)?;
    let m = DUMP_TOP_M.min(model.handle().vocab_size);
    let result = RetrievalResult::from_full_logits(0, gold_id, logits_o.view(), logits_m.view(), m);

    let side = |full: &ndarray::Array1<f64>, path: QueryPath| -> CaseSide {
        let top = top_k_candidates(full.view(), top_k);
        CaseSide {
            candidates: top
                .into_iter()
                .map(|(id, score)| RankedWord {
                    word: model.token_text(id).unwrap_or("<?>").to_string(),
                    score,
                })
                .collect(),
            gold_rank: gold_rank(&result, path),
            gold_logit: full[gold_id],
        }
    };
    Ok(CaseStudy {
        relation_id: triple.relation_id.clone(),
        subject: triple.subject.clone(),
        object: triple.object.clone(),
        top_k,
        original: side(&logits_o, QueryPath::Original),
        masked: side(&logits_m, QueryPath::Masked),
    })
}

/// Labels for tunable slots. A template shaped `[P]*a [X] [P]*b [Y] [P]*c`
/// (or with `[Y]` before `[X]`) gets Front/Middle/Back names; any other
/// shape falls back to positional `P1..PT` labels.
pub fn slot_labels(template: &PromptTemplate) -> Vec<String> {
    let mut segments: Vec<usize> = vec![0];
    for slot in &template.slots {
        match slot {
            Slot::Tunable(_) => *segments.last_mut().unwrap() += 1,
            Slot::Subject | Slot::ObjectMask => segments.push(0),
            Slot::Literal(_) => {}
        }
    }
    if segments.len() == 3 && segments.iter().all(|&c| c > 0) {
        let names = ["Front", "Middle", "Back"];
        let mut out = Vec::new();
        for (seg, &count) in segments.iter().enumerate() {
            for i in 0..count {
                out.push(format!("{}-{}", names[seg], i + 1));
            }
        }
        out
    } else {
        (0..template.tunable_count())
            .map(|i| format!("P{}", i + 1))
            .collect()
    }
}

/// Markdown table with one row per prompt token and one column per ranked
/// word (the nearest-neighbor / MLM-candidate table layout).
pub fn word_table_markdown(title: &str, labels: &[String], lists: &[Vec<RankedWord>]) -> String {
    let width = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = String::new();
    out.push_str(&format!("| Prompt token | {title} |\n"));
    out.push_str("|---|");
    for _ in 0..width {
        out.push_str("---|");
    }
    out.push('\n');
    for (label, words) in labels.iter().zip(lists) {
        out.push_str(&format!("| {label} |"));
        for w in words {
            out.push_str(&format!(" {} |", w.word));
        }
        out.push('\n');
    }
    out
}

pub fn word_table_csv(path: &Path, labels: &[String], lists: &[Vec<RankedWord>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["slot", "rank", "word", "score"])?;
    for (label, words) in labels.iter().zip(lists) {
        for (i, word) in words.iter().enumerate() {
            w.write_record([
                label.clone(),
                (i + 1).to_string(),
                word.word.clone(),
                format!("{:.10}", word.score),
            ])?;
        }
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

/// Case-study table in the published layout: per path the top-k words with
/// their ranks and logits, gold in context.
pub fn case_study_markdown(case: &CaseStudy) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "### {} — subject {:?}, gold object {:?}\n\n",
        case.relation_id, case.subject, case.object
    ));
    out.push_str("| Path | Candidates (word, rank, logit) | Gold rank | Gold logit |\n");
    out.push_str("|---|---|---|---|\n");
    for (name, side) in [("original", &case.original), ("subject-masked", &case.masked)] {
        let cands: Vec<String> = side
            .candidates
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{}({}) {:.3}", w.word, i + 1, w.score))
            .collect();
        out.push_str(&format!(
            "| {name} | {} | {} | {:.3} |\n",
            cands.join(", "),
            side.gold_rank,
            side.gold_logit
        ));
    }
    out
}

pub fn case_study_csv(path: &Path, case: &CaseStudy) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path", "rank", "word", "logit", "gold_rank", "gold_logit"])?;
    for (name, side) in [("original", &case.original), ("masked", &case.masked)] {
        for (i, word) in side.candidates.iter().enumerate() {
            w.write_record([
                name.to_string(),
                (i + 1).to_string(),
                word.word.clone(),
                format!("{:.10}", word.score),
                side.gold_rank.to_string(),
                format!("{:.10}", side.gold_logit),
            ])?;
        }
    }
    w.flush().map_err(Error::Io)?;
    Ok(())
}

/// Parses a [`case_study_csv`] file back (used by round-trip checks and
/// downstream tooling).
pub fn read_case_study_csv(path: &Path) -> Result<Vec<(String, usize, String, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        rows.push((
            record[0].to_string(),
            record[1]
                .parse::<usize>()
                .map_err(|e| Error::Data(e.to_string()))?,
            record[2].to_string(),
            record[3]
                .parse::<f64>()
                .map_err(|e| Error::Data(e.to_string()))?,
        ));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{TinyMlmConfig, Vocab, MASK_TOKEN, PAD_TOKEN};
    use crate::data::Split;
    use crate::templates::ptuning_template;
    
    

    fn model() -> TinyMlm {
        let mut tokens: Vec<String> =
            [PAD_TOKEN, MASK_TOKEN].iter().map(|s| s.to_string()).collect();
        for i in 0..40 {
            tokens.push(format!("w{i:02}"));
        }
        let vocab = Vocab::from_tokens(tokens).unwrap();
        TinyMlm::new(
            TinyMlmConfig {
                vocab_size: vocab.len(),
                hidden_dim: 16,
                num_layers: 1,
                num_heads: 2,
                max_seq_len: 16,
                seed: 7,
            },
            vocab,
        )
        .unwrap()
    }

    #[test]
    fn table_row_query_is_its_own_nearest_neighbor() {
        let m = model();
        let table = m.embedding_table().clone();
        for id in [3usize, 17, 30] {
            let top = nearest_to_vector(table.row(id), &m, 3);
            assert_eq!(top[0].word, m.token_text(id).unwrap());
            assert!((top[0].score - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn neighbors_full_table_is_permutation() {
        let m = model();
        let prompt = ContinuousPrompt::init(3, &m, 2);
        let lists = nearest_neighbors(&prompt, &m, m.handle().vocab_size);
        assert_eq!(lists.len(), 3);
        for words in &lists {
            assert_eq!(words.len(), m.handle().vocab_size);
            let mut seen: Vec<&str> = words.iter().map(|w| w.word.as_str()).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), m.handle().vocab_size);
        }
    }

    #[test]
    fn neighbors_match_brute_force_scan() {
        let m = model();
        let prompt = ContinuousPrompt::init(2, &m, 3);
        let lists = nearest_neighbors(&prompt, &m, 5);
        let slots = prompt.encode_slots();
        let table = m.embedding_table();
        for (slot_idx, words) in lists.iter().enumerate() {
            let mut sims: Vec<(usize, f64)> = (0..table.nrows())
                .map(|j| (j, cosine_or_zero(slots.row(slot_idx), table.row(j))))
                .collect();
            sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (w, &(id, score)) in words.iter().zip(sims.iter().take(5)) {
                assert_eq!(w.word, m.token_text(id).unwrap());
                assert!((w.score - score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlm_candidates_deterministic_and_distinct() {
        let m = model();
        let template = ptuning_template("r", (2, 2, 2)).unwrap();
        let rendered = template.render("w05 w06", &m).unwrap();
        let prompt = ContinuousPrompt::init(6, &m, 4);
        let a = mlm_candidates_at_prompt_positions(&prompt, &rendered, &m, 8).unwrap();
        let b = mlm_candidates_at_prompt_positions(&prompt, &rendered, &m, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for words in &a {
            let mut seen: Vec<&str> = words.iter().map(|w| w.word.as_str()).collect();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 8, "candidates must be distinct");
        }
    }

    #[test]
    fn mlm_candidates_match_two_step_oracle() {
        let m = model();
        let template = ptuning_template("r", (1, 1, 1)).unwrap();
        let rendered = template.render("w05", &m).unwrap();
        let prompt = ContinuousPrompt::init(3, &m, 5);
        let lists = mlm_candidates_at_prompt_positions(&prompt, &rendered, &m, 4).unwrap();

        let embeds = prompt.encode(&rendered, &m).unwrap();
        let positions: Vec<usize> = rendered.tunable_positions().iter().map(|&(p, _)| p).collect();
        let hidden = m.forward_from_embeddings(&embeds, &positions).unwrap();
        for (slot_idx, &pos) in positions.iter().enumerate() {
            let logits = m.mlm_head(&hidden[&pos]).unwrap();
            let top = top_k_candidates(logits.view(), 4);
            for (w, (id, score)) in lists[slot_idx].iter().zip(top) {
                assert_eq!(w.word, m.token_text(id).unwrap());
                assert!((w.score - score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn case_study_consistent_with_analytics_rank() {
        let m = model();
        let template = ptuning_template("r", (2, 2, 2)).unwrap();
        let prompt = ContinuousPrompt::init(6, &m, 6);
        let triple = FactTriple {
            subject: "w05 w06".into(),
            relation_id: "r".into(),
            object: "w17".into(),
            split: Split::Test,
        };
        let case = case_study(&triple, &prompt, &template, &m, 5).unwrap();

        let results =
            crate::train::evaluate_prompt(&prompt, None, &[triple.clone()], &template, &m).unwrap();
        assert_eq!(
            case.original.gold_rank,
            gold_rank(&results[0], QueryPath::Original)
        );
        assert_eq!(case.masked.gold_rank, gold_rank(&results[0], QueryPath::Masked));

        // The masked side is subject-independent for a fixed relation.
        let other = FactTriple {
            subject: "w09 w10".into(),
            ..triple
        };
        let case2 = case_study(&other, &prompt, &template, &m, 5).unwrap();
        assert_eq!(case.masked.candidates, case2.masked.candidates);
    }

    #[test]
    fn case_study_csv_round_trip() {
        let m = model();
        let template = ptuning_template("r", (1, 1, 1)).unwrap();
        let prompt = ContinuousPrompt::init(3, &m, 8);
        let triple = FactTriple {
            subject: "w05".into(),
            relation_id: "r".into(),
            object: "w20".into(),
            split: Split::Test,
        };
        let case = case_study(&triple, &prompt, &template, &m, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("case.csv");
        case_study_csv(&path, &case).unwrap();
        let rows = read_case_study_csv(&path).unwrap();
        assert_eq!(rows.len(), 8);
        for (i, (path_name, rank, word, logit)) in rows.iter().take(4).enumerate() {
            assert_eq!(path_name, "original");
            assert_eq!(*rank, i + 1);
            assert_eq!(word, &case.original.candidates[i].word);
            assert!((logit - case.original.candidates[i].score).abs() < 1e-9);
        }
        let md = case_study_markdown(&case);
        assert!(md.contains("subject-masked"));
        assert!(md.contains(&case.object));
    }

    #[test]
    fn slot_labels_front_middle_back_or_positional() {
        let t = ptuning_template("r", (3, 3, 3)).unwrap();
        let labels = slot_labels(&t);
        assert_eq!(labels[0], "Front-1");
        assert_eq!(labels[4], "Middle-2");
        assert_eq!(labels[8], "Back-3");

        let manual = PromptTemplate::parse("r", "[P] a [X] b [Y]").unwrap();
        assert_eq!(slot_labels(&manual), vec!["P1".to_string()]);
    }
}
