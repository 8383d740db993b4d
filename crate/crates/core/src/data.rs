//! Fact-triple ingestion and the synthetic desk-scale world.
//!
//! External datasets arrive as JSON-lines with `sub_label`, `obj_label`,
//! `predicate_id` and an optional `split` field. Objects must tokenize to
//! exactly one id under the active backend; anything else is dropped and
//! counted in the load report. The synthetic generator builds a small fact
//! world whose per-relation object frequencies follow a Zipf skew, plus the
//! pretraining corpus and vocabulary for the tiny MLM.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{sub_rng, MaskedLm, Vocab, MASK_TOKEN, PAD_TOKEN, UNK_TOKEN};
use crate::templates::PromptTemplate;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One <subject, relation, object> item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation_id: String,
    pub object: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleFormat {
    LamaTrex,
    WikiUni,
    Synth,
}

impl std::str::FromStr for TripleFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lama_trex" => Ok(Self::LamaTrex),
            "wiki_uni" => Ok(Self::WikiUni),
            "synth" => Ok(Self::Synth),
            other => Err(Error::Data(format!("unknown triple format {other:?}"))),
        }
    }
}

/// On-disk record shape (LAMA convention).
#[derive(Debug, Serialize, Deserialize)]
struct TripleRecord {
    sub_label: String,
    obj_label: String,
    predicate_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    /// Multi-token or unknown objects dropped, per relation.
    pub dropped_multi_token: BTreeMap<String, usize>,
    pub kept: usize,
    pub warnings: Vec<String>,
}

/// The train/dev convention used when records carry no explicit split:
/// relations with at least 1000 records get 800 train / 200 dev / rest
/// test; smaller relations are all test.
const CONVENTION_TRAIN: usize = 800;
const CONVENTION_DEV: usize = 200;

/// Loads triples grouped by relation, preserving file order within each
/// relation. Objects that do not tokenize to exactly one known id are
/// dropped and counted.
pub fn load_triples(
    path: &Path,
    format: TripleFormat,
    model: &dyn MaskedLm,
) -> Result<(BTreeMap<String, Vec<FactTriple>>, LoadReport)> {
    let file = std::fs::File::open(path)?;
    let mut report = LoadReport::default();
    let mut by_relation: BTreeMap<String, Vec<(FactTriple, bool)>> = BTreeMap::new();
    let mut any = false;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        any = true;
        let record: TripleRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: malformed record: {e}", path.display(), lineno + 1))
        })?;
        if !single_known_token(model, &record.obj_label) {
            *report
                .dropped_multi_token
                .entry(record.predicate_id.clone())
                .or_default() += 1;
            continue;
        }
        let explicit = record.split.is_some();
        let triple = FactTriple {
            subject: record.sub_label,
            relation_id: record.predicate_id.clone(),
            object: record.obj_label,
            split: record.split.unwrap_or(Split::Test),
        };
        by_relation
            .entry(record.predicate_id)
            .or_default()
            .push((triple, explicit));
    }
    if !any {
        report.warnings.push(format!("{}: empty triple file", path.display()));
    }

    let mut out: BTreeMap<String, Vec<FactTriple>> = BTreeMap::new();
    for (rel, rows) in by_relation {
        let all_implicit = rows.iter().all(|(_, explicit)| !explicit);
        let n = rows.len();
        let mut triples: Vec<FactTriple> = rows.into_iter().map(|(t, _)| t).collect();
        if all_implicit && n >= CONVENTION_TRAIN + CONVENTION_DEV {
            for (i, t) in triples.iter_mut().enumerate() {
                t.split = if i < CONVENTION_TRAIN {
                    Split::Train
                } else if i < CONVENTION_TRAIN + CONVENTION_DEV {
                    Split::Dev
                } else {
                    Split::Test
                };
            }
        }
        report.kept += n;
        out.insert(rel, triples);
    }

    if format == TripleFormat::WikiUni {
        for (rel, triples) in &out {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for t in triples {
                *counts.entry(t.object.as_str()).or_default() += 1;
            }
            let values: HashSet<usize> = counts.values().copied().collect();
            if values.len() > 1 {
                report.warnings.push(format!(
                    "relation {rel}: object counts not uniform ({} distinct frequencies)",
                    values.len()
                ));
            }
        }
    }
    Ok((out, report))
}

fn single_known_token(model: &dyn MaskedLm, object: &str) -> bool {
    match model.tokenize(object) {
        Ok(ids) if ids.len() == 1 => model
            .token_text(ids[0])
            .is_some_and(|t| t == object.trim()),
        _ => false,
    }
}

/// Writes triples as JSON-lines in relation order (the loader's inverse).
pub fn save_triples(path: &Path, relations: &BTreeMap<String, Vec<FactTriple>>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for triples in relations.values() {
        for t in triples {
            let record = TripleRecord {
                sub_label: t.subject.clone(),
                obj_label: t.object.clone(),
                predicate_id: t.relation_id.clone(),
                split: Some(t.split),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Shape of the synthetic fact world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthWorldConfig {
    pub n_relations: usize,
    pub n_subjects_per_relation: usize,
    pub n_objects_per_relation: usize,
    /// Zipf exponent for object frequencies; 0 gives near-equal groups.
    pub skew: f64,
    /// Extra filler tokens mixed into the corpus vocabulary.
    pub vocab_extra: usize,
    pub seed: u64,
}

impl Default for SynthWorldConfig {
    fn default() -> Self {
        Self {
            n_relations: 5,
            n_subjects_per_relation: 200,
            n_objects_per_relation: 10,
            skew: 1.5,
            vocab_extra: 30,
            seed: 0,
        }
    }
}

impl SynthWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_relations == 0 || self.n_subjects_per_relation == 0 {
            return Err(Error::Data("world needs at least one relation and subject".into()));
        }
        if self.n_objects_per_relation < 3 {
            return Err(Error::Data(
                "n_objects_per_relation must be >= 3 (undersampling needs a third group)".into(),
            ));
        }
        if self.skew < 0.0 {
            return Err(Error::Data("skew must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthWorldConfig,
    pub n_triples: usize,
    pub n_corpus_sentences: usize,
    pub vocab_size: usize,
    pub relation_phrases: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub corpus: Vec<String>,
    pub relations: BTreeMap<String, Vec<FactTriple>>,
    pub vocab: Vocab,
    /// Manual (literal) template per relation: `[X] <phrase> [Y] .`
    pub templates: BTreeMap<String, PromptTemplate>,
    pub manifest: SynthManifest,
}

const SYLLABLES: [&str; 40] = [
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "ka", "ke", "ki", "ko", "ku",
    "la", "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu", "na", "ne", "ni", "no", "nu",
    "ra", "re", "ri", "ro", "ru", "sa", "se", "si", "so", "su",
];

struct WordGen {
    used: HashSet<String>,
}

impl WordGen {
    fn new() -> Self {
        Self { used: HashSet::new() }
    }

    fn fresh(&mut self, rng: &mut rand_chacha::ChaCha8Rng) -> String {
        loop {
            let syllables = rng.random_range(2..=3);
            let word: String = (0..syllables)
                .map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())])
                .collect();
            if self.used.insert(word.clone()) {
                return word;
            }
        }
    }

    fn pool(&mut self, rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<String> {
        (0..n).map(|_| self.fresh(rng)).collect()
    }
}

/// Normalized Zipf probabilities p_i proportional to (i+1)^-skew.
pub fn zipf_pmf(n: usize, skew: f64) -> Vec<f64> {
    let weights: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-skew)).collect();
    let z: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / z).collect()
}

/// Integer apportionment of `total` by largest remainder, so group sizes
/// track the pmf as closely as integers allow (skew 0 gives sizes within
/// one of each other).
pub fn apportion(total: usize, pmf: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = pmf.iter().map(|p| (p * total as f64).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut remainders: Vec<(usize, f64)> = pmf
        .iter()
        .enumerate()
        .map(|(i, p)| (i, p * total as f64 - counts[i] as f64))
        .collect();
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for &(i, _) in remainders.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Generates the synthetic world: per relation a gold subject-to-object
/// function with Zipf-skewed object frequencies, one corpus sentence per
/// triple plus filler, subject-disjoint splits, all seed-deterministic.
pub fn generate_synth_world(config: &SynthWorldConfig) -> Result<SynthWorld> {
    config.validate()?;
    let mut rng = sub_rng(config.seed, 0x5151);
    let mut words = WordGen::new();

    let first_pool = words.pool(&mut rng, 40);
    let last_pool = words.pool(&mut rng, 60);
    let single_pool = words.pool(&mut rng, (config.n_subjects_per_relation / 3).max(20));
    let filler_pool = words.pool(&mut rng, config.vocab_extra.max(4));

    let mut relations: BTreeMap<String, Vec<FactTriple>> = BTreeMap::new();
    let mut templates = BTreeMap::new();
    let mut relation_phrases = BTreeMap::new();
    let mut corpus = Vec::new();
    let mut object_words_all: Vec<String> = Vec::new();
    let mut phrase_words_all: Vec<String> = Vec::new();

    for r in 0..config.n_relations {
        let relation_id = format!("R{r:02}");
        let phrase_len = rng.random_range(2..=3);
        let phrase_words = words.pool(&mut rng, phrase_len);
        let phrase = phrase_words.join(" ");
        phrase_words_all.extend(phrase_words);
        let objects = words.pool(&mut rng, config.n_objects_per_relation);
        object_words_all.extend(objects.iter().cloned());

        // Distinct subjects: a mix of single words and first/last pairs.
        let mut subjects: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        while subjects.len() < config.n_subjects_per_relation {
            let subject = if rng.random::<f64>() < 0.35 {
                single_pool[rng.random_range(0..single_pool.len())].clone()
            } else {
                format!(
                    "{} {}",
                    first_pool[rng.random_range(0..first_pool.len())],
                    last_pool[rng.random_range(0..last_pool.len())]
                )
            };
            if seen.insert(subject.clone()) {
                subjects.push(subject);
            }
        }

        // Object assignment follows the skewed pmf exactly (up to integer
        // apportionment), then lands on random subjects.
        let pmf = zipf_pmf(config.n_objects_per_relation, config.skew);
        let counts = apportion(config.n_subjects_per_relation, &pmf);
        let mut assignment: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(obj, &c)| std::iter::repeat_n(obj, c))
            .collect();
        assignment.shuffle(&mut rng);

        // Subject-disjoint splits: 60% train, 20% dev, 20% test.
        let mut order: Vec<usize> = (0..subjects.len()).collect();
        order.shuffle(&mut rng);
        let n_test = subjects.len() / 5;
        let n_dev = subjects.len() / 5;
        let mut split_of = vec![Split::Train; subjects.len()];
        for &i in order.iter().take(n_test) {
            split_of[i] = Split::Test;
        }
        for &i in order.iter().skip(n_test).take(n_dev) {
            split_of[i] = Split::Dev;
        }

        let mut triples = Vec::with_capacity(subjects.len());
        for (i, subject) in subjects.iter().enumerate() {
            let object = objects[assignment[i]].clone();
            corpus.push(format!("{subject} {phrase} {object} ."));
            triples.push(FactTriple {
                subject: subject.clone(),
                relation_id: relation_id.clone(),
                object,
                split: split_of[i],
            });
        }
        let template = PromptTemplate::parse(&relation_id, &format!("[X] {phrase} [Y] ."))?;
        templates.insert(relation_id.clone(), template);
        relation_phrases.insert(relation_id.clone(), phrase);
        relations.insert(relation_id, triples);
    }

    // Filler sentences give the model non-fact context for the extra vocab.
    let n_filler = (corpus.len() / 10).max(30);
    for _ in 0..n_filler {
        let len = rng.random_range(4..=8);
        let sentence: Vec<&str> = (0..len)
            .map(|_| filler_pool[rng.random_range(0..filler_pool.len())].as_str())
            .collect();
        corpus.push(format!("{} .", sentence.join(" ")));
    }

    let mut tokens: Vec<String> = vec![PAD_TOKEN.into(), MASK_TOKEN.into(), UNK_TOKEN.into(), ".".into()];
    tokens.extend(first_pool);
    tokens.extend(last_pool);
    tokens.extend(single_pool);
    tokens.extend(phrase_words_all);
    tokens.extend(object_words_all);
    tokens.extend(filler_pool);
    let vocab = Vocab::from_tokens(tokens)?;

    let n_triples = relations.values().map(Vec::len).sum();
    let manifest = SynthManifest {
        config: config.clone(),
        n_triples,
        n_corpus_sentences: corpus.len(),
        vocab_size: vocab.len(),
        relation_phrases,
    };
    Ok(SynthWorld {
        corpus,
        relations,
        vocab,
        templates,
        manifest,
    })
}

impl SynthWorld {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_triples(&dir.join("triples.jsonl"), &self.relations)?;
        std::fs::write(dir.join("corpus.txt"), self.corpus.join("\n"))?;
        self.vocab.write_file(&dir.join("vocab.txt"))?;
        crate::templates::save_template_file(&dir.join("templates.json"), &self.templates)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{TinyMlm, TinyMlmConfig};

    fn small_config() -> SynthWorldConfig {
        SynthWorldConfig {
            n_relations: 2,
            n_subjects_per_relation: 60,
            n_objects_per_relation: 6,
            skew: 1.0,
            vocab_extra: 10,
            seed: 42,
        }
    }

    fn model_for(world: &SynthWorld) -> TinyMlm {
        TinyMlm::new(
            TinyMlmConfig {
                vocab_size: world.vocab.len(),
                hidden_dim: 8,
                num_layers: 1,
                num_heads: 1,
                max_seq_len: 16,
                seed: 0,
            },
            world.vocab.clone(),
        )
        .unwrap()
    }

    #[test]
    fn zero_skew_groups_equal_within_one() {
        let config = SynthWorldConfig {
            skew: 0.0,
            ..small_config()
        };
        let world = generate_synth_world(&config).unwrap();
        for triples in world.relations.values() {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for t in triples {
                *counts.entry(t.object.as_str()).or_default() += 1;
            }
            let max = counts.values().max().unwrap();
            let min = counts.values().min().unwrap();
            assert!(max - min <= 1, "counts {counts:?}");
        }
    }

    #[test]
    fn skewed_frequencies_match_zipf() {
        let config = SynthWorldConfig {
            n_relations: 1,
            n_subjects_per_relation: 200,
            n_objects_per_relation: 10,
            skew: 1.5,
            vocab_extra: 10,
            seed: 7,
        };
        let world = generate_synth_world(&config).unwrap();
        let triples = world.relations.values().next().unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in triples {
            *counts.entry(t.object.as_str()).or_default() += 1;
        }
        let mut observed: Vec<usize> = counts.values().copied().collect();
        observed.sort_unstable_by(|a, b| b.cmp(a));
        let pmf = zipf_pmf(10, 1.5);
        let chi2: f64 = observed
            .iter()
            .zip(&pmf)
            .map(|(&o, &p)| {
                let e = p * 200.0;
                (o as f64 - e) * (o as f64 - e) / e
            })
            .sum();
        // Critical value for chi-square, df = 9, alpha = 0.01.
        assert!(chi2 < 21.666, "chi2 {chi2} too large for Zipf(1.5)");
    }

    #[test]
    fn splits_are_subject_disjoint() {
        let world = generate_synth_world(&small_config()).unwrap();
        for triples in world.relations.values() {
            let mut by_split: HashMap<Split, HashSet<&str>> = HashMap::new();
            for t in triples {
                by_split.entry(t.split).or_default().insert(t.subject.as_str());
            }
            let train = by_split.get(&Split::Train).cloned().unwrap_or_default();
            let test = by_split.get(&Split::Test).cloned().unwrap_or_default();
            let dev = by_split.get(&Split::Dev).cloned().unwrap_or_default();
            assert!(train.is_disjoint(&test));
            assert!(train.is_disjoint(&dev));
            assert!(dev.is_disjoint(&test));
            assert!(!train.is_empty() && !test.is_empty() && !dev.is_empty());
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let w1 = generate_synth_world(&small_config()).unwrap();
        let w2 = generate_synth_world(&small_config()).unwrap();
        assert_eq!(w1.corpus, w2.corpus);
        assert_eq!(w1.relations, w2.relations);
        assert_eq!(w1.vocab.tokens(), w2.vocab.tokens());
    }

    #[test]
    fn corpus_tokens_all_in_vocab() {
        let world = generate_synth_world(&small_config()).unwrap();
        for sentence in &world.corpus {
            world.vocab.tokenize(sentence).unwrap();
            for w in sentence.split_whitespace() {
                assert!(world.vocab.id(w).is_some(), "word {w} missing from vocab");
            }
        }
    }

    #[test]
    fn objects_need_third_group() {
        let config = SynthWorldConfig {
            n_objects_per_relation: 2,
            ..small_config()
        };
        assert!(generate_synth_world(&config).is_err());
    }

    #[test]
    fn triples_round_trip_through_file() {
        let world = generate_synth_world(&small_config()).unwrap();
        let model = model_for(&world);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("triples.jsonl");
        save_triples(&path, &world.relations).unwrap();
        let (loaded, report) = load_triples(&path, TripleFormat::Synth, &model).unwrap();
        assert_eq!(loaded, world.relations);
        assert!(report.dropped_multi_token.is_empty());
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn empty_file_warns() {
        let world = generate_synth_world(&small_config()).unwrap();
        let model = model_for(&world);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let (map, report) = load_triples(&path, TripleFormat::LamaTrex, &model).unwrap();
        assert!(map.is_empty());
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn multi_token_objects_filtered_and_counted() {
        let world = generate_synth_world(&small_config()).unwrap();
        let model = model_for(&world);
        let good_obj = &world.relations.values().next().unwrap()[0].object;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.jsonl");
        let lines = [
            format!(
                r#"{{"sub_label":"a","obj_label":"{good_obj}","predicate_id":"P9","split":"test"}}"#
            ),
            r#"{"sub_label":"b","obj_label":"two words","predicate_id":"P9","split":"test"}"#.into(),
            r#"{"sub_label":"c","obj_label":"notinvocab","predicate_id":"P9","split":"test"}"#.into(),
        ];
        std::fs::write(&path, lines.join("\n")).unwrap();
        let (map, report) = load_triples(&path, TripleFormat::LamaTrex, &model).unwrap();
        assert_eq!(map["P9"].len(), 1);
        assert_eq!(report.dropped_multi_token["P9"], 2);
    }

    #[test]
    fn malformed_record_reports_line() {
        let world = generate_synth_world(&small_config()).unwrap();
        let model = model_for(&world);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"sub_label\": 3}\n").unwrap();
        let err = load_triples(&path, TripleFormat::LamaTrex, &model).unwrap_err();
        assert!(err.to_string().contains(":1:"), "error was {err}");
    }

    #[test]
    fn implicit_split_convention_applies_at_1000() {
        let world = generate_synth_world(&small_config()).unwrap();
        let model = model_for(&world);
        let good_obj = world.relations.values().next().unwrap()[0].object.clone();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.jsonl");
        let mut lines = Vec::new();
        for i in 0..1050 {
            lines.push(format!(
                r#"{{"sub_label":"s{i}","obj_label":"{good_obj}","predicate_id":"P1"}}"#
            ));
        }
        std::fs::write(&path, lines.join("\n")).unwrap();
        let (map, _) = load_triples(&path, TripleFormat::LamaTrex, &model).unwrap();
        let triples = &map["P1"];
        assert_eq!(triples.iter().filter(|t| t.split == Split::Train).count(), 800);
        assert_eq!(triples.iter().filter(|t| t.split == Split::Dev).count(), 200);
        assert_eq!(triples.iter().filter(|t| t.split == Split::Test).count(), 50);
    }

    #[test]
    fn wiki_uni_uniformity_checked() {
        let world = generate_synth_world(&small_config()).unwrap();
        let model = model_for(&world);
        let objs: Vec<String> = world.relations.values().next().unwrap()[..3]
            .iter()
            .map(|t| t.object.clone())
            .collect();
        let dir = tempfile::tempdir().unwrap();

        let uniform = dir.path().join("uniform.jsonl");
        let mut lines = Vec::new();
        for (i, o) in objs.iter().cycle().take(9).enumerate() {
            lines.push(format!(
                r#"{{"sub_label":"s{i}","obj_label":"{o}","predicate_id":"P1","split":"test"}}"#
            ));
        }
        std::fs::write(&uniform, lines.join("\n")).unwrap();
        let (_, report) = load_triples(&uniform, TripleFormat::WikiUni, &model).unwrap();
        assert!(report.warnings.is_empty());

        let skewed = dir.path().join("skewed.jsonl");
        lines.push(format!(
            r#"{{"sub_label":"extra","obj_label":"{}","predicate_id":"P1","split":"test"}}"#,
            objs[0]
        ));
        std::fs::write(&skewed, lines.join("\n")).unwrap();
        let (_, report) = load_triples(&skewed, TripleFormat::WikiUni, &model).unwrap();
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn world_write_dir_outputs_all_files() {
        let world = generate_synth_world(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        world.write_dir(dir.path()).unwrap();
        for f in [
            "triples.jsonl",
            "corpus.txt",
            "vocab.txt",
            "templates.json",
            "manifest.json",
        ] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
        let vocab = Vocab::from_file(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(vocab.tokens(), world.vocab.tokens());
    }
}
