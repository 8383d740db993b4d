//! Prompt templates: parsing, rendering with a subject, and subject masking.
//!
//! The template DSL is whitespace-separated: `[P]` is a tunable slot, `[X]`
//! the subject slot, `[Y]` the object mask, anything else a literal word.
//! A subject-masked variant replaces every token of the rendered subject
//! span with the mask token, one mask per subject token.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::MaskedLm;
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Literal(String),
    Subject,
    ObjectMask,
    Tunable(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub relation_id: String,
    pub slots: Vec<Slot>,
}

/// Per-position provenance of a rendered token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PosTag {
    Literal,
    Subject,
    ObjectMask,
    Tunable(usize),
}

/// Token ids plus the slot each position came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedInput {
    pub ids: Vec<TokenId>,
    pub tags: Vec<PosTag>,
}

impl RenderedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn object_mask_position(&self) -> Option<usize> {
        self.tags.iter().position(|t| *t == PosTag::ObjectMask)
    }

    pub fn subject_positions(&self) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == PosTag::Subject)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn tunable_positions(&self) -> Vec<(usize, usize)> {
        self.tags
            .iter()
            .enumerate()
            .filter_map(|(i, t)| match t {
                PosTag::Tunable(k) => Some((i, *k)),
                _ => None,
            })
            .collect()
    }

    pub fn tunable_count(&self) -> usize {
        self.tunable_positions().len()
    }
}

impl PromptTemplate {
    /// Parses the `[P]`/`[X]`/`[Y]` DSL. Exactly one `[Y]` and at most one
    /// `[X]` are allowed.
    pub fn parse(relation_id: &str, spec: &str) -> Result<Self> {
        let mut slots = Vec::new();
        let mut tunable = 0usize;
        let mut object_masks = 0usize;
        let mut subjects = 0usize;
        for word in spec.split_whitespace() {
            match word {
                "[P]" => {
                    slots.push(Slot::Tunable(tunable));
                    tunable += 1;
                }
                "[X]" => {
                    slots.push(Slot::Subject);
                    subjects += 1;
                }
                "[Y]" => {
                    slots.push(Slot::ObjectMask);
                    object_masks += 1;
                }
                lit => slots.push(Slot::Literal(lit.to_string())),
            }
        }
        if object_masks != 1 {
            return Err(Error::Template(format!(
                "template for {relation_id:?} must contain exactly one [Y], found {object_masks}"
            )));
        }
        if subjects > 1 {
            return Err(Error::Template(format!(
                "template for {relation_id:?} has {subjects} [X] slots, at most one allowed"
            )));
        }
        Ok(Self {
            relation_id: relation_id.to_string(),
            slots,
        })
    }

    /// Inverse of [`PromptTemplate::parse`].
    pub fn to_spec_string(&self) -> String {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Literal(w) => w.as_str(),
                Slot::Subject => "[X]",
                Slot::ObjectMask => "[Y]",
                Slot::Tunable(_) => "[P]",
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tunable_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s, Slot::Tunable(_)))
            .count()
    }

    pub fn has_subject_slot(&self) -> bool {
        self.slots.iter().any(|s| *s == Slot::Subject)
    }

    /// Renders with a concrete subject. The object mask becomes one mask
    /// token; tunable slots carry the pad id as a placeholder and are tagged
    /// for embedding substitution.
    pub fn render(&self, subject: &str, model: &dyn MaskedLm) -> Result<RenderedInput> {
        let handle = model.handle();
        let mut ids = Vec::new();
        let mut tags = Vec::new();
        for slot in &self.slots {
            match slot {
                Slot::Literal(w) => {
                    for id in model.tokenize(w)? {
                        ids.push(id);
                        tags.push(PosTag::Literal);
                    }
                }
                Slot::Subject => {
                    if subject.trim().is_empty() {
                        return Err(Error::Template(format!(
                            "template {} has a subject slot but no subject was given",
                            self.relation_id
                        )));
                    }
                    for id in model.tokenize(subject)? {
                        ids.push(id);
                        tags.push(PosTag::Subject);
                    }
                }
                Slot::ObjectMask => {
                    ids.push(handle.mask_id);
                    tags.push(PosTag::ObjectMask);
                }
                Slot::Tunable(k) => {
                    ids.push(handle.pad_id);
                    tags.push(PosTag::Tunable(*k));
                }
            }
        }
        Ok(RenderedInput { ids, tags })
    }

    /// Renders the relation-level subject-masked query: the subject slot is
    /// filled with `subject_mask_count` mask tokens directly (no concrete
    /// subject), everything else as in [`PromptTemplate::render`].
    pub fn render_masked_query(
        &self,
        subject_mask_count: usize,
        model: &dyn MaskedLm,
    ) -> Result<RenderedInput> {
        let handle = model.handle();
        let mut ids = Vec::new();
        let mut tags = Vec::new();
        for slot in &self.slots {
            match slot {
                Slot::Literal(w) => {
                    for id in model.tokenize(w)? {
                        ids.push(id);
                        tags.push(PosTag::Literal);
                    }
                }
                Slot::Subject => {
                    for _ in 0..subject_mask_count.max(1) {
                        ids.push(handle.mask_id);
                        tags.push(PosTag::Subject);
                    }
                }
                Slot::ObjectMask => {
                    ids.push(handle.mask_id);
                    tags.push(PosTag::ObjectMask);
                }
                Slot::Tunable(k) => {
                    ids.push(handle.pad_id);
                    tags.push(PosTag::Tunable(*k));
                }
            }
        }
        Ok(RenderedInput { ids, tags })
    }
}

/// Replaces every subject-span token with the mask id, leaving all other
/// positions (and the overall length) unchanged. Returns the masked input
/// and whether a subject span was present; an input without one comes back
/// unchanged with `false` as the warning flag.
pub fn subject_mask(rendered: &RenderedInput, model: &dyn MaskedLm) -> (RenderedInput, bool) {
    let mask_id = model.handle().mask_id;
    let mut out = rendered.clone();
    let mut had_subject = false;
    for (id, tag) in out.ids.iter_mut().zip(&out.tags) {
        if *tag == PosTag::Subject {
            *id = mask_id;
            had_subject = true;
        }
    }
    (out, had_subject)
}

/// P-tuning shaped template: tunable segments around the subject and the
/// object mask, no literal words (`[P]*a [X] [P]*b [Y] [P]*c`).
pub fn ptuning_template(relation_id: &str, segments: (usize, usize, usize)) -> Result<PromptTemplate> {
    let (a, b, c) = segments;
    let mut parts: Vec<&str> = Vec::new();
    parts.extend(std::iter::repeat_n("[P]", a));
    parts.push("[X]");
    parts.extend(std::iter::repeat_n("[P]", b));
    parts.push("[Y]");
    parts.extend(std::iter::repeat_n("[P]", c));
    PromptTemplate::parse(relation_id, &parts.join(" "))
}

/// Prefix-tuning shaped template: `prefix_len` leading tunable slots
/// followed by the manual template's slots.
pub fn prefix_template(manual: &PromptTemplate, prefix_len: usize) -> PromptTemplate {
    let mut slots: Vec<Slot> = (0..prefix_len).map(Slot::Tunable).collect();
    slots.extend(manual.slots.iter().cloned());
    PromptTemplate {
        relation_id: manual.relation_id.clone(),
        slots,
    }
}

/// Template file: JSON map relation_id -> template spec string.
pub fn load_template_file(path: &Path) -> Result<BTreeMap<String, PromptTemplate>> {
    let text = std::fs::read_to_string(path)?;
    let specs: BTreeMap<String, String> = serde_json::from_str(&text)?;
    specs
        .into_iter()
        .map(|(rel, spec)| PromptTemplate::parse(&rel, &spec).map(|t| (rel, t)))
        .collect()
}

pub fn save_template_file(path: &Path, templates: &BTreeMap<String, PromptTemplate>) -> Result<()> {
    let specs: BTreeMap<&str, String> = templates
        .iter()
        .map(|(rel, t)| (rel.as_str(), t.to_spec_string()))
        .collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(&specs)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{TinyMlm, TinyMlmConfig, Vocab, MASK_TOKEN, PAD_TOKEN, UNK_TOKEN};

    fn model() -> TinyMlm {
        let mut tokens: Vec<String> = [PAD_TOKEN, MASK_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for w in [
            "The", "native", "language", "of", "is", ".", "Pierre", "Messmer", "English",
        ] {
            tokens.push(w.into());
        }
        let vocab = Vocab::from_tokens(tokens).unwrap();
        TinyMlm::new(
            TinyMlmConfig {
                vocab_size: vocab.len(),
                hidden_dim: 8,
                num_layers: 1,
                num_heads: 1,
                max_seq_len: 16,
                seed: 0,
            },
            vocab,
        )
        .unwrap()
    }

    #[test]
    fn parse_ptuning_shape() {
        let t = PromptTemplate::parse("P103", "[P] [Y] [P] [X] [P]").unwrap();
        assert_eq!(
            t.slots,
            vec![
                Slot::Tunable(0),
                Slot::ObjectMask,
                Slot::Tunable(1),
                Slot::Subject,
                Slot::Tunable(2)
            ]
        );
    }

    #[test]
    fn parse_manual_lama_template() {
        let t = PromptTemplate::parse("P103", "The native language of [X] is [Y] .").unwrap();
        let literals = t
            .slots
            .iter()
            .filter(|s| matches!(s, Slot::Literal(_)))
            .count();
        assert_eq!(literals, 6);
        assert!(t.has_subject_slot());
        assert_eq!(t.slots[4], Slot::Subject);
        assert_eq!(t.slots[6], Slot::ObjectMask);
    }

    #[test]
    fn parse_rejects_bad_mask_counts() {
        assert!(PromptTemplate::parse("r", "[P] [P]").is_err());
        assert!(PromptTemplate::parse("r", "[Y] [Y]").is_err());
        assert!(PromptTemplate::parse("r", "[X] [Y] [X]").is_err());
    }

    #[test]
    fn spec_string_round_trips() {
        for spec in [
            "[P] [Y] [P] [X] [P]",
            "The native language of [X] is [Y] .",
            "[P] [P] [P] [X] [P] [P] [P] [Y]",
        ] {
            let t = PromptTemplate::parse("r", spec).unwrap();
            assert_eq!(t.to_spec_string(), spec);
            assert_eq!(PromptTemplate::parse("r", &t.to_spec_string()).unwrap(), t);
        }
    }

    #[test]
    fn render_lama_row() {
        let m = model();
        let t = PromptTemplate::parse("P103", "The native language of [X] is [Y] .").unwrap();
        let r = t.render("Pierre Messmer", &m).unwrap();
        let words: Vec<&str> = r.ids.iter().map(|&i| m.vocab().token(i).unwrap()).collect();
        assert_eq!(
            words,
            vec!["The", "native", "language", "of", "Pierre", "Messmer", "is", MASK_TOKEN, "."]
        );
        assert_eq!(r.object_mask_position(), Some(7));
        assert_eq!(r.subject_positions(), vec![4, 5]);
        // Rendered length is the sum of per-slot token lengths.
        assert_eq!(r.len(), 5 + 2 + 1 + 1);
    }

    #[test]
    fn render_without_subject_slot_ignores_subject() {
        let m = model();
        let t = PromptTemplate::parse("r", "language is [Y]").unwrap();
        let a = t.render("Pierre Messmer", &m).unwrap();
        let b = t.render("English", &m).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn render_requires_subject_when_slot_present() {
        let m = model();
        let t = PromptTemplate::parse("r", "[X] is [Y]").unwrap();
        assert!(t.render("", &m).is_err());
    }

    #[test]
    fn subject_mask_replaces_each_subject_token() {
        let m = model();
        let t = PromptTemplate::parse("P103", "The native language of [X] is [Y] .").unwrap();
        let r = t.render("Pierre Messmer", &m).unwrap();
        let (masked, had) = subject_mask(&r, &m);
        assert!(had);
        let words: Vec<&str> = masked
            .ids
            .iter()
            .map(|&i| m.vocab().token(i).unwrap())
            .collect();
        assert_eq!(
            words,
            vec![
                "The", "native", "language", "of", MASK_TOKEN, MASK_TOKEN, "is", MASK_TOKEN, "."
            ]
        );
        assert_eq!(masked.len(), r.len());
        assert_eq!(masked.tags, r.tags);
        assert_eq!(masked.object_mask_position(), r.object_mask_position());

        // Idempotence.
        let (twice, _) = subject_mask(&masked, &m);
        assert_eq!(twice, masked);
    }

    #[test]
    fn subject_mask_single_token_subject() {
        let m = model();
        let t = PromptTemplate::parse("r", "[X] is [Y]").unwrap();
        let r = t.render("Pierre", &m).unwrap();
        let (masked, _) = subject_mask(&r, &m);
        let replaced = r
            .ids
            .iter()
            .zip(&masked.ids)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(replaced, 1);
    }

    #[test]
    fn subject_mask_without_subject_warns() {
        let m = model();
        let t = PromptTemplate::parse("r", "language is [Y]").unwrap();
        let r = t.render("", &m).unwrap();
        let (out, had) = subject_mask(&r, &m);
        assert!(!had);
        assert_eq!(out, r);
    }

    #[test]
    fn masked_query_uses_requested_mask_count() {
        let m = model();
        let t = PromptTemplate::parse("r", "The native language of [X] is [Y] .").unwrap();
        let q = t.render_masked_query(2, &m).unwrap();
        assert_eq!(q.subject_positions().len(), 2);
        let mask = m.vocab().mask_id();
        for p in q.subject_positions() {
            assert_eq!(q.ids[p], mask);
        }
    }

    #[test]
    fn ptuning_and_prefix_shapes() {
        let t = ptuning_template("P103", (3, 3, 3)).unwrap();
        assert_eq!(t.to_spec_string(), "[P] [P] [P] [X] [P] [P] [P] [Y] [P] [P] [P]");
        assert_eq!(t.tunable_count(), 9);

        let manual = PromptTemplate::parse("P103", "The native language of [X] is [Y] .").unwrap();
        let p = prefix_template(&manual, 5);
        assert_eq!(
            p.to_spec_string(),
            "[P] [P] [P] [P] [P] The native language of [X] is [Y] ."
        );
        assert_eq!(p.tunable_count(), 5);
        assert_eq!(p.relation_id, "P103");
    }

    #[test]
    fn template_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.json");
        let mut map = BTreeMap::new();
        for (rel, spec) in [
            ("P103", "The native language of [X] is [Y] ."),
            ("P178", "[P] [P] [P] [X] [P] [P] [P] [Y]"),
        ] {
            map.insert(rel.to_string(), PromptTemplate::parse(rel, spec).unwrap());
        }
        save_template_file(&path, &map).unwrap();
        let loaded = load_template_file(&path).unwrap();
        assert_eq!(loaded, map);
    }
}
