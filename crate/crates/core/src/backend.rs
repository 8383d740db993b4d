//! Masked language model backend.
//!
//! [`MaskedLm`] is the uniform surface the rest of the crate talks to:
//! tokenization, embedding lookup, a forward pass from an embedding
//! sequence, and the MLM-head projection. [`TinyMlm`] is the bundled
//! desk-scale implementation, a small pre-norm transformer encoder trained
//! from scratch; adapters for full-size pretrained encoders implement the
//! same trait and identify themselves by a string id in their config.
//!
//! The tokenizer here is whole-word over a fixed vocabulary, so the
//! "one mask per subject token" rule degenerates to one mask per word.
//! Backends with subword tokenizers inherit the rule at the token level
//! through [`MaskedLm::tokenize`].

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Adam, Tape, Var};
use crate::tensorio::{TensorFile, TensorFileWriter};
use crate::{Error, Result, TokenId};

pub const MASK_TOKEN: &str = "[MASK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

const CHECKPOINT_MAGIC: &[u8; 4] = b"TMLM";
const LAYER_NORM_EPS: f64 = 1e-5;

/// Metadata describing a backend instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHandle {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub mask_id: TokenId,
    pub pad_id: TokenId,
    pub frozen: bool,
}

impl ModelHandle {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden_dim == 0 {
            return Err(Error::Model("vocab_size and hidden_dim must be positive".into()));
        }
        if self.mask_id >= self.vocab_size || self.pad_id >= self.vocab_size {
            return Err(Error::Model("special token id outside vocabulary".into()));
        }
        if self.mask_id == self.pad_id {
            return Err(Error::Model("mask_id and pad_id must differ".into()));
        }
        Ok(())
    }
}

/// Uniform interface to a masked language model.
///
/// Everything downstream (templates, prompt tuning, analytics, diagnostics)
/// goes through these operations only.
pub trait MaskedLm {
    fn handle(&self) -> ModelHandle;

    fn token_text(&self, id: TokenId) -> Option<&str>;

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>>;

    /// Pure lookup into the input embedding table; one row per id.
    fn embed(&self, ids: &[TokenId]) -> Result<Array2<f64>>;

    /// Input embedding table, `vocab_size x hidden_dim`.
    fn embedding_table(&self) -> &Array2<f64>;

    /// Runs the encoder on an embedding sequence and returns the final
    /// hidden state at each requested position.
    fn forward_from_embeddings(
        &self,
        embeds: &Array2<f64>,
        positions: &[usize],
    ) -> Result<BTreeMap<usize, Array1<f64>>>;

    /// Projects one hidden state to raw vocabulary logits.
    fn mlm_head(&self, hidden: &Array1<f64>) -> Result<Array1<f64>>;
}

/// Whole-word vocabulary with fixed special tokens.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    mask_id: TokenId,
    pad_id: TokenId,
    unk_id: Option<TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Tokenize(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let lookup = |name: &str| index.get(name).copied();
        let mask_id = lookup(MASK_TOKEN)
            .ok_or_else(|| Error::Tokenize(format!("vocabulary lacks {MASK_TOKEN}")))?;
        let pad_id = lookup(PAD_TOKEN)
            .ok_or_else(|| Error::Tokenize(format!("vocabulary lacks {PAD_TOKEN}")))?;
        Ok(Self {
            unk_id: lookup(UNK_TOKEN),
            tokens,
            index,
            mask_id,
            pad_id,
        })
    }

    /// One token per line, order defines the id space.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_owned).collect())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.tokens.join("\n"))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        if text.trim().is_empty() {
            return Err(Error::Tokenize("empty input".into()));
        }
        text.split_whitespace()
            .map(|w| {
                self.index.get(w).copied().or(self.unk_id).ok_or_else(|| {
                    Error::Tokenize(format!("unknown token {w:?} and no {UNK_TOKEN} configured"))
                })
            })
            .collect()
    }
}

/// Shape of the bundled tiny MLM.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TinyMlmConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl TinyMlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.hidden_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Model("all TinyMlmConfig dimensions must be positive".into()));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Model(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    fn ff_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    wq: Array2<f64>,
    bq: Array2<f64>,
    wk: Array2<f64>,
    bk: Array2<f64>,
    wv: Array2<f64>,
    bv: Array2<f64>,
    wo: Array2<f64>,
    bo: Array2<f64>,
    ln1_g: Array2<f64>,
    ln1_b: Array2<f64>,
    ln2_g: Array2<f64>,
    ln2_b: Array2<f64>,
    ff_w1: Array2<f64>,
    ff_b1: Array2<f64>,
    ff_w2: Array2<f64>,
    ff_b2: Array2<f64>,
}

#[derive(Debug, Clone)]
struct TinyMlmParams {
    tok_emb: Array2<f64>,
    pos_emb: Array2<f64>,
    layers: Vec<LayerParams>,
    final_ln_g: Array2<f64>,
    final_ln_b: Array2<f64>,
    head_b: Array2<f64>,
}

struct LayerVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln1_g: Var,
    ln1_b: Var,
    ln2_g: Var,
    ln2_b: Var,
    ff_w1: Var,
    ff_b1: Var,
    ff_w2: Var,
    ff_b2: Var,
}

/// Tape handles for one registration of the model parameters.
pub struct TinyMlmVars {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    final_ln_g: Var,
    final_ln_b: Var,
    head_b: Var,
}

impl TinyMlmVars {
    /// The registered input embedding table.
    pub fn tok_emb(&self) -> Var {
        self.tok_emb
    }

    /// Embedding rows for an id sequence, gathered from the registered
    /// table so gradients (if any) reach it.
    pub fn embed_rows(&self, tape: &mut Tape, ids: &[TokenId]) -> Var {
        tape.gather_rows(self.tok_emb, ids)
    }
}

/// Small pre-norm transformer encoder with a linear MLM head.
#[derive(Debug, Clone)]
pub struct TinyMlm {
    config: TinyMlmConfig,
    vocab: Vocab,
    params: TinyMlmParams,
    frozen: bool,
}

impl TinyMlm {
    /// Fresh model with BERT-style N(0, 0.02) weight init.
    pub fn new(config: TinyMlmConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Model(format!(
                "vocab has {} tokens but config.vocab_size is {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let mut mat = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| normal.sample(&mut rng));
        let (h, v, f, s) = (
            config.hidden_dim,
            config.vocab_size,
            config.ff_dim(),
            config.max_seq_len,
        );
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                wq: mat(h, h),
                bq: Array2::zeros((1, h)),
                wk: mat(h, h),
                bk: Array2::zeros((1, h)),
                wv: mat(h, h),
                bv: Array2::zeros((1, h)),
                wo: mat(h, h),
                bo: Array2::zeros((1, h)),
                ln1_g: Array2::ones((1, h)),
                ln1_b: Array2::zeros((1, h)),
                ln2_g: Array2::ones((1, h)),
                ln2_b: Array2::zeros((1, h)),
                ff_w1: mat(h, f),
                ff_b1: Array2::zeros((1, f)),
                ff_w2: mat(f, h),
                ff_b2: Array2::zeros((1, h)),
            })
            .collect();
        let params = TinyMlmParams {
            tok_emb: mat(v, h),
            pos_emb: mat(s, h),
            layers,
            final_ln_g: Array2::ones((1, h)),
            final_ln_b: Array2::zeros((1, h)),
            head_b: Array2::zeros((1, v)),
        };
        Ok(Self {
            config,
            vocab,
            params,
            frozen: false,
        })
    }

    pub fn config(&self) -> &TinyMlmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn each_param<'a>(&'a self) -> Vec<(String, &'a Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("tok_emb".into(), &self.params.tok_emb),
            ("pos_emb".into(), &self.params.pos_emb),
        ];
        for (i, l) in self.params.layers.iter().enumerate() {
            for (name, t) in [
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("ff_w1", &l.ff_w1),
                ("ff_b1", &l.ff_b1),
                ("ff_w2", &l.ff_w2),
                ("ff_b2", &l.ff_b2),
            ] {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_ln_g".into(), &self.params.final_ln_g));
        out.push(("final_ln_b".into(), &self.params.final_ln_b));
        out.push(("head_b".into(), &self.params.head_b));
        out
    }

    fn each_param_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out: Vec<&mut Array2<f64>> =
            vec![&mut self.params.tok_emb, &mut self.params.pos_emb];
        for l in self.params.layers.iter_mut() {
            out.extend([
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.ff_w1,
                &mut l.ff_b1,
                &mut l.ff_w2,
                &mut l.ff_b2,
            ]);
        }
        out.push(&mut self.params.final_ln_g);
        out.push(&mut self.params.final_ln_b);
        out.push(&mut self.params.head_b);
        out
    }

    /// SHA-256 over every parameter's bytes in declaration order. Used to
    /// prove the backbone stays untouched across prompt tuning.
    pub fn param_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.each_param() {
            hasher.update(name.as_bytes());
            for &v in t.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }

    /// Registers all parameters on `tape`; trainable unless the model is
    /// frozen, in which case they are constants and receive no gradient.
    pub fn register(&self, tape: &mut Tape) -> TinyMlmVars {
        let trainable = !self.frozen;
        let mut reg = |t: &Array2<f64>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .params
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: reg(&l.wq),
                bq: reg(&l.bq),
                wk: reg(&l.wk),
                bk: reg(&l.bk),
                wv: reg(&l.wv),
                bv: reg(&l.bv),
                wo: reg(&l.wo),
                bo: reg(&l.bo),
                ln1_g: reg(&l.ln1_g),
                ln1_b: reg(&l.ln1_b),
                ln2_g: reg(&l.ln2_g),
                ln2_b: reg(&l.ln2_b),
                ff_w1: reg(&l.ff_w1),
                ff_b1: reg(&l.ff_b1),
                ff_w2: reg(&l.ff_w2),
                ff_b2: reg(&l.ff_b2),
            })
            .collect();
        TinyMlmVars {
            tok_emb: reg(&self.params.tok_emb),
            pos_emb: reg(&self.params.pos_emb),
            layers,
            final_ln_g: reg(&self.params.final_ln_g),
            final_ln_b: reg(&self.params.final_ln_b),
            head_b: reg(&self.params.head_b),
        }
    }

    /// Token embeddings for an id sequence as tape nodes (rows of the
    /// embedding table, so gradients reach the table when it is trainable).
    pub fn embed_on_tape(&self, tape: &mut Tape, vars: &TinyMlmVars, ids: &[TokenId]) -> Var {
        tape.gather_rows(vars.tok_emb, ids)
    }

    /// Encoder stack from an embedding sequence to final hidden states
    /// (`seq_len x hidden_dim`). Positional embeddings are added here.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &TinyMlmVars, embeds: Var) -> Result<Var> {
        let seq_len = tape.value(embeds).nrows();
        if seq_len == 0 {
            return Err(Error::Shape("empty sequence".into()));
        }
        if seq_len > self.config.max_seq_len {
            return Err(Error::Shape(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if tape.value(embeds).ncols() != self.config.hidden_dim {
            return Err(Error::Shape("embedding dim mismatch".into()));
        }
        let positions: Vec<usize> = (0..seq_len).collect();
        let pos = tape.gather_rows(vars.pos_emb, &positions);
        let mut x = tape.add(embeds, pos);

        let num_heads = self.config.num_heads;
        let dk = self.config.hidden_dim / num_heads;
        for l in &vars.layers {
            // Attention sublayer, pre-norm.
            let a = tape.layer_norm_rows(x, l.ln1_g, l.ln1_b, LAYER_NORM_EPS);
            let q = tape.matmul(a, l.wq);
            let q = tape.add_row_broadcast(q, l.bq);
            let k = tape.matmul(a, l.wk);
            let k = tape.add_row_broadcast(k, l.bk);
            let v = tape.matmul(a, l.wv);
            let v = tape.add_row_broadcast(v, l.bv);
            let mut heads = Vec::with_capacity(num_heads);
            for hidx in 0..num_heads {
                let (lo, hi) = (hidx * dk, (hidx + 1) * dk);
                let qh = tape.slice_cols(q, lo, hi);
                let kh = tape.slice_cols(k, lo, hi);
                let vh = tape.slice_cols(v, lo, hi);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
                let probs = tape.softmax_rows(scores);
                heads.push(tape.matmul(probs, vh));
            }
            let ctx = tape.concat_cols(&heads);
            let out = tape.matmul(ctx, l.wo);
            let out = tape.add_row_broadcast(out, l.bo);
            x = tape.add(x, out);

            // Feed-forward sublayer, pre-norm.
            let f = tape.layer_norm_rows(x, l.ln2_g, l.ln2_b, LAYER_NORM_EPS);
            let f1 = tape.matmul(f, l.ff_w1);
            let f1 = tape.add_row_broadcast(f1, l.ff_b1);
            let f1 = tape.gelu(f1);
            let f2 = tape.matmul(f1, l.ff_w2);
            let f2 = tape.add_row_broadcast(f2, l.ff_b2);
            x = tape.add(x, f2);
        }
        Ok(tape.layer_norm_rows(x, vars.final_ln_g, vars.final_ln_b, LAYER_NORM_EPS))
    }

    /// MLM-head logits for one hidden row (`1 x hidden` -> `1 x vocab`).
    /// The projection is weight-tied to the input embedding table
    /// (BERT-style), so hidden states score tokens by embedding dot
    /// product plus a per-token bias.
    pub fn head_on_tape(&self, tape: &mut Tape, vars: &TinyMlmVars, hidden_row: Var) -> Var {
        let et = tape.transpose(vars.tok_emb);
        let logits = tape.matmul(hidden_row, et);
        tape.add_row_broadcast(logits, vars.head_b)
    }

    /// Value-level forward: final hidden states for the whole sequence.
    pub fn forward_values(&self, embeds: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut probe = self.clone();
        probe.frozen = true;
        let vars = probe.register(&mut tape);
        let e = tape.constant(embeds.clone());
        let h = probe.forward_on_tape(&mut tape, &vars, e)?;
        Ok(tape.value(h).clone())
    }

    /// Value-level logits at one position of an embedding sequence.
    pub fn logits_at(&self, embeds: &Array2<f64>, position: usize) -> Result<Array1<f64>> {
        let hidden = self.forward_values(embeds)?;
        if position >= hidden.nrows() {
            return Err(Error::Shape(format!("position {position} out of range")));
        }
        self.mlm_head(&hidden.row(position).to_owned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&CheckpointHeader {
            kind: "tiny-mlm".into(),
            config: self.config.clone(),
            vocab: self.vocab.tokens.clone(),
            frozen: self.frozen,
        })?;
        let mut w = TensorFileWriter::create(path, CHECKPOINT_MAGIC, &header)?;
        for (name, t) in self.each_param() {
            w.write_tensor(&name, t)?;
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = TensorFile::read(path, CHECKPOINT_MAGIC)?;
        let header: CheckpointHeader = serde_json::from_str(&file.header_json)?;
        let vocab = Vocab::from_tokens(header.vocab)?;
        let mut model = Self::new(header.config, vocab)?;
        let names: Vec<String> = model.each_param().iter().map(|(n, _)| n.clone()).collect();
        for (name, slot) in names.iter().zip(model.each_param_mut()) {
            let loaded = file.take(name)?;
            if loaded.raw_dim() != slot.raw_dim() {
                return Err(Error::Checkpoint(format!("tensor {name} has wrong shape")));
            }
            *slot = loaded;
        }
        model.frozen = header.frozen;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    config: TinyMlmConfig,
    vocab: Vec<String>,
    frozen: bool,
}

impl MaskedLm for TinyMlm {
    fn handle(&self) -> ModelHandle {
        ModelHandle {
            vocab_size: self.config.vocab_size,
            hidden_dim: self.config.hidden_dim,
            mask_id: self.vocab.mask_id(),
            pad_id: self.vocab.pad_id(),
            frozen: self.frozen,
        }
    }

    fn token_text(&self, id: TokenId) -> Option<&str> {
        self.vocab.token(id)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.vocab.tokenize(text)
    }

    fn embed(&self, ids: &[TokenId]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.config.hidden_dim));
        for (row, &id) in ids.iter().enumerate() {
            if id >= self.config.vocab_size {
                return Err(Error::Model(format!("token id {id} out of range")));
            }
            out.row_mut(row).assign(&self.params.tok_emb.row(id));
        }
        Ok(out)
    }

    fn embedding_table(&self) -> &Array2<f64> {
        &self.params.tok_emb
    }

    fn forward_from_embeddings(
        &self,
        embeds: &Array2<f64>,
        positions: &[usize],
    ) -> Result<BTreeMap<usize, Array1<f64>>> {
        let hidden = self.forward_values(embeds)?;
        let mut out = BTreeMap::new();
        for &p in positions {
            if p >= hidden.nrows() {
                return Err(Error::Shape(format!("position {p} out of range")));
            }
            out.insert(p, hidden.row(p).to_owned());
        }
        Ok(out)
    }

    fn mlm_head(&self, hidden: &Array1<f64>) -> Result<Array1<f64>> {
        if hidden.len() != self.config.hidden_dim {
            return Err(Error::Shape(format!(
                "hidden has {} components, expected {}",
                hidden.len(),
                self.config.hidden_dim
            )));
        }
        let h = hidden.view().insert_axis(Axis(0));
        let logits = h.dot(&self.params.tok_emb.t()) + &self.params.head_b.row(0);
        Ok(logits.remove_axis(Axis(0)))
    }
}

/// Knobs for from-scratch MLM pretraining. These are artifact choices, not
/// published values; defaults are tuned for the bundled synthetic worlds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlmTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub mask_prob: f64,
}

impl Default for MlmTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            holdout_fraction: 0.1,
            mask_prob: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlmTrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub holdout_accuracy: f64,
    pub uniform_baseline: f64,
}

/// Trains the tiny MLM on a sentence corpus with standard 15% masking
/// (80% mask / 10% random / 10% keep) and returns it frozen.
///
/// Deterministic for a fixed `config.seed`: same seed and corpus give a
/// bit-identical model and final loss.
pub fn train_tiny_mlm(
    corpus: &[String],
    vocab: Vocab,
    config: &TinyMlmConfig,
    opts: &MlmTrainOptions,
) -> Result<(TinyMlm, MlmTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Train("empty pretraining corpus".into()));
    }
    let mut model = TinyMlm::new(config.clone(), vocab)?;
    let mut sentences = Vec::with_capacity(corpus.len());
    for (i, s) in corpus.iter().enumerate() {
        let ids = model.vocab.tokenize(s)?;
        if ids.len() > config.max_seq_len {
            return Err(Error::Train(format!(
                "corpus sentence {i} has {} tokens, exceeds max_seq_len {}",
                ids.len(),
                config.max_seq_len
            )));
        }
        sentences.push(ids);
    }

    // Separate streams so data order, masking noise, and holdout choice
    // stay decoupled.
    let mut split_rng = sub_rng(config.seed, 0x11);
    let mut shuffle_rng = sub_rng(config.seed, 0x22);
    let mut mask_rng = sub_rng(config.seed, 0x33);

    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut split_rng);
    let holdout_n = ((sentences.len() as f64 * opts.holdout_fraction).ceil() as usize)
        .min(sentences.len().saturating_sub(1));
    let (holdout_idx, train_idx) = order.split_at(holdout_n);
    // A single-sentence corpus trains and validates on the same sentence.
    let train_idx: Vec<usize> = if train_idx.is_empty() {
        order.clone()
    } else {
        train_idx.to_vec()
    };
    let holdout_idx: Vec<usize> = if holdout_idx.is_empty() {
        train_idx.clone()
    } else {
        holdout_idx.to_vec()
    };

    let mut opt = Adam::new(opts.lr);
    let mut final_loss = f64::NAN;
    for _epoch in 0..opts.epochs {
        let mut epoch_order = train_idx.clone();
        epoch_order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in epoch_order.chunks(opts.batch_size) {
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let mut losses = Vec::new();
            for &si in batch {
                let ids = &sentences[si];
                let (corrupted, targets) =
                    corrupt_for_mlm(ids, config.vocab_size, model.vocab.mask_id(), opts.mask_prob, &mut mask_rng);
                let embeds = model.embed_on_tape(&mut tape, &vars, &corrupted);
                let hidden = model.forward_on_tape(&mut tape, &vars, embeds)?;
                for (pos, gold) in &targets {
                    let row = tape.pick_row(hidden, *pos);
                    let logits = model.head_on_tape(&mut tape, &vars, row);
                    losses.push(tape.cross_entropy_logits(logits, *gold));
                }
            }
            if losses.is_empty() {
                continue;
            }
            let mut total = losses[0];
            for l in &losses[1..] {
                total = tape.add(total, *l);
            }
            let loss = tape.scale(total, 1.0 / losses.len() as f64);
            tape.backward(loss)?;
            epoch_loss += tape.scalar(loss);
            epoch_batches += 1;

            let grads: Vec<Array2<f64>> = collect_var_grads(&tape, &vars);
            let mut params = model.each_param_mut();
            opt.step(&mut params, &grads);
        }
        if epoch_batches > 0 {
            final_loss = epoch_loss / epoch_batches as f64;
        }
    }

    model.frozen = true;
    let holdout_sentences: Vec<&Vec<TokenId>> = holdout_idx.iter().map(|&i| &sentences[i]).collect();
    let holdout_accuracy = masked_prediction_accuracy(&model, &holdout_sentences)?;
    let report = MlmTrainReport {
        epochs_run: opts.epochs,
        final_loss,
        holdout_accuracy,
        uniform_baseline: 1.0 / config.vocab_size as f64,
    };
    Ok((model, report))
}

/// Accuracy of single-position masked prediction over full sentences:
/// every position is masked one at a time and argmax compared to the true
/// token. Deterministic; used for pretraining acceptance.
pub fn masked_prediction_accuracy(model: &TinyMlm, sentences: &[&Vec<TokenId>]) -> Result<f64> {
    let mask_id = model.vocab.mask_id();
    let mut hits = 0usize;
    let mut total = 0usize;
    for ids in sentences {
        for pos in 0..ids.len() {
            let mut masked = (*ids).clone();
            masked[pos] = mask_id;
            let embeds = model.embed(&masked)?;
            let logits = model.logits_at(&embeds, pos)?;
            let argmax = argmax_with_id_ties(logits.as_slice().unwrap());
            if argmax == ids[pos] {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

pub(crate) fn argmax_with_id_ties(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn corrupt_for_mlm(
    ids: &[TokenId],
    vocab_size: usize,
    mask_id: TokenId,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<TokenId>, Vec<(usize, TokenId)>) {
    let mut corrupted = ids.to_vec();
    let mut targets = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        if rng.random::<f64>() < mask_prob {
            targets.push((pos, id));
            let roll = rng.random::<f64>();
            if roll < 0.8 {
                corrupted[pos] = mask_id;
            } else if roll < 0.9 {
                corrupted[pos] = rng.random_range(0..vocab_size);
            }
        }
    }
    if targets.is_empty() {
        // Standard fallback: always predict at least one position.
        let pos = rng.random_range(0..ids.len());
        targets.push((pos, ids[pos]));
        corrupted[pos] = mask_id;
    }
    (corrupted, targets)
}

/// Gradients for every registered parameter, in registration order.
pub fn collect_var_grads(tape: &Tape, vars: &TinyMlmVars) -> Vec<Array2<f64>> {
    let mut out = vec![tape.grad(vars.tok_emb), tape.grad(vars.pos_emb)];
    for l in &vars.layers {
        for v in [
            l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_g, l.ln1_b, l.ln2_g, l.ln2_b,
            l.ff_w1, l.ff_b1, l.ff_w2, l.ff_b2,
        ] {
            out.push(tape.grad(v));
        }
    }
    out.push(tape.grad(vars.final_ln_g));
    out.push(tape.grad(vars.final_ln_b));
    out.push(tape.grad(vars.head_b));
    out
}

pub(crate) fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_rel_error};

    pub(crate) fn toy_vocab() -> Vocab {
        let mut tokens: Vec<String> = [PAD_TOKEN, MASK_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for w in [
            "English", "French", "Pierre", "Messmer", "the", "native", "language", "of", "is",
            ".", "Douglas", "Adams", "speaks", "writes",
        ] {
            tokens.push(w.into());
        }
        Vocab::from_tokens(tokens).unwrap()
    }

    pub(crate) fn toy_model(seed: u64) -> TinyMlm {
        let vocab = toy_vocab();
        let config = TinyMlmConfig {
            vocab_size: vocab.len(),
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 12,
            seed,
        };
        TinyMlm::new(config, vocab).unwrap()
    }

    #[test]
    fn tokenize_empty_errors() {
        let v = toy_vocab();
        assert!(v.tokenize("").is_err());
        assert!(v.tokenize("   ").is_err());
    }

    #[test]
    fn tokenize_single_known_word() {
        let v = toy_vocab();
        let ids = v.tokenize("English").unwrap();
        assert_eq!(ids, vec![v.id("English").unwrap()]);
    }

    #[test]
    fn tokenize_two_word_subject() {
        let v = toy_vocab();
        let ids = v.tokenize("Pierre Messmer").unwrap();
        assert_eq!(ids.len(), 2, "subject-mask count for this subject is 2");
    }

    #[test]
    fn unknown_word_falls_back_to_unk() {
        let v = toy_vocab();
        let ids = v.tokenize("zzz").unwrap();
        assert_eq!(ids, vec![v.id(UNK_TOKEN).unwrap()]);

        let no_unk =
            Vocab::from_tokens(vec![PAD_TOKEN.into(), MASK_TOKEN.into(), "a".into()]).unwrap();
        assert!(no_unk.tokenize("zzz").is_err());
    }

    #[test]
    fn embed_is_pure_lookup() {
        let m = toy_model(0);
        let mask = m.vocab.mask_id();
        let out = m.embed(&[mask, mask]).unwrap();
        assert_eq!(out.row(0), out.row(1));
        assert_eq!(m.embed(&[]).unwrap().nrows(), 0);

        let eng = m.vocab.id("English").unwrap();
        let e = m.embed(&m.tokenize("English").unwrap()).unwrap();
        assert_eq!(e.row(0), m.params.tok_emb.row(eng));

        assert!(m.embed(&[m.config.vocab_size]).is_err());
    }

    #[test]
    fn forward_deterministic_and_covers_positions() {
        let m = toy_model(1);
        let ids = m.tokenize("the native language of Pierre Messmer is [MASK]").unwrap();
        let e = m.embed(&ids).unwrap();
        let all: Vec<usize> = (0..ids.len()).collect();
        let h1 = m.forward_from_embeddings(&e, &all).unwrap();
        let h2 = m.forward_from_embeddings(&e, &all).unwrap();
        assert_eq!(h1.len(), ids.len());
        for p in &all {
            assert_eq!(h1[p], h2[p]);
            assert_eq!(h1[p].len(), m.config.hidden_dim);
        }
        assert!(m.forward_from_embeddings(&e, &[ids.len()]).is_err());
    }

    #[test]
    fn forward_rejects_overlong_sequence() {
        let m = toy_model(1);
        let ids = vec![m.vocab.mask_id(); m.config.max_seq_len + 1];
        let e = m.embed(&ids).unwrap();
        assert!(m.forward_from_embeddings(&e, &[0]).is_err());
    }

    #[test]
    fn mlm_head_zero_hidden_gives_bias() {
        let mut m = toy_model(2);
        m.params.head_b = Array2::from_shape_fn((1, m.config.vocab_size), |(_, j)| j as f64 * 0.1);
        let logits = m.mlm_head(&Array1::zeros(m.config.hidden_dim)).unwrap();
        assert_eq!(logits.len(), m.config.vocab_size);
        for (j, &l) in logits.iter().enumerate() {
            assert!((l - j as f64 * 0.1).abs() < 1e-15);
        }
        assert!(m.mlm_head(&Array1::zeros(3)).is_err());
    }

    #[test]
    fn mlm_head_softmax_sums_to_one() {
        let m = toy_model(3);
        let h = Array1::from_shape_fn(m.config.hidden_dim, |i| (i as f64 * 0.13).sin());
        let logits = m.mlm_head(&h).unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        let total: f64 = logits.iter().map(|&l| (l - max).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_gradients_match_finite_differences() {
        let m = {
            let mut m = toy_model(4);
            m.frozen = true;
            m
        };
        let ids = m.tokenize("the native language of Pierre").unwrap();
        let e0 = m.embed(&ids).unwrap();

        // Scalar probe: MLM loss at the last position through forward + head.
        let loss_of = |e: &Array2<f64>| {
            let mut tape = Tape::new();
            let vars = m.register(&mut tape);
            let ev = tape.constant(e.clone());
            let h = m.forward_on_tape(&mut tape, &vars, ev).unwrap();
            let row = tape.pick_row(h, ids.len() - 1);
            let logits = m.head_on_tape(&mut tape, &vars, row);
            let l = tape.cross_entropy_logits(logits, 5);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let ev = tape.param(e0.clone());
        let h = m.forward_on_tape(&mut tape, &vars, ev).unwrap();
        let row = tape.pick_row(h, ids.len() - 1);
        let logits = m.head_on_tape(&mut tape, &vars, row);
        let l = tape.cross_entropy_logits(logits, 5);
        tape.backward(l).unwrap();
        let analytic = tape.grad(ev);
        let numeric = finite_diff_grad(loss_of, &e0, 1e-5);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn train_single_sentence_memorizes() {
        let vocab = toy_vocab();
        let config = TinyMlmConfig {
            vocab_size: vocab.len(),
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 12,
            seed: 7,
        };
        let corpus: Vec<String> = vec!["the native language of Pierre Messmer is French .".into(); 30];
        let opts = MlmTrainOptions {
            epochs: 40,
            lr: 3e-3,
            ..Default::default()
        };
        let (model, report) = train_tiny_mlm(&corpus, vocab, &config, &opts).unwrap();
        assert!(model.frozen());
        assert!(
            report.holdout_accuracy >= 0.9,
            "holdout accuracy {} below 0.9",
            report.holdout_accuracy
        );
        assert!(report.holdout_accuracy >= 10.0 * report.uniform_baseline);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let corpus: Vec<String> = vec![
            "Pierre Messmer speaks French .".into(),
            "Douglas Adams speaks English .".into(),
            "the native language of Douglas Adams is English .".into(),
        ];
        let config = TinyMlmConfig {
            vocab_size: toy_vocab().len(),
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 12,
            seed: 11,
        };
        let opts = MlmTrainOptions {
            epochs: 3,
            ..Default::default()
        };
        let (m1, r1) = train_tiny_mlm(&corpus, toy_vocab(), &config, &opts).unwrap();
        let (m2, r2) = train_tiny_mlm(&corpus, toy_vocab(), &config, &opts).unwrap();
        assert_eq!(r1.final_loss.to_bits(), r2.final_loss.to_bits());
        assert_eq!(m1.param_checksum(), m2.param_checksum());
    }

    #[test]
    fn overlong_corpus_sentence_errors() {
        let vocab = toy_vocab();
        let config = TinyMlmConfig {
            vocab_size: vocab.len(),
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            max_seq_len: 4,
            seed: 0,
        };
        let corpus = vec!["the native language of Pierre Messmer is French .".to_string()];
        assert!(train_tiny_mlm(&corpus, vocab, &config, &MlmTrainOptions::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = toy_model(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tmlm");
        m.save(&path).unwrap();
        let loaded = TinyMlm::load(&path).unwrap();
        assert_eq!(m.param_checksum(), loaded.param_checksum());
        assert_eq!(m.vocab.tokens(), loaded.vocab.tokens());
        assert_eq!(
            m.tokenize("Pierre Messmer").unwrap(),
            loaded.tokenize("Pierre Messmer").unwrap()
        );
    }

    #[test]
    fn handle_invariants() {
        let m = toy_model(0);
        let h = m.handle();
        h.validate().unwrap();
        let bad = ModelHandle {
            mask_id: h.pad_id,
            ..h
        };
        assert!(bad.validate().is_err());
    }
}
