//! Continuous prompt and its reparameterization network.
//!
//! Raw trainable vectors (one per tunable slot) pass through a bidirectional
//! LSTM followed by a two-layer perceptron, the usual P-tuning encoder. The
//! network output is added residually to the raw vectors with a zero-
//! initialized final layer, so freshly initialized prompts substitute
//! exactly their N(0, 0.02) raw vectors; training then moves both halves.
//!
//! One prompt instance produces both the original and the subject-masked
//! embedding sequences; there are no separate parameters for the masked
//! path.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backend::{MaskedLm, TinyMlmVars};
use crate::templates::RenderedInput;
use crate::tensorio::{TensorFile, TensorFileWriter};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"MCPT";
pub(crate) const RAW_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct LstmDirection {
    w_ih: Array2<f64>, // prompt_dim x 4*lstm_dim
    w_hh: Array2<f64>, // lstm_dim x 4*lstm_dim
    bias: Array2<f64>, // 1 x 4*lstm_dim
}

/// Trainable continuous prompt: raw vectors plus reparameterization state.
#[derive(Debug, Clone)]
pub struct ContinuousPrompt {
    t_slots: usize,
    prompt_dim: usize,
    hidden_dim: usize,
    lstm_dim: usize,
    raw: Array2<f64>, // t_slots x prompt_dim
    fwd: LstmDirection,
    bwd: LstmDirection,
    mlp_w1: Array2<f64>, // 2*lstm_dim x hidden_dim
    mlp_b1: Array2<f64>,
    mlp_w2: Array2<f64>, // hidden_dim x hidden_dim, zero-initialized
    mlp_b2: Array2<f64>,
}

/// Tape handles for one registration of the prompt parameters.
pub struct PromptVars {
    raw: Var,
    fwd: (Var, Var, Var),
    bwd: (Var, Var, Var),
    mlp_w1: Var,
    mlp_b1: Var,
    mlp_w2: Var,
    mlp_b2: Var,
}

impl ContinuousPrompt {
    /// Seed-deterministic initialization for `t_slots` tunable positions.
    ///
    /// `prompt_dim` is tied to the model's hidden dim; LSTM weights use the
    /// usual uniform(-1/sqrt(d), 1/sqrt(d)) recurrent init.
    pub fn init(t_slots: usize, model: &dyn MaskedLm, seed: u64) -> Self {
        let hidden_dim = model.handle().hidden_dim;
        let prompt_dim = hidden_dim;
        let lstm_dim = hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, RAW_INIT_STD).unwrap();
        let raw = Array2::from_shape_fn((t_slots, prompt_dim), |_| normal.sample(&mut rng));
        let bound = 1.0 / (lstm_dim as f64).sqrt();
        let mut uni =
            |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..bound));
        let direction = |uni: &mut dyn FnMut(usize, usize) -> Array2<f64>| LstmDirection {
            w_ih: uni(prompt_dim, 4 * lstm_dim),
            w_hh: uni(lstm_dim, 4 * lstm_dim),
            bias: uni(1, 4 * lstm_dim),
        };
        let fwd = direction(&mut uni);
        let bwd = direction(&mut uni);
        let mlp_w1 = uni(2 * lstm_dim, hidden_dim);
        let mlp_b1 = uni(1, hidden_dim);
        Self {
            t_slots,
            prompt_dim,
            hidden_dim,
            lstm_dim,
            raw,
            fwd,
            bwd,
            mlp_w1,
            mlp_b1,
            mlp_w2: Array2::zeros((hidden_dim, hidden_dim)),
            mlp_b2: Array2::zeros((1, hidden_dim)),
        }
    }

    pub fn t_slots(&self) -> usize {
        self.t_slots
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn all_finite(&self) -> bool {
        self.each_param()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn each_param(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![
            ("raw", &self.raw),
            ("fwd.w_ih", &self.fwd.w_ih),
            ("fwd.w_hh", &self.fwd.w_hh),
            ("fwd.bias", &self.fwd.bias),
            ("bwd.w_ih", &self.bwd.w_ih),
            ("bwd.w_hh", &self.bwd.w_hh),
            ("bwd.bias", &self.bwd.bias),
            ("mlp_w1", &self.mlp_w1),
            ("mlp_b1", &self.mlp_b1),
            ("mlp_w2", &self.mlp_w2),
            ("mlp_b2", &self.mlp_b2),
        ]
    }

    pub(crate) fn each_param_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![
            &mut self.raw,
            &mut self.fwd.w_ih,
            &mut self.fwd.w_hh,
            &mut self.fwd.bias,
            &mut self.bwd.w_ih,
            &mut self.bwd.w_hh,
            &mut self.bwd.bias,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.each_param().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> PromptVars {
        PromptVars {
            raw: tape.param(self.raw.clone()),
            fwd: (
                tape.param(self.fwd.w_ih.clone()),
                tape.param(self.fwd.w_hh.clone()),
                tape.param(self.fwd.bias.clone()),
            ),
            bwd: (
                tape.param(self.bwd.w_ih.clone()),
                tape.param(self.bwd.w_hh.clone()),
                tape.param(self.bwd.bias.clone()),
            ),
            mlp_w1: tape.param(self.mlp_w1.clone()),
            mlp_b1: tape.param(self.mlp_b1.clone()),
            mlp_w2: tape.param(self.mlp_w2.clone()),
            mlp_b2: tape.param(self.mlp_b2.clone()),
        }
    }

    pub fn grads(&self, tape: &Tape, vars: &PromptVars) -> Vec<Array2<f64>> {
        vec![
            tape.grad(vars.raw),
            tape.grad(vars.fwd.0),
            tape.grad(vars.fwd.1),
            tape.grad(vars.fwd.2),
            tape.grad(vars.bwd.0),
            tape.grad(vars.bwd.1),
            tape.grad(vars.bwd.2),
            tape.grad(vars.mlp_w1),
            tape.grad(vars.mlp_b1),
            tape.grad(vars.mlp_w2),
            tape.grad(vars.mlp_b2),
        ]
    }

    fn lstm_direction_on_tape(
        &self,
        tape: &mut Tape,
        raw: Var,
        dir: (Var, Var, Var),
        reversed: bool,
    ) -> Vec<Var> {
        let (w_ih, w_hh, bias) = dir;
        let t = self.t_slots;
        let mut h = tape.constant(Array2::zeros((1, self.lstm_dim)));
        let mut c = tape.constant(Array2::zeros((1, self.lstm_dim)));
        let order: Vec<usize> = if reversed {
            (0..t).rev().collect()
        } else {
            (0..t).collect()
        };
        let mut states = vec![h; t];
        let d = self.lstm_dim;
        for step in order {
            let x = tape.pick_row(raw, step);
            let xg = tape.matmul(x, w_ih);
            let hg = tape.matmul(h, w_hh);
            let gates = tape.add(xg, hg);
            let gates = tape.add_row_broadcast(gates, bias);
            let i_g = tape.slice_cols(gates, 0, d);
            let i_g = tape.sigmoid(i_g);
            let f_g = tape.slice_cols(gates, d, 2 * d);
            let f_g = tape.sigmoid(f_g);
            let g_g = tape.slice_cols(gates, 2 * d, 3 * d);
            let g_g = tape.tanh(g_g);
            let o_g = tape.slice_cols(gates, 3 * d, 4 * d);
            let o_g = tape.sigmoid(o_g);
            let fc = tape.mul(f_g, c);
            let ig = tape.mul(i_g, g_g);
            c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            h = tape.mul(o_g, tc);
            states[step] = h;
        }
        states
    }

    /// Reparameterized prompt embeddings (`t_slots x hidden_dim`) as a tape
    /// node: raw + MLP(BiLSTM(raw)).
    pub fn encode_slots_on_tape(&self, tape: &mut Tape, vars: &PromptVars) -> Var {
        if self.t_slots == 0 {
            return tape.constant(Array2::zeros((0, self.hidden_dim)));
        }
        let fwd = self.lstm_direction_on_tape(tape, vars.raw, vars.fwd, false);
        let bwd = self.lstm_direction_on_tape(tape, vars.raw, vars.bwd, true);
        let rows: Vec<Var> = fwd
            .into_iter()
            .zip(bwd)
            .map(|(f, b)| tape.concat_cols(&[f, b]))
            .collect();
        let seq = tape.concat_rows(&rows);
        let z = tape.matmul(seq, vars.mlp_w1);
        let z = tape.add_row_broadcast(z, vars.mlp_b1);
        let z = tape.relu(z);
        let z = tape.matmul(z, vars.mlp_w2);
        let z = tape.add_row_broadcast(z, vars.mlp_b2);
        tape.add(vars.raw, z)
    }

    /// Assembles the full input embedding sequence for a rendered input:
    /// table rows for ordinary positions, reparameterized prompt vectors at
    /// tunable positions. Gradient flows only into the prompt parameters;
    /// the model's embedding rows enter through its own (frozen or not)
    /// registration.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &PromptVars,
        model_vars: &TinyMlmVars,
        rendered: &RenderedInput,
    ) -> Result<Var> {
        let slots = self.encode_slots_on_tape(tape, vars);
        self.assemble_on_tape(tape, slots, model_vars, rendered)
    }

    /// Assembly step alone, for callers that reuse one `encode_slots_on_tape`
    /// node across several rendered inputs (a training batch).
    pub fn assemble_on_tape(
        &self,
        tape: &mut Tape,
        slots: Var,
        model_vars: &TinyMlmVars,
        rendered: &RenderedInput,
    ) -> Result<Var> {
        self.check_slot_count(rendered)?;
        let tok_rows = model_vars.embed_rows(tape, &rendered.ids);
        let mut rows: Vec<Var> = Vec::with_capacity(rendered.len());
        for (pos, tag) in rendered.tags.iter().enumerate() {
            match tag {
                crate::templates::PosTag::Tunable(k) => rows.push(tape.pick_row(slots, *k)),
                _ => rows.push(tape.pick_row(tok_rows, pos)),
            }
        }
        Ok(tape.concat_rows(&rows))
    }

    /// Value-level variant of [`ContinuousPrompt::encode_on_tape`].
    pub fn encode(&self, rendered: &RenderedInput, model: &dyn MaskedLm) -> Result<Array2<f64>> {
        self.check_slot_count(rendered)?;
        let slots = self.encode_slots();
        let mut out = model.embed(&rendered.ids)?;
        for (pos, k) in rendered.tunable_positions() {
            out.row_mut(pos).assign(&slots.row(k));
        }
        Ok(out)
    }

    /// Value-level reparameterized slot embeddings.
    pub fn encode_slots(&self) -> Array2<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let out = self.encode_slots_on_tape(&mut tape, &vars);
        tape.value(out).clone()
    }

    fn check_slot_count(&self, rendered: &RenderedInput) -> Result<()> {
        let found = rendered.tunable_count();
        if found != self.t_slots {
            return Err(Error::Shape(format!(
                "rendered input has {found} tunable slots but prompt owns {}",
                self.t_slots
            )));
        }
        Ok(())
    }

    pub fn write_into(&self, w: &mut TensorFileWriter) -> Result<()> {
        for (name, t) in self.each_param() {
            w.write_tensor(&format!("prompt.{name}"), t)?;
        }
        Ok(())
    }

    pub fn read_from(file: &mut TensorFile, header: &PromptHeader) -> Result<Self> {
        let raw = file.take("prompt.raw")?;
        if raw.nrows() != header.t_slots || raw.ncols() != header.prompt_dim {
            return Err(Error::Checkpoint("prompt tensor shape mismatch".into()));
        }
        Ok(Self {
            t_slots: header.t_slots,
            prompt_dim: header.prompt_dim,
            hidden_dim: header.hidden_dim,
            lstm_dim: header.lstm_dim,
            raw,
            fwd: LstmDirection {
                w_ih: file.take("prompt.fwd.w_ih")?,
                w_hh: file.take("prompt.fwd.w_hh")?,
                bias: file.take("prompt.fwd.bias")?,
            },
            bwd: LstmDirection {
                w_ih: file.take("prompt.bwd.w_ih")?,
                w_hh: file.take("prompt.bwd.w_hh")?,
                bias: file.take("prompt.bwd.bias")?,
            },
            mlp_w1: file.take("prompt.mlp_w1")?,
            mlp_b1: file.take("prompt.mlp_b1")?,
            mlp_w2: file.take("prompt.mlp_w2")?,
            mlp_b2: file.take("prompt.mlp_b2")?,
        })
    }

    pub fn header(&self) -> PromptHeader {
        PromptHeader {
            t_slots: self.t_slots,
            prompt_dim: self.prompt_dim,
            hidden_dim: self.hidden_dim,
            lstm_dim: self.lstm_dim,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_string(&self.header())?;
        let mut w = TensorFileWriter::create(path, CHECKPOINT_MAGIC, &header)?;
        self.write_into(&mut w)?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = TensorFile::read(path, CHECKPOINT_MAGIC)?;
        let header: PromptHeader = serde_json::from_str(&file.header_json)?;
        Self::read_from(&mut file, &header)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptHeader {
    pub t_slots: usize,
    pub prompt_dim: usize,
    pub hidden_dim: usize,
    pub lstm_dim: usize,
}
