//! Small neural components: gated recurrent encoder/decoder, the adversary,
//! and stand-in networks for program nonterminals.
//!
//! Every component owns one [`Parameters`] collection; forward passes take
//! the tape plus the component's lifted values, so concurrent read-only
//! forwards are safe and all training flows through one backward call.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Trajectory;
use crate::dsl::{NodeId, ProgramType};
use crate::grad::{Shape, Tape, Value};
use crate::num::Real;
use crate::params::{ParamId, Parameters};

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint array `{name}`: shape {got:?} does not match {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("checkpoint is missing array `{0}`")]
    MissingArray(String),
}

const LN_2PI: f64 = 1.8378770664093453; // ln(2*pi)
const LOGVAR_CLAMP: f64 = 6.0;

/// Gated recurrent cell (single-layer GRU).
#[derive(Debug, Clone)]
pub struct Gru {
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_update: ParamId,
    b_update: ParamId,
    w_reset: ParamId,
    b_reset: ParamId,
    w_cand: ParamId,
    b_cand: ParamId,
}

impl Gru {
    pub fn new<F: Real, R: Rng + ?Sized>(
        params: &mut Parameters<F>,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = input_dim + hidden_dim;
        let bound = F::one() / F::of(fan_in as f64).sqrt();
        let mat = Shape::matrix(hidden_dim, fan_in);
        let vecshape = Shape::vector(hidden_dim);
        Gru {
            input_dim,
            hidden_dim,
            w_update: params.push_uniform(&format!("{prefix}.w_update"), mat, bound, rng),
            b_update: params.push_zeros(&format!("{prefix}.b_update"), vecshape),
            w_reset: params.push_uniform(&format!("{prefix}.w_reset"), mat, bound, rng),
            b_reset: params.push_zeros(&format!("{prefix}.b_reset"), vecshape),
            w_cand: params.push_uniform(&format!("{prefix}.w_cand"), mat, bound, rng),
            b_cand: params.push_zeros(&format!("{prefix}.b_cand"), vecshape),
        }
    }

    pub fn initial_state<F: Real>(&self, tape: &mut Tape<F>) -> Value {
        let zeros = vec![F::zero(); self.hidden_dim];
        tape.leaf(&zeros, Shape::vector(self.hidden_dim))
    }

    pub fn step<F: Real>(&self, tape: &mut Tape<F>, lifted: &[Value], x: Value, h: Value) -> Value {
        let cat = tape.concat(&[x, h]);
        let z = affine(tape, lifted[self.w_update.0], lifted[self.b_update.0], cat);
        let z = tape.sigmoid(z);
        let r = affine(tape, lifted[self.w_reset.0], lifted[self.b_reset.0], cat);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let cat2 = tape.concat(&[x, rh]);
        let c = affine(tape, lifted[self.w_cand.0], lifted[self.b_cand.0], cat2);
        let c = tape.tanh(c);
        // h' = (1 - z) * h + z * c
        let nz = tape.neg(z);
        let omz = tape.add_const(nz, F::one());
        let keep = tape.mul(omz, h);
        let new = tape.mul(z, c);
        tape.add(keep, new)
    }
}

fn affine<F: Real>(tape: &mut Tape<F>, w: Value, b: Value, x: Value) -> Value {
    let wx = tape.matmul(w, x);
    tape.add(wx, b)
}

fn linear_layer<F: Real, R: Rng + ?Sized>(
    params: &mut Parameters<F>,
    prefix: &str,
    out_dim: usize,
    in_dim: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let bound = F::one() / F::of(in_dim as f64).sqrt();
    let w = params.push_uniform(&format!("{prefix}.w"), Shape::matrix(out_dim, in_dim), bound, rng);
    let b = params.push_zeros(&format!("{prefix}.b"), Shape::vector(out_dim));
    (w, b)
}

/// Recurrent encoder producing the Gaussian posterior over the neural latent.
#[derive(Debug, Clone)]
pub struct RecurrentEncoder<F> {
    pub params: Parameters<F>,
    pub input_dim: usize,
    pub z_dim: usize,
    gru: Gru,
    head_w: ParamId,
    head_b: ParamId,
    mu_w: ParamId,
    mu_b: ParamId,
    logvar_w: ParamId,
    logvar_b: ParamId,
}

impl<F: Real> RecurrentEncoder<F> {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        rnn_dim: usize,
        h_dim: usize,
        z_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = Parameters::new();
        let gru = Gru::new(&mut params, "gru", input_dim, rnn_dim, rng);
        let (head_w, head_b) = linear_layer(&mut params, "head", h_dim, rnn_dim, rng);
        let (mu_w, mu_b) = linear_layer(&mut params, "mu", z_dim, h_dim, rng);
        let (logvar_w, logvar_b) = linear_layer(&mut params, "logvar", z_dim, h_dim, rng);
        RecurrentEncoder {
            params,
            input_dim,
            z_dim,
            gru,
            head_w,
            head_b,
            mu_w,
            mu_b,
            logvar_w,
            logvar_b,
        }
    }

    /// Tape-level forward over already-lifted frames (model channels only).
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        lifted: &[Value],
        frames: &[Value],
    ) -> (Value, Value) {
        let mut h = self.gru.initial_state(tape);
        for &x in frames {
            h = self.gru.step(tape, lifted, x, h);
        }
        let head = affine(tape, lifted[self.head_w.0], lifted[self.head_b.0], h);
        let head = tape.tanh(head);
        let mu = affine(tape, lifted[self.mu_w.0], lifted[self.mu_b.0], head);
        let logvar = affine(tape, lifted[self.logvar_w.0], lifted[self.logvar_b.0], head);
        (mu, logvar)
    }

    /// Posterior parameters for one trajectory (inference convenience).
    pub fn encode(&self, x: &Trajectory<F>, full_dim: usize) -> (Vec<F>, Vec<F>) {
        let mut tape = Tape::new();
        let lifted = self.params.lift(&mut tape);
        let frames = lift_model_frames(&mut tape, x, full_dim, self.input_dim);
        let (mu, lv) = self.forward(&mut tape, &lifted, &frames);
        (tape.value(mu).to_vec(), tape.value(lv).to_vec())
    }
}

/// Put the first `model_dim` channels of every frame on the tape.
pub fn lift_model_frames<F: Real>(
    tape: &mut Tape<F>,
    x: &Trajectory<F>,
    full_dim: usize,
    model_dim: usize,
) -> Vec<Value> {
    let t_len = x.features.len() / full_dim;
    (0..t_len)
        .map(|t| tape.leaf(&x.frame(t, full_dim)[..model_dim], Shape::vector(model_dim)))
        .collect()
}

/// Recurrent decoder: autoregressive diagonal Gaussian over frames,
/// conditioned on the latent code at every step and through the initial
/// hidden state.
#[derive(Debug, Clone)]
pub struct RecurrentDecoder<F> {
    pub params: Parameters<F>,
    pub frame_dim: usize,
    pub z_total: usize,
    init_w: ParamId,
    init_b: ParamId,
    gru: Gru,
    head_w: ParamId,
    head_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl<F: Real> RecurrentDecoder<F> {
    pub fn new<R: Rng + ?Sized>(
        frame_dim: usize,
        z_total: usize,
        rnn_dim: usize,
        h_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = Parameters::new();
        let (init_w, init_b) = linear_layer(&mut params, "init", rnn_dim, z_total, rng);
        let gru = Gru::new(&mut params, "gru", frame_dim + z_total, rnn_dim, rng);
        let (head_w, head_b) = linear_layer(&mut params, "head", h_dim, rnn_dim, rng);
        let (out_w, out_b) = linear_layer(&mut params, "out", 2 * frame_dim, h_dim, rng);
        RecurrentDecoder {
            params,
            frame_dim,
            z_total,
            init_w,
            init_b,
            gru,
            head_w,
            head_b,
            out_w,
            out_b,
        }
    }

    /// Per-step predicted `(mean, logvar)` under teacher forcing: the input
    /// at step t is the true frame t-1 (zeros at t = 0) concatenated with z.
    pub fn step_distributions(
        &self,
        tape: &mut Tape<F>,
        lifted: &[Value],
        target_frames: &[Value],
        z: Value,
    ) -> Vec<(Value, Value)> {
        let mut h = affine(tape, lifted[self.init_w.0], lifted[self.init_b.0], z);
        let zeros = vec![F::zero(); self.frame_dim];
        let mut prev = tape.leaf(&zeros, Shape::vector(self.frame_dim));
        let clamp = F::of(LOGVAR_CLAMP);
        let mut out = Vec::with_capacity(target_frames.len());
        for &frame in target_frames {
            let input = tape.concat(&[prev, z]);
            h = self.gru.step(tape, lifted, input, h);
            let head = affine(tape, lifted[self.head_w.0], lifted[self.head_b.0], h);
            let head = tape.tanh(head);
            let stats = affine(tape, lifted[self.out_w.0], lifted[self.out_b.0], head);
            let mu = tape.slice(stats, 0, self.frame_dim);
            let logvar_raw = tape.slice(stats, self.frame_dim, self.frame_dim);
            let logvar = tape.clamp(logvar_raw, -clamp, clamp);
            out.push((mu, logvar));
            prev = frame;
        }
        out
    }

    /// Sum over timesteps of the diagonal-Gaussian log-density of each frame.
    pub fn decode_loglik(
        &self,
        tape: &mut Tape<F>,
        lifted: &[Value],
        target_frames: &[Value],
        z: Value,
    ) -> Value {
        let stats = self.step_distributions(tape, lifted, target_frames, z);
        let mut total: Option<Value> = None;
        for (&frame, (mu, logvar)) in target_frames.iter().zip(stats) {
            let ll = gaussian_loglik(tape, frame, mu, logvar);
            total = Some(match total {
                Some(acc) => tape.add(acc, ll),
                None => ll,
            });
        }
        total.expect("at least one timestep")
    }
}

/// `sum_d log N(x_d; mu_d, exp(logvar_d))` for one frame.
pub fn gaussian_loglik<F: Real>(tape: &mut Tape<F>, x: Value, mu: Value, logvar: Value) -> Value {
    let diff = tape.sub(x, mu);
    let sq = tape.mul(diff, diff);
    let neg_lv = tape.neg(logvar);
    let precision = tape.exp(neg_lv);
    let quad = tape.mul(sq, precision);
    let with_lv = tape.add(quad, logvar);
    let inner = tape.add_const(with_lv, F::of(LN_2PI));
    let s = tape.sum(inner);
    tape.scale(s, F::of(-0.5))
}

/// Feed-forward adversary mapping the neural latent to per-bit probabilities.
#[derive(Debug, Clone)]
pub struct Adversary<F> {
    pub params: Parameters<F>,
    pub z_dim: usize,
    pub k_bits: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl<F: Real> Adversary<F> {
    pub fn new<R: Rng + ?Sized>(z_dim: usize, adv_dim: usize, k_bits: usize, rng: &mut R) -> Self {
        let mut params = Parameters::new();
        let (w1, b1) = linear_layer(&mut params, "l1", adv_dim, z_dim, rng);
        let (w2, b2) = linear_layer(&mut params, "l2", k_bits, adv_dim, rng);
        Adversary {
            params,
            z_dim,
            k_bits,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn forward(&self, tape: &mut Tape<F>, lifted: &[Value], z: Value) -> Value {
        let h = affine(tape, lifted[self.w1.0], lifted[self.b1.0], z);
        let h = tape.tanh(h);
        let logits = affine(tape, lifted[self.w2.0], lifted[self.b2.0], h);
        tape.sigmoid(logits)
    }

    /// Bit probabilities for one latent vector.
    pub fn predict(&self, z_neural: &[F]) -> Vec<F> {
        let mut tape = Tape::new();
        let lifted = self.params.lift(&mut tape);
        let z = tape.leaf(z_neural, Shape::vector(z_neural.len()));
        let p = self.forward(&mut tape, &lifted, z);
        tape.value(p).to_vec()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct StandinConfig {
    pub rnn_dim: usize,
    pub hidden_dim: usize,
}

impl Default for StandinConfig {
    fn default() -> Self {
        StandinConfig {
            rnn_dim: 16,
            hidden_dim: 16,
        }
    }
}

/// Trainable network filling in for one nonterminal hole.
#[derive(Debug, Clone)]
pub enum Standin<F> {
    /// Recurrent net for sequence-to-scalar holes.
    Seq {
        params: Parameters<F>,
        gru: Gru,
        out_w: ParamId,
        out_b: ParamId,
    },
    /// One-hidden-layer feed-forward net for timestep-to-scalar holes;
    /// position independent by construction.
    Frame {
        params: Parameters<F>,
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

pub fn make_standin<F: Real, R: Rng + ?Sized>(
    signature: ProgramType,
    input_dim: usize,
    cfg: &StandinConfig,
    rng: &mut R,
) -> Standin<F> {
    match signature {
        ProgramType::SeqToScalar => {
            let mut params = Parameters::new();
            let gru = Gru::new(&mut params, "gru", input_dim, cfg.rnn_dim, rng);
            let (out_w, out_b) = linear_layer(&mut params, "out", 1, cfg.rnn_dim, rng);
            Standin::Seq {
                params,
                gru,
                out_w,
                out_b,
            }
        }
        ProgramType::FrameToScalar => {
            let mut params = Parameters::new();
            let (w1, b1) = linear_layer(&mut params, "l1", cfg.hidden_dim, input_dim, rng);
            let (w2, b2) = linear_layer(&mut params, "l2", 1, cfg.hidden_dim, rng);
            Standin::Frame {
                params,
                w1,
                b1,
                w2,
                b2,
            }
        }
    }
}

impl<F: Real> Standin<F> {
    pub fn params(&self) -> &Parameters<F> {
        match self {
            Standin::Seq { params, .. } | Standin::Frame { params, .. } => params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Parameters<F> {
        match self {
            Standin::Seq { params, .. } | Standin::Frame { params, .. } => params,
        }
    }

    pub fn signature(&self) -> ProgramType {
        match self {
            Standin::Seq { .. } => ProgramType::SeqToScalar,
            Standin::Frame { .. } => ProgramType::FrameToScalar,
        }
    }

    /// Scalar output over a whole trajectory (sequence signature only).
    pub fn forward_seq(&self, tape: &mut Tape<F>, lifted: &[Value], frames: &[Value]) -> Value {
        match self {
            Standin::Seq {
                gru, out_w, out_b, ..
            } => {
                let mut h = gru.initial_state(tape);
                for &x in frames {
                    h = gru.step(tape, lifted, x, h);
                }
                let out = affine(tape, lifted[out_w.0], lifted[out_b.0], h);
                tape.sum(out)
            }
            Standin::Frame { .. } => panic!("frame stand-in evaluated at sequence scope"),
        }
    }

    /// Scalar output for one frame (timestep signature only).
    pub fn forward_frame(&self, tape: &mut Tape<F>, lifted: &[Value], frame: Value) -> Value {
        match self {
            Standin::Frame { w1, b1, w2, b2, .. } => {
                let h = affine(tape, lifted[w1.0], lifted[b1.0], frame);
                let h = tape.tanh(h);
                let out = affine(tape, lifted[w2.0], lifted[b2.0], h);
                tape.sum(out)
            }
            Standin::Seq { .. } => panic!("sequence stand-in evaluated at frame scope"),
        }
    }
}

/// Stand-ins keyed by the nonterminal nodes of one architecture.
#[derive(Debug, Clone, Default)]
pub struct StandinSet<F> {
    map: BTreeMap<NodeId, Standin<F>>,
}

impl<F: Real> StandinSet<F> {
    pub fn empty() -> Self {
        StandinSet {
            map: BTreeMap::new(),
        }
    }

    /// Fresh stand-ins for every nonterminal of the architecture.
    pub fn for_architecture<R: Rng + ?Sized>(
        arch: &crate::dsl::Architecture,
        input_dim: usize,
        cfg: &StandinConfig,
        rng: &mut R,
    ) -> Self {
        let mut map = BTreeMap::new();
        for (id, ty) in arch.nonterminal_nodes() {
            map.insert(id, make_standin(ty, input_dim, cfg, rng));
        }
        StandinSet { map }
    }

    pub fn get(&self, id: NodeId) -> Option<&Standin<F>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Standin<F>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&NodeId, &mut Standin<F>)> {
        self.map.iter_mut()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointArray {
    shape: (usize, usize),
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    arrays: BTreeMap<String, CheckpointArray>,
}

const CHECKPOINT_FORMAT: &str = "nsenc-ckpt";

/// Write named parameter sections as versioned JSON
/// (`{section}.{array}` -> shape + f64 data).
pub fn save_checkpoint<F: Real>(
    path: &Path,
    sections: &[(&str, &Parameters<F>)],
) -> Result<(), NetsError> {
    let mut arrays = BTreeMap::new();
    for (section, params) in sections {
        for a in params.iter() {
            arrays.insert(
                format!("{section}.{}", a.name),
                CheckpointArray {
                    shape: (a.shape.rows, a.shape.cols),
                    data: a.data.iter().map(|x| x.as_f64()).collect(),
                },
            );
        }
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: 1,
        arrays,
    };
    let json = serde_json::to_string(&file).expect("serializable checkpoint");
    std::fs::write(path, json).map_err(|source| NetsError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a checkpoint into existing parameter sections; shapes must match.
pub fn load_checkpoint<F: Real>(
    path: &Path,
    sections: &mut [(&str, &mut Parameters<F>)],
) -> Result<(), NetsError> {
    let text = std::fs::read_to_string(path).map_err(|source| NetsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| NetsError::Format(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(NetsError::Format(format!(
            "unexpected format `{}`",
            file.format
        )));
    }
    if file.version != 1 {
        return Err(NetsError::Format(format!(
            "unsupported version {}",
            file.version
        )));
    }
    for (section, params) in sections.iter_mut() {
        for a in params.iter_mut() {
            let key = format!("{section}.{}", a.name);
            let stored = file
                .arrays
                .get(&key)
                .ok_or_else(|| NetsError::MissingArray(key.clone()))?;
            if stored.shape != (a.shape.rows, a.shape.cols) {
                return Err(NetsError::ShapeMismatch {
                    name: key,
                    expected: (a.shape.rows, a.shape.cols),
                    got: stored.shape,
                });
            }
            a.data = stored.data.iter().map(|&x| F::of(x)).collect();
        }
    }
    Ok(())
}
