//! Score network: sinusoidal time embedding + MLP, hand-derived gradients.
//!
//! The architecture is frozen: the input vector is concatenated with a
//! sinusoidal embedding of the diffusion time, pushed through three hidden
//! layers of width 128, and projected back to the input dimension.  Because
//! the architecture never changes, reverse-mode gradients are written by
//! hand ([`train::loss_and_grad`]) instead of pulling in an autodiff
//! framework, and the parameter vector is a single flat `Vec<f64>` that
//! optimizers and checkpoints treat as opaque.

pub mod kernels;
pub mod train;

pub use train::{
    loss_and_grad, train, Adam, BinRow, IterationRow, TrainBatch, TrainConfig, TrainResult,
    N_BINS,
};

use crate::error::Error;
use crate::Result;
use rand::Rng;

/// Width of each hidden layer.
pub const HIDDEN_WIDTH: usize = 128;
/// Number of hidden layers.
pub const HIDDEN_LAYERS: usize = 3;
/// Default time-embedding dimension.
pub const DEFAULT_EMBED_DIM: usize = 128;

/// Base angular frequency of the embedding ladder (resolves the full
/// interval [0, 1] into a quarter period).
const OMEGA_BASE: f64 = std::f64::consts::FRAC_PI_2;
/// Ratio between the largest and smallest embedding frequency.
const OMEGA_SPAN: f64 = 1.0e4;

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Tanh-approximation GELU: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
    Gelu,
    /// max(0, x).
    Relu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Invalid {
                what: "activation",
                reasons: vec![format!("unknown activation '{other}' (gelu, relu)")],
            }),
        }
    }

    pub(crate) fn id(&self) -> u32 {
        match self {
            Activation::Gelu => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Activation::Gelu),
            1 => Ok(Activation::Relu),
            other => Err(Error::Checkpoint(format!(
                "unknown activation id {other} in checkpoint"
            ))),
        }
    }

    /// Value and derivative in one pass (the derivative reuses the tanh).
    #[inline]
    pub(crate) fn value_deriv(&self, x: f64) -> (f64, f64) {
        match self {
            Activation::Gelu => {
                const C: f64 = 0.7978845608028654; // √(2/π)
                const A: f64 = 0.044715;
                let u = C * (x + A * x * x * x);
                let th = u.tanh();
                let half_one_plus = 0.5 * (1.0 + th);
                let sech2 = 1.0 - th * th;
                let du = C * (1.0 + 3.0 * A * x * x);
                (x * half_one_plus, half_one_plus + 0.5 * x * sech2 * du)
            }
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
        }
    }
}

/// Sinusoidal time embedding.
///
/// For H = embed_dim/2 frequencies, the ladder is geometric from ω₁ = π/2
/// to ω_H = (π/2)·10⁴:
///
/// ```text
/// ω_k = (π/2) · 10000^{(k−1)/(H−1)},   k = 1..H        (ω₁ = π/2 if H = 1)
/// emb(t) = [sin(ω₁t), cos(ω₁t), sin(ω₂t), cos(ω₂t), …]
/// ```
///
/// The base frequency maps [0, 1] onto a quarter circle, so the first
/// (sin, cos) pair alone is injective in t and any two distinct times are
/// separated in embedding space; the upper frequencies resolve time
/// differences down to ~10⁻⁴.  Each pair contributes sin² + cos² = 1, so
/// ‖emb(t)‖² = embed_dim/2 identically.
pub fn time_embedding(t: f64, embed_dim: usize) -> Result<Vec<f64>> {
    if embed_dim == 0 || embed_dim % 2 != 0 {
        return Err(Error::Invalid {
            what: "time embedding",
            reasons: vec![format!(
                "embed_dim must be a positive even number, got {embed_dim}"
            )],
        });
    }
    let mut out = vec![0.0; embed_dim];
    embed_into(t, &mut out);
    Ok(out)
}

/// Hot-loop embedding writer; `out.len()` must be even and nonzero.
#[inline]
pub(crate) fn embed_into(t: f64, out: &mut [f64]) {
    debug_assert!(!out.is_empty() && out.len() % 2 == 0);
    debug_assert!((0.0..=1.0).contains(&t), "time {t} outside [0, 1]");
    let h = out.len() / 2;
    // The geometric ladder is generated iteratively (one exp per call, one
    // multiply per frequency); this is the fixed definition of the ladder.
    let ratio = if h > 1 {
        (OMEGA_SPAN.ln() / (h - 1) as f64).exp()
    } else {
        1.0
    };
    let mut omega = OMEGA_BASE;
    for k in 0..h {
        let (s, c) = (omega * t).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
        omega *= ratio;
    }
}

/// Per-layer slice boundaries inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerLayout {
    pub w_off: usize,
    pub b_off: usize,
    pub rows: usize,
    pub cols: usize,
}

/// The score network s_θ(x, t).
///
/// Parameters live in one flat vector ordered layer by layer, each layer as
/// row-major weights followed by biases.  The output layer is linear.
#[derive(Debug, Clone)]
pub struct ScoreModel {
    input_dim: usize,
    embed_dim: usize,
    activation: Activation,
    params: Vec<f64>,
}

impl ScoreModel {
    /// Zero-initialized model; call [`ScoreModel::init_he`] for training.
    pub fn new(input_dim: usize, embed_dim: usize, activation: Activation) -> Result<Self> {
        let mut reasons = Vec::new();
        if input_dim == 0 {
            reasons.push("input_dim must be at least 1".to_string());
        }
        if embed_dim == 0 || embed_dim % 2 != 0 {
            reasons.push(format!(
                "embed_dim must be a positive even number, got {embed_dim}"
            ));
        }
        if !reasons.is_empty() {
            return Err(Error::Invalid {
                what: "score model",
                reasons,
            });
        }
        let count = Self::layout_for(input_dim, embed_dim)
            .iter()
            .map(|l| l.rows * l.cols + l.rows)
            .sum();
        Ok(Self {
            input_dim,
            embed_dim,
            activation,
            params: vec![0.0; count],
        })
    }

    /// Default architecture for a given data dimension: 128-dim embedding,
    /// GELU hidden layers.
    pub fn with_defaults(input_dim: usize) -> Result<Self> {
        Self::new(input_dim, DEFAULT_EMBED_DIM, Activation::Gelu)
    }

    fn layout_for(input_dim: usize, embed_dim: usize) -> [LayerLayout; HIDDEN_LAYERS + 1] {
        let dims_in = [
            input_dim + embed_dim,
            HIDDEN_WIDTH,
            HIDDEN_WIDTH,
            HIDDEN_WIDTH,
        ];
        let dims_out = [HIDDEN_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH, input_dim];
        let mut layers = [LayerLayout {
            w_off: 0,
            b_off: 0,
            rows: 0,
            cols: 0,
        }; HIDDEN_LAYERS + 1];
        let mut off = 0;
        for i in 0..=HIDDEN_LAYERS {
            let (rows, cols) = (dims_out[i], dims_in[i]);
            layers[i] = LayerLayout {
                w_off: off,
                b_off: off + rows * cols,
                rows,
                cols,
            };
            off += rows * cols + rows;
        }
        layers
    }

    pub(crate) fn layout(&self) -> [LayerLayout; HIDDEN_LAYERS + 1] {
        Self::layout_for(self.input_dim, self.embed_dim)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// He-style fan-in uniform initialization: weights of a layer with
    /// fan-in n drawn from U(−√(6/n), √(6/n)), biases zero.
    pub fn init_he(&mut self, rng: &mut impl Rng) {
        let layout = self.layout();
        for l in layout {
            let bound = (6.0 / l.cols as f64).sqrt();
            for w in &mut self.params[l.w_off..l.b_off] {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut self.params[l.b_off..l.b_off + l.rows] {
                *b = 0.0;
            }
        }
    }

    /// Single-input forward pass (allocating; training and sampling use the
    /// batched path in [`train`]).
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::DimMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let layout = self.layout();
        let mut z = vec![0.0; self.input_dim + self.embed_dim];
        z[..self.input_dim].copy_from_slice(x);
        embed_into(t, &mut z[self.input_dim..]);
        let mut cur = z;
        for (i, l) in layout.iter().enumerate() {
            let mut next = vec![0.0; l.rows];
            kernels::matmul_xwt(
                &mut next,
                &cur,
                &self.params[l.w_off..l.b_off],
                1,
                l.cols,
                l.rows,
            );
            for (o, v) in next.iter_mut().enumerate() {
                *v += self.params[l.b_off + o];
                if i < HIDDEN_LAYERS {
                    *v = self.activation.value_deriv(*v).0;
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Batched forward pass into a caller buffer: `x` is batch×input_dim
    /// row-major, `t` one time per row, `out` batch×input_dim.
    pub fn forward_batch_into(&self, x: &[f64], t: &[f64], out: &mut [f64]) -> Result<()> {
        let batch = t.len();
        if x.len() != batch * self.input_dim || out.len() != batch * self.input_dim {
            return Err(Error::DimMismatch {
                expected: batch * self.input_dim,
                got: if x.len() != batch * self.input_dim {
                    x.len()
                } else {
                    out.len()
                },
            });
        }
        let mut ws = train::ForwardWorkspace::new(self, batch);
        ws.run(self, x, t);
        out.copy_from_slice(ws.output());
        Ok(())
    }
}

/// Serialize a model to a versioned little-endian checkpoint.
///
/// Layout: 8-byte magic "SMCKPT\x00\x01" (version in the final byte), five
/// little-endian u32 fields (input_dim, embed_dim, hidden width, hidden
/// layers, activation id), a u64 parameter count, then the parameters as
/// little-endian f64.
pub fn save_checkpoint(model: &ScoreModel, path: &std::path::Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 20 + 8 + model.param_count() * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    for v in [
        model.input_dim as u32,
        model.embed_dim as u32,
        HIDDEN_WIDTH as u32,
        HIDDEN_LAYERS as u32,
        model.activation.id(),
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

const CKPT_MAGIC: &[u8; 8] = b"SMCKPT\x00\x01";

/// Load a checkpoint written by [`save_checkpoint`], validating the header
/// and the exact file length.
pub fn load_checkpoint(path: &std::path::Path) -> Result<ScoreModel> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 + 20 + 8 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != CKPT_MAGIC {
        return Err(fail("bad magic or unsupported version".to_string()));
    }
    let u32_at = |off: usize| {
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    let (input_dim, embed_dim) = (u32_at(8), u32_at(12));
    let (width, layers, act_id) = (u32_at(16), u32_at(20), u32_at(24) as u32);
    if width != HIDDEN_WIDTH || layers != HIDDEN_LAYERS {
        return Err(fail(format!(
            "layout {layers} layers × {width} does not match the fixed architecture \
             {HIDDEN_LAYERS} × {HIDDEN_WIDTH}"
        )));
    }
    let activation = Activation::from_id(act_id)?;
    let count = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize;
    let mut model = ScoreModel::new(input_dim, embed_dim, activation)
        .map_err(|e| fail(format!("invalid dimensions in header: {e}")))?;
    if count != model.param_count() {
        return Err(fail(format!(
            "parameter count {count} does not match layout count {}",
            model.param_count()
        )));
    }
    let expected_len = 36 + count * 8;
    if bytes.len() != expected_len {
        return Err(fail(format!(
            "file length {} does not match header (expected {expected_len})",
            bytes.len()
        )));
    }
    for (i, p) in model.params_mut().iter_mut().enumerate() {
        let off = 36 + i * 8;
        *p = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn embedding_at_zero_is_alternating_zero_one() {
        let e = time_embedding(0.0, 16).unwrap();
        for k in 0..8 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn embedding_norm_is_half_the_dimension() {
        for dim in [2, 16, 128] {
            for i in 0..=20 {
                let t = i as f64 / 20.0;
                let e = time_embedding(t, dim).unwrap();
                let n2: f64 = e.iter().map(|v| v * v).sum();
                assert!(
                    (n2 - dim as f64 / 2.0).abs() <= 1e-12,
                    "dim={dim} t={t}: ‖e‖²={n2}"
                );
            }
        }
    }

    #[test]
    fn embedding_is_injective_on_a_dense_grid() {
        // The base frequency π/2 maps [0, 1] onto a quarter circle, so the
        // first (sin, cos) pair already separates every pair of grid times;
        // its pairwise distance lower-bounds the full embedding distance,
        // which makes the exhaustive pairwise check cheap.
        let n = 10_000;
        let pairs: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let e = time_embedding(i as f64 / n as f64, 128).unwrap();
                (e[0], e[1])
            })
            .collect();
        let mut min_d2 = f64::INFINITY;
        for i in 0..pairs.len() {
            for j in i + 1..pairs.len() {
                let (ds, dc) = (pairs[i].0 - pairs[j].0, pairs[i].1 - pairs[j].1);
                let d2 = ds * ds + dc * dc;
                if d2 < min_d2 {
                    min_d2 = d2;
                }
            }
        }
        // Chord of a quarter circle over Δt = 1e-4: 2·sin(π/4·1e-4) ≈ 1.6e-4.
        assert!(min_d2.sqrt() > 1e-9, "min distance {}", min_d2.sqrt());
        assert!(min_d2.sqrt() > 1e-4, "min distance {}", min_d2.sqrt());
    }

    #[test]
    fn embedding_rejects_odd_dimension() {
        assert!(time_embedding(0.5, 7).is_err());
        assert!(time_embedding(0.5, 0).is_err());
        assert!(ScoreModel::new(2, 9, Activation::Gelu).is_err());
        assert!(ScoreModel::new(0, 8, Activation::Gelu).is_err());
    }

    #[test]
    fn parameter_count_matches_layout() {
        let m = ScoreModel::with_defaults(2).unwrap();
        // (2+128)→128, 128→128, 128→128, 128→2, weights + biases.
        let expect = 128 * 130 + 128 + (128 * 128 + 128) * 2 + 2 * 128 + 2;
        assert_eq!(m.param_count(), expect);
        assert_eq!(m.input_dim(), 2);
        assert_eq!(m.embed_dim(), DEFAULT_EMBED_DIM);
        assert_eq!(m.activation(), Activation::Gelu);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let m = ScoreModel::with_defaults(2).unwrap();
        let out = m.forward(&[0.7, -1.3], 0.4).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_and_time_sensitive() {
        for seed in 0..10 {
            let mut m = ScoreModel::new(2, 16, Activation::Gelu).unwrap();
            m.init_he(&mut substream(19, &[seed]));
            let x = [0.5, -0.2];
            let a = m.forward(&x, 0.3).unwrap();
            let b = m.forward(&x, 0.3).unwrap();
            assert_eq!(a, b);
            let mut max_diff = 0.0f64;
            for i in 0..=10 {
                let t = 0.05 + 0.9 * i as f64 / 10.0;
                let out = m.forward(&x, t).unwrap();
                max_diff = max_diff.max((out[0] - a[0]).abs() + (out[1] - a[1]).abs());
            }
            assert!(max_diff > 0.0, "seed {seed}: output ignores t");
        }
    }

    #[test]
    fn gelu_matches_reference_values_and_derivative() {
        // Spot values of the tanh-approximation GELU.
        let (v0, d0) = Activation::Gelu.value_deriv(0.0);
        assert_eq!(v0, 0.0);
        assert!((d0 - 0.5).abs() <= 1e-15);
        // Finite-difference check of the derivative.
        for &x in &[-2.0, -0.5, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (Activation::Gelu.value_deriv(x + h).0
                - Activation::Gelu.value_deriv(x - h).0)
                / (2.0 * h);
            let (_, d) = Activation::Gelu.value_deriv(x);
            assert!((fd - d).abs() <= 1e-8, "x={x}: fd={fd} d={d}");
        }
        let (vr, dr) = Activation::Relu.value_deriv(-1.0);
        assert_eq!((vr, dr), (0.0, 0.0));
        let (vr, dr) = Activation::Relu.value_deriv(2.0);
        assert_eq!((vr, dr), (2.0, 1.0));
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = std::env::temp_dir().join("scorematch-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.bin");
        let mut m = ScoreModel::new(3, 32, Activation::Relu).unwrap();
        m.init_he(&mut substream(19, &[40]));
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.input_dim(), 3);
        assert_eq!(loaded.embed_dim(), 32);
        assert_eq!(loaded.activation(), Activation::Relu);
        assert_eq!(loaded.params(), m.params());
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = std::env::temp_dir().join("scorematch-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.bin");
        let mut m = ScoreModel::new(2, 16, Activation::Gelu).unwrap();
        m.init_he(&mut substream(19, &[41]));
        save_checkpoint(&m, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        std::fs::write(&path, &good[..good.len() - 8]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        let mut bad_count = good.clone();
        bad_count[28] ^= 0xff;
        std::fs::write(&path, &bad_count).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));

        std::fs::remove_file(&path).unwrap();
    }
}
