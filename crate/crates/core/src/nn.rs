//! Layers shared by the gaze estimator and the grounding network: linear
//! maps, layer norm, multi-head attention, gated linear units and the
//! pre-norm transformer block. Parameters register themselves in a
//! [`ParamReg`] under hierarchical names so the optimizer and checkpoint
//! code can address them uniformly.

use crate::tensor::Tensor;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One registered parameter. `decay` is false for biases and normalization
/// parameters, which are excluded from weight decay.
#[derive(Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub decay: bool,
}

/// Ordered registry of every trainable tensor in a model.
#[derive(Default)]
pub struct ParamReg {
    entries: Vec<ParamEntry>,
}

impl ParamReg {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry { name, tensor, decay });
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Snapshot of every parameter value, keyed by name.
    pub fn snapshot(&self) -> Vec<(String, ArrayD<f64>)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.data()))
            .collect()
    }

    /// Overwrites parameter values from a snapshot; names and shapes must
    /// match exactly.
    pub fn restore(&self, snapshot: &[(String, ArrayD<f64>)]) -> crate::Result<()> {
        for e in &self.entries {
            let found = snapshot
                .iter()
                .find(|(n, _)| n == &e.name)
                .ok_or_else(|| crate::Error::CorruptFile(format!("missing parameter {}", e.name)))?;
            if found.1.shape() != e.tensor.data().shape() {
                return Err(crate::Error::Shape(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    e.name,
                    e.tensor.data().shape(),
                    found.1.shape()
                )));
            }
            e.tensor.set_data(found.1.clone());
        }
        Ok(())
    }
}

fn uniform_init(rng: &mut ChaCha12Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    use rand::Rng;
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Fully connected layer, y = x W + b, weights Xavier-uniform initialized.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(reg: &mut ParamReg, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = Tensor::param(uniform_init(rng, d_in, d_out, bound).into_dyn());
        let b = Tensor::param(ArrayD::zeros(IxDyn(&[d_out])));
        reg.add(format!("{name}.w"), w.clone(), true);
        reg.add(format!("{name}.b"), b.clone(), false);
        Linear { w, b }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add_row(&self.b)
    }
}

pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamReg, name: &str, d: usize) -> Self {
        let gamma = Tensor::param(Array1::ones(d).into_dyn());
        let beta = Tensor::param(ArrayD::zeros(IxDyn(&[d])));
        reg.add(format!("{name}.gamma"), gamma.clone(), false);
        reg.add(format!("{name}.beta"), beta.clone(), false);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention. Returns the projected attention
/// output without any residual; blocks decide how to combine it.
pub struct MultiHeadAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    n_heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(reg: &mut ParamReg, name: &str, d_model: usize, n_heads: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(d_model % n_heads == 0, "d_model must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(reg, &format!("{name}.wq"), d_model, d_model, rng),
            wk: Linear::new(reg, &format!("{name}.wk"), d_model, d_model, rng),
            wv: Linear::new(reg, &format!("{name}.wv"), d_model, d_model, rng),
            wo: Linear::new(reg, &format!("{name}.wo"), d_model, d_model, rng),
            n_heads,
            head_dim: d_model / n_heads,
        }
    }

    /// `key_mask[j] == false` removes context position j from every query's
    /// softmax. If the whole context is masked the output is zero.
    pub fn forward(&self, queries: &Tensor, context: &Tensor, key_mask: &[bool]) -> Tensor {
        let q = self.wq.forward(queries);
        let k = self.wk.forward(context);
        let v = self.wv.forward(context);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let a = h * self.head_dim;
            let b = a + self.head_dim;
            let qh = q.slice_cols(a, b);
            let kh = k.slice_cols(a, b);
            let vh = v.slice_cols(a, b);
            let scores = qh.matmul(&kh.t()).scale(scale);
            let weights = scores.masked_softmax_rows(key_mask);
            heads.push(weights.matmul(&vh));
        }
        self.wo.forward(&Tensor::concat_cols(&heads))
    }
}

/// Gated linear unit with a pre-norm residual: x + A * sigmoid(B), where
/// [A | B] is a single linear map of the normalized input to width 2d.
pub struct GluLayer {
    ln: LayerNorm,
    proj: Linear,
    d_model: usize,
}

impl GluLayer {
    pub fn new(reg: &mut ParamReg, name: &str, d_model: usize, rng: &mut ChaCha12Rng) -> Self {
        GluLayer {
            ln: LayerNorm::new(reg, &format!("{name}.ln"), d_model),
            proj: Linear::new(reg, &format!("{name}.proj"), d_model, 2 * d_model, rng),
            d_model,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let h = self.proj.forward(&self.ln.forward(x));
        let a = h.slice_cols(0, self.d_model);
        let b = h.slice_cols(self.d_model, 2 * self.d_model);
        x.add(&a.mul(&b.sigmoid()))
    }
}

/// Pre-norm transformer encoder block: self-attention then a two-layer
/// feed-forward, each wrapped in a residual. Masked rows are re-zeroed on
/// the way out so padding never leaks into later layers.
pub struct TransformerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

impl TransformerBlock {
    pub fn new(
        reg: &mut ParamReg,
        name: &str,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(reg, &format!("{name}.ln1"), d_model),
            attn: MultiHeadAttention::new(reg, &format!("{name}.attn"), d_model, n_heads, rng),
            ln2: LayerNorm::new(reg, &format!("{name}.ln2"), d_model),
            ff1: Linear::new(reg, &format!("{name}.ff1"), d_model, d_ff, rng),
            ff2: Linear::new(reg, &format!("{name}.ff2"), d_ff, d_model, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, mask: &[bool]) -> Tensor {
        let normed = self.ln1.forward(x);
        let x = x.add(&self.attn.forward(&normed, &normed, mask));
        let h = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&x)).relu());
        let out = x.add(&h);
        out.scale_rows_const(mask_weights(mask))
    }
}

/// 2-d convolution layer over (N, C, H, W) with zero padding.
pub struct Conv2dLayer {
    pub w: Tensor,
    pub b: Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &mut ParamReg,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        use rand::Rng;
        let fan_in = (c_in * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = ArrayD::from_shape_fn(IxDyn(&[c_out, c_in, kernel, kernel]), |_| {
            rng.random_range(-bound..bound)
        });
        let w = Tensor::param(w);
        let b = Tensor::param(ArrayD::zeros(IxDyn(&[c_out])));
        reg.add(format!("{name}.w"), w.clone(), true);
        reg.add(format!("{name}.b"), b.clone(), false);
        Conv2dLayer { w, b, stride: (stride, stride), pad: (pad, pad) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.w, &self.b, self.stride, self.pad)
    }
}

pub fn mask_weights(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

/// L2-normalizes every row; zero rows stay zero thanks to the epsilon.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let norms = x.mul(x).sum_rows().add_scalar(1e-12).pow_scalar(-0.5);
    x.rows_scale(&norms)
}
