//! Gaze estimation from video features, pretrained with a contrastive
//! objective against embeddings of ground-truth gaze heatmaps plus a KL
//! term on a predicted heatmap.
//!
//! The video branch runs per-window features through a stack of gated
//! linear units, one self-attention layer and a projection head into the
//! 384-d gaze-aligned space; a regression head predicts a 64×64 heatmap
//! per window. The gaze branch embeds heatmaps through a convolution block
//! with spatial pooling and its own projection head. Both embeddings meet
//! in an InfoNCE loss with in-batch negatives.

use crate::checkpoint::{Checkpoint, GAZE_VERSION};
use crate::error::{Error, Result};
use crate::heatmap::{GazeHeatmap, CELLS, GRID};
use crate::nn::{
    l2_normalize_rows, mask_weights, Conv2dLayer, GluLayer, LayerNorm, Linear,
    MultiHeadAttention, ParamReg,
};
use crate::optim::{AdamW, WarmupCosine};
use crate::rng::{shuffled_indices, substream};
use crate::sequence::{EmbeddingSequence, D_MODEL};
use crate::tensor::Tensor;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

/// Probability floor applied to predicted heatmaps inside the KL loss.
pub const KL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GazeEstimatorConfig {
    /// Width of the incoming per-window video features.
    pub d_in: usize,
    /// Width of the gaze-aligned embedding space.
    pub d_model: usize,
    pub n_glu_layers: usize,
    pub n_heads: usize,
    /// Frames per feature window.
    pub window: usize,
    /// Frames between consecutive windows.
    pub stride: usize,
    /// InfoNCE temperature.
    pub tau: f64,
    /// When set, the temperature is trained as exp(log_tau) starting from
    /// `tau`. Off by default.
    pub learnable_tau: bool,
    /// Gaussian std in heatmap pixels used when rendering gaze points.
    pub heatmap_sigma: f64,
}

impl Default for GazeEstimatorConfig {
    fn default() -> Self {
        GazeEstimatorConfig {
            d_in: 1536,
            d_model: D_MODEL,
            n_glu_layers: 5,
            n_heads: 4,
            window: 32,
            stride: 16,
            tau: 0.07,
            learnable_tau: false,
            heatmap_sigma: 3.0,
        }
    }
}

impl GazeEstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return Err(Error::Config(format!(
                "need 0 < stride <= window, got window={} stride={}",
                self.window, self.stride
            )));
        }
        if self.n_glu_layers == 0 {
            return Err(Error::Config("need at least one GLU layer".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.heatmap_sigma <= 0.0 {
            return Err(Error::Config("heatmap_sigma must be positive".into()));
        }
        Ok(())
    }
}

// branch geometry: 64 -> conv stride 2 -> 32 -> conv stride 2 -> 16 -> pool -> 8
const BRANCH_C1: usize = 8;
const BRANCH_C2: usize = 16;
const BRANCH_FLAT: usize = BRANCH_C2 * 8 * 8;

pub struct GazeEstimator {
    pub cfg: GazeEstimatorConfig,
    reg: ParamReg,
    in_proj: Linear,
    glu: Vec<GluLayer>,
    attn_ln: LayerNorm,
    attn: MultiHeadAttention,
    proj_head: Linear,
    reg_head: Linear,
    branch_conv1: Conv2dLayer,
    branch_conv2: Conv2dLayer,
    branch_proj: Linear,
    log_tau: Option<Tensor>,
}

impl GazeEstimator {
    pub fn new(cfg: GazeEstimatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut reg = ParamReg::new();
        let mut rng = substream(seed, "init/gaze");
        let d = cfg.d_model;
        let in_proj = Linear::new(&mut reg, "in_proj", cfg.d_in, d, &mut rng);
        let glu = (0..cfg.n_glu_layers)
            .map(|i| GluLayer::new(&mut reg, &format!("glu.{i}"), d, &mut rng))
            .collect();
        let attn_ln = LayerNorm::new(&mut reg, "attn.ln", d);
        let attn = MultiHeadAttention::new(&mut reg, "attn.mha", d, cfg.n_heads, &mut rng);
        let proj_head = Linear::new(&mut reg, "proj_head", d, d, &mut rng);
        let reg_head = Linear::new(&mut reg, "reg_head", d, CELLS, &mut rng);
        let branch_conv1 = Conv2dLayer::new(&mut reg, "branch.conv1", 1, BRANCH_C1, 5, 2, 2, &mut rng);
        let branch_conv2 =
            Conv2dLayer::new(&mut reg, "branch.conv2", BRANCH_C1, BRANCH_C2, 3, 2, 1, &mut rng);
        let branch_proj = Linear::new(&mut reg, "branch.proj", BRANCH_FLAT, d, &mut rng);
        let log_tau = if cfg.learnable_tau {
            let t = Tensor::param(ArrayD::from_elem(IxDyn(&[1, 1]), cfg.tau.ln()));
            reg.add("log_tau", t.clone(), false);
            Some(t)
        } else {
            None
        };
        Ok(GazeEstimator {
            cfg,
            reg,
            in_proj,
            glu,
            attn_ln,
            attn,
            proj_head,
            reg_head,
            branch_conv1,
            branch_conv2,
            branch_proj,
            log_tau,
        })
    }

    pub fn params(&self) -> &ParamReg {
        &self.reg
    }

    /// Current temperature value.
    pub fn tau(&self) -> f64 {
        match &self.log_tau {
            Some(t) => t.data()[[0, 0]].exp(),
            None => self.cfg.tau,
        }
    }

    /// Graph-level forward: per-window gaze-space embeddings (T×d, masked
    /// rows zero) and per-window heatmap distributions (T×4096 rows).
    pub fn forward_graph(&self, features: &EmbeddingSequence) -> Result<(Tensor, Tensor)> {
        if features.d_model() != self.cfg.d_in {
            return Err(Error::Shape(format!(
                "estimator expects d_in {}, got {}",
                self.cfg.d_in,
                features.d_model()
            )));
        }
        let weights = mask_weights(&features.mask);
        let x = Tensor::from_matrix(features.data.clone()).scale_rows_const(weights.clone());
        let mut h = self.in_proj.forward(&x);
        for layer in &self.glu {
            h = layer.forward(&h);
        }
        let normed = self.attn_ln.forward(&h);
        let h = h.add(&self.attn.forward(&normed, &normed, &features.mask));
        let emb = self.proj_head.forward(&h).scale_rows_const(weights);
        let maps = self.reg_head.forward(&h).softmax_rows();
        Ok((emb, maps))
    }

    /// Runs the estimator on per-window video features, returning the
    /// gaze-space embedding sequence and one predicted heatmap per window.
    pub fn estimate(
        &self,
        features: &EmbeddingSequence,
    ) -> Result<(EmbeddingSequence, Vec<GazeHeatmap>)> {
        let (emb, maps) = self.forward_graph(features)?;
        let emb_seq = EmbeddingSequence::new(emb.to_matrix(), features.mask.clone())?;
        let maps = heatmaps_from_rows(&maps.to_matrix())?;
        Ok((emb_seq, maps))
    }

    /// Gaze-branch forward over heatmap rows (T×4096): convolution block,
    /// spatial pooling and projection into the shared embedding space.
    pub fn branch_graph(&self, heatmap_rows: &Tensor) -> Tensor {
        let t = heatmap_rows.rows();
        let vol = heatmap_rows.reshape(&[t, 1, GRID, GRID]);
        let c1 = self.branch_conv1.forward(&vol).relu();
        let c2 = self.branch_conv2.forward(&c1).relu();
        let pooled = c2.avg_pool2d(2, 2);
        self.branch_proj.forward(&pooled.reshape(&[t, BRANCH_FLAT]))
    }

    /// Embeds ground-truth heatmaps; one 384-d embedding per window.
    pub fn embed_heatmaps(&self, maps: &[GazeHeatmap]) -> Result<EmbeddingSequence> {
        let rows = heatmap_rows_tensor(maps)?;
        let emb = self.branch_graph(&rows);
        Ok(EmbeddingSequence::dense(emb.to_matrix()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: GAZE_VERSION.to_string(),
            config_json: serde_json::to_string(&self.cfg).expect("config serializes"),
            params: self.reg.snapshot(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg: GazeEstimatorConfig = serde_json::from_str(&ckpt.config_json)?;
        let model = GazeEstimator::new(cfg, 0)?;
        model.reg.restore(&ckpt.params)?;
        Ok(model)
    }
}

/// Stacks heatmaps as a constant (T×4096) tensor.
pub fn heatmap_rows_tensor(maps: &[GazeHeatmap]) -> Result<Tensor> {
    if maps.is_empty() {
        return Err(Error::EmptyInput("no heatmaps to embed".into()));
    }
    let mut m = Array2::<f64>::zeros((maps.len(), CELLS));
    for (i, h) in maps.iter().enumerate() {
        for (j, v) in h.grid().iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    Ok(Tensor::from_matrix(m))
}

fn heatmaps_from_rows(rows: &Array2<f64>) -> Result<Vec<GazeHeatmap>> {
    let mut out = Vec::with_capacity(rows.nrows());
    for i in 0..rows.nrows() {
        let flat: Vec<f64> = rows.row(i).iter().cloned().collect();
        out.push(GazeHeatmap::from_flat(&flat)?);
    }
    Ok(out)
}

// ── losses ──────────────────────────────────────────────────────────────

/// InfoNCE on the graph. Rows of `video` and `gaze` are L2-normalized,
/// the similarity matrix is scaled by 1/tau, positives sit on the
/// diagonal and every other row in the batch is a negative. Returns the
/// sum over rows of -log softmax at the diagonal.
pub fn info_nce_graph(video: &Tensor, gaze: &Tensor, inv_tau: &InvTau) -> Tensor {
    let v = l2_normalize_rows(video);
    let g = l2_normalize_rows(gaze);
    let sims = v.matmul(&g.t());
    let scaled = match inv_tau {
        InvTau::Fixed(s) => sims.scale(*s),
        InvTau::Learned(t) => {
            let n = sims.rows();
            let ones = Tensor::from_matrix(Array2::ones((n, 1)));
            let col = ones.matmul(&t.neg().exp());
            sims.rows_scale(&col)
        }
    };
    scaled.logsumexp_rows().sub(&scaled.diag()).sum()
}

/// Inverse-temperature source: a fixed 1/tau or a learnable log-tau node.
pub enum InvTau {
    Fixed(f64),
    Learned(Tensor),
}

impl GazeEstimator {
    fn inv_tau(&self) -> InvTau {
        match &self.log_tau {
            Some(t) => InvTau::Learned(t.clone()),
            None => InvTau::Fixed(1.0 / self.cfg.tau),
        }
    }
}

/// Contrastive loss over two aligned embedding sequences. Masked positions
/// are dropped; the remaining valid lengths must match and be nonempty.
pub fn info_nce_loss(
    video_emb: &EmbeddingSequence,
    gaze_emb: &EmbeddingSequence,
    tau: f64,
) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let vi = video_emb.valid_indices();
    let gi = gaze_emb.valid_indices();
    if vi.len() != gi.len() {
        return Err(Error::Shape(format!(
            "valid lengths differ: {} vs {}",
            vi.len(),
            gi.len()
        )));
    }
    if vi.is_empty() {
        return Err(Error::EmptyInput("no valid embedding pairs".into()));
    }
    let v = Tensor::from_matrix(video_emb.data.clone()).select_rows(vi);
    let g = Tensor::from_matrix(gaze_emb.data.clone()).select_rows(gi);
    Ok(info_nce_graph(&v, &g, &InvTau::Fixed(1.0 / tau)).scalar())
}

/// KL divergence between two discrete distributions with the 0·log 0 := 0
/// convention; `q` is floored at `eps` and renormalized first.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> f64 {
    assert_eq!(p.len(), q.len());
    let qf: Vec<f64> = q.iter().map(|&v| v.max(eps)).collect();
    let qs: f64 = qf.iter().sum();
    let mut kl = 0.0;
    for (pi, qi) in p.iter().zip(qf.iter()) {
        if *pi > 0.0 {
            kl += pi * (pi / (qi / qs)).ln();
        }
    }
    kl
}

/// D_KL(gt ‖ pred) over heatmap cells. Both inputs must be distributions.
pub fn kl_gaze_loss(gt: &GazeHeatmap, pred: &GazeHeatmap) -> Result<f64> {
    if !gt.is_distribution() || !pred.is_distribution() {
        return Err(Error::NotADistribution(
            "kl_gaze_loss needs normalized heatmaps".into(),
        ));
    }
    Ok(kl_divergence(&gt.to_flat(), &pred.to_flat(), KL_EPS))
}

/// Graph version of the KL term, averaged over rows: `gt_rows` is a
/// constant (N×4096) matrix of target distributions, `pred_rows` the
/// predicted distributions from the regression head.
pub fn kl_gaze_graph(gt_rows: &Array2<f64>, pred_rows: &Tensor) -> Tensor {
    let n = gt_rows.nrows() as f64;
    // constant part: sum_i sum_c gt log gt (0 log 0 = 0)
    let const_part: f64 = gt_rows
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum();
    let q = pred_rows.clamp_min(KL_EPS);
    let q = q.rows_scale(&q.sum_rows().pow_scalar(-1.0));
    let gt = Tensor::from_matrix(gt_rows.clone());
    let cross = gt.mul(&q.ln()).sum();
    cross.neg().add_scalar(const_part).scale(1.0 / n)
}

/// Total pretraining objective: the unweighted sum of the contrastive and
/// KL terms.
pub fn gaze_total_loss(nce: f64, kl: f64) -> f64 {
    nce + kl
}

// ── pretraining ─────────────────────────────────────────────────────────

/// One pretraining unit: per-window features aligned with window-averaged
/// ground-truth heatmaps.
#[derive(Debug, Clone)]
pub struct GazePretrainSample {
    pub features: Array2<f64>,
    pub mask: Vec<bool>,
    pub heatmaps: Vec<GazeHeatmap>,
}

impl GazePretrainSample {
    pub fn dense(features: Array2<f64>, heatmaps: Vec<GazeHeatmap>) -> Self {
        let mask = vec![true; features.nrows()];
        GazePretrainSample { features, mask, heatmaps }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    /// Fraction of total steps spent in linear warm-up.
    pub warmup_frac: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            lr: 1e-3,
            batch_size: 16,
            epochs: 30,
            weight_decay: 0.01,
            warmup_frac: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossLogRow {
    pub epoch: usize,
    pub step: usize,
    pub nce: f64,
    pub kl: f64,
    pub total: f64,
}

/// Renders loss rows as CSV with the `epoch,step,nce,kl,total` header.
pub fn loss_log_csv(rows: &[LossLogRow]) -> String {
    let mut out = String::from("epoch,step,nce,kl,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.step, r.nce, r.kl, r.total
        ));
    }
    out
}

/// Minimizes the contrastive + KL objective over the dataset with AdamW,
/// linear warm-up and cosine decay. Deterministic for a fixed seed.
pub fn pretrain_gaze(
    dataset: &[GazePretrainSample],
    cfg: GazeEstimatorConfig,
    opts: &PretrainOptions,
) -> Result<(GazeEstimator, Vec<LossLogRow>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("pretraining dataset is empty".into()));
    }
    for s in dataset {
        if s.features.nrows() != s.heatmaps.len() || s.features.nrows() != s.mask.len() {
            return Err(Error::Shape(format!(
                "sample with {} windows, {} heatmaps, {} mask entries",
                s.features.nrows(),
                s.heatmaps.len(),
                s.mask.len()
            )));
        }
    }
    let model = GazeEstimator::new(cfg, opts.seed)?;
    let mut opt = AdamW::new(model.reg.entries().len(), opts.weight_decay);
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(opts.batch_size);
    let total_steps = (steps_per_epoch * opts.epochs) as u64;
    let schedule = WarmupCosine {
        peak_lr: opts.lr,
        warmup_steps: ((total_steps as f64 * opts.warmup_frac) as u64).max(1),
        total_steps,
    };
    let mut shuffle_rng = substream(opts.seed, "shuffle/gaze");
    let mut log = Vec::new();
    let mut global_step = 0u64;
    for epoch in 0..opts.epochs {
        let order = shuffled_indices(&mut shuffle_rng, n);
        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            let (nce, kl, loss) = batch_loss(&model, dataset, chunk)?;
            loss.backward();
            opt.step(model.reg.entries(), schedule.lr_at(global_step));
            global_step += 1;
            log.push(LossLogRow {
                epoch,
                step,
                nce,
                kl,
                total: nce + kl,
            });
        }
    }
    Ok((model, log))
}

fn batch_loss(
    model: &GazeEstimator,
    dataset: &[GazePretrainSample],
    batch: &[usize],
) -> Result<(f64, f64, Tensor)> {
    let mut video_parts = Vec::new();
    let mut gaze_parts = Vec::new();
    let mut pred_map_parts = Vec::new();
    let mut gt_rows_all: Vec<Array2<f64>> = Vec::new();
    for &i in batch {
        let sample = &dataset[i];
        let seq = EmbeddingSequence::new(sample.features.clone(), sample.mask.clone())?;
        let (emb, maps) = model.forward_graph(&seq)?;
        let valid = seq.valid_indices();
        if valid.is_empty() {
            continue;
        }
        let gt_valid: Vec<GazeHeatmap> = valid.iter().map(|&w| sample.heatmaps[w].clone()).collect();
        let gt_rows = heatmap_rows_tensor(&gt_valid)?;
        video_parts.push(emb.select_rows(valid.clone()));
        gaze_parts.push(model.branch_graph(&gt_rows));
        pred_map_parts.push(maps.select_rows(valid));
        gt_rows_all.push(gt_rows.to_matrix());
    }
    if video_parts.is_empty() {
        return Err(Error::EmptyInput("batch contains no valid windows".into()));
    }
    let video = Tensor::concat_rows(&video_parts);
    let gaze = Tensor::concat_rows(&gaze_parts);
    let gt_views: Vec<_> = gt_rows_all.iter().map(|m| m.view()).collect();
    let gt = ndarray::concatenate(ndarray::Axis(0), &gt_views).unwrap();
    let preds = Tensor::concat_rows(&pred_map_parts);
    let nce = info_nce_graph(&video, &gaze, &model.inv_tau());
    let kl = kl_gaze_graph(&gt, &preds);
    let nce_v = nce.scalar();
    let kl_v = kl.scalar();
    Ok((nce_v, kl_v, nce.add(&kl)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::build_gaze_heatmap;
    use crate::rng::normal;
    use approx::assert_relative_eq;

    fn small_cfg() -> GazeEstimatorConfig {
        GazeEstimatorConfig {
            d_in: 24,
            ..Default::default()
        }
    }

    fn seq(seed: u64, t: usize, d: usize) -> EmbeddingSequence {
        let mut r = substream(seed, "gaze-test");
        EmbeddingSequence::dense(Array2::from_shape_fn((t, d), |_| normal(&mut r)))
    }

    #[test]
    fn info_nce_single_pair_is_exactly_zero() {
        let v = EmbeddingSequence::dense(Array2::from_shape_fn((1, 8), |(_, j)| j as f64 + 1.0));
        let g = EmbeddingSequence::dense(Array2::from_shape_fn((1, 8), |(_, j)| 2.0 - j as f64));
        assert_eq!(info_nce_loss(&v, &g, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn info_nce_orthogonal_pair_matches_hand_evaluation() {
        // direct evaluation: 2 * (ln(e + 1) - 1) = 0.62652...
        let v = EmbeddingSequence::dense(ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        let g = EmbeddingSequence::dense(ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]));
        let loss = info_nce_loss(&v, &g, 1.0).unwrap();
        let expected = 2.0 * ((1f64.exp() + 1.0).ln() - 1.0);
        assert_relative_eq!(loss, expected, epsilon = 1e-12);
        assert_relative_eq!(loss, 0.62652, epsilon = 1e-4);
    }

    #[test]
    fn info_nce_identical_embeddings_is_n_log_n() {
        for n in [2usize, 4, 7] {
            let row: Vec<f64> = (0..6).map(|j| (j as f64) - 2.0).collect();
            let data = Array2::from_shape_fn((n, 6), |(_, j)| row[j]);
            let v = EmbeddingSequence::dense(data.clone());
            let g = EmbeddingSequence::dense(data);
            let loss = info_nce_loss(&v, &g, 0.07).unwrap();
            assert_relative_eq!(loss, n as f64 * (n as f64).ln(), epsilon = 1e-9);
        }
        // the derived value for N=4: 4 ln 4
        let data = Array2::ones((4, 3));
        let v = EmbeddingSequence::dense(data.clone());
        let loss = info_nce_loss(&v, &EmbeddingSequence::dense(data), 0.07).unwrap();
        assert_relative_eq!(loss, 5.5452, epsilon = 1e-4);
    }

    #[test]
    fn info_nce_rejects_bad_inputs() {
        let v = seq(0, 3, 8);
        let g = seq(1, 3, 8);
        assert!(info_nce_loss(&v, &g, 0.0).is_err());
        assert!(info_nce_loss(&v, &g, -1.0).is_err());
        let empty = EmbeddingSequence::new(Array2::zeros((2, 8)), vec![false, false]).unwrap();
        assert!(info_nce_loss(&empty, &empty, 0.07).is_err());
        let short = seq(2, 2, 8);
        assert!(info_nce_loss(&v, &short, 0.07).is_err());
    }

    #[test]
    fn info_nce_is_nonnegative_and_permutation_invariant() {
        use rand::Rng;
        let mut r = substream(5, "nce-prop");
        for _ in 0..50 {
            let n = r.random_range(2..9usize);
            let v = seq(r.random(), n, 12);
            let g = seq(r.random(), n, 12);
            let base = info_nce_loss(&v, &g, 0.5).unwrap();
            assert!(base >= 0.0, "loss {base} < 0");
            let perm = shuffled_indices(&mut r, n);
            let vp = EmbeddingSequence::dense(Array2::from_shape_fn((n, 12), |(i, j)| {
                v.data[[perm[i], j]]
            }));
            let gp = EmbeddingSequence::dense(Array2::from_shape_fn((n, 12), |(i, j)| {
                g.data[[perm[i], j]]
            }));
            let permuted = info_nce_loss(&vp, &gp, 0.5).unwrap();
            assert_relative_eq!(base, permuted, epsilon = 1e-9);
        }
    }

    #[test]
    fn kl_matches_direct_summation() {
        // gt uniform over 4 cells, pred (0.4, 0.2, 0.2, 0.2):
        // sum 0.25 ln(0.25/q) = 0.049857...
        let kl = kl_divergence(&[0.25; 4], &[0.4, 0.2, 0.2, 0.2], 0.0);
        assert_relative_eq!(kl, 0.04985, epsilon = 1e-4);
        let direct = 0.25 * (0.25f64 / 0.4).ln() + 3.0 * 0.25 * (0.25f64 / 0.2).ln();
        assert_relative_eq!(kl, direct, epsilon = 1e-12);
    }

    #[test]
    fn kl_gaze_loss_identity_and_positivity() {
        let h = build_gaze_heatmap(
            &[GazePointForTest { x: 0.4, y: 0.6 }.into()],
            2.0,
        )
        .unwrap();
        assert!(kl_gaze_loss(&h, &h).unwrap().abs() < 1e-8);
        let u = GazeHeatmap::uniform();
        let kl = kl_gaze_loss(&h, &u).unwrap();
        assert!(kl > 0.0);
        // embed the 2x2 example into full heatmaps
        let mut gt_flat = vec![0.0; CELLS];
        let mut pred_flat = vec![0.0; CELLS];
        gt_flat[..4].copy_from_slice(&[0.25; 4]);
        pred_flat[..4].copy_from_slice(&[0.4, 0.2, 0.2, 0.2]);
        let gt = GazeHeatmap::from_flat(&gt_flat).unwrap();
        let pred = GazeHeatmap::from_flat(&pred_flat).unwrap();
        assert_relative_eq!(kl_gaze_loss(&gt, &pred).unwrap(), 0.04985, epsilon = 2e-4);
    }

    #[test]
    fn kl_gaze_loss_rejects_unnormalized() {
        let raw = GazeHeatmap::new(Array2::from_elem((GRID, GRID), 2.0)).unwrap();
        let u = GazeHeatmap::uniform();
        assert!(kl_gaze_loss(&raw, &u).is_err());
        assert!(kl_gaze_loss(&u, &raw).is_err());
    }

    #[test]
    fn kl_is_nonnegative_on_random_distributions() {
        use rand::Rng;
        let mut r = substream(6, "kl-prop");
        for _ in 0..100 {
            let n = r.random_range(2..32usize);
            let mut p: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            let mut q: Vec<f64> = (0..n).map(|_| r.random_range(0.001..1.0)).collect();
            let ps: f64 = p.iter().sum();
            let qs: f64 = q.iter().sum();
            p.iter_mut().for_each(|v| *v /= ps);
            q.iter_mut().for_each(|v| *v /= qs);
            assert!(kl_divergence(&p, &q, KL_EPS) >= -1e-12);
        }
    }

    #[test]
    fn total_loss_is_plain_sum() {
        assert_eq!(gaze_total_loss(0.5, 0.25), 0.75);
        assert_eq!(gaze_total_loss(0.0, 0.0), 0.0);
        assert_relative_eq!(gaze_total_loss(0.62652, 0.04985), 0.67637, epsilon = 1e-9);
    }

    struct GazePointForTest {
        x: f64,
        y: f64,
    }

    impl From<GazePointForTest> for crate::heatmap::GazePoint {
        fn from(p: GazePointForTest) -> Self {
            crate::heatmap::GazePoint { frame_index: 0, x: p.x, y: p.y, valid: true }
        }
    }

    #[test]
    fn estimator_shapes_and_distributions() {
        let model = GazeEstimator::new(small_cfg(), 7).unwrap();
        let feats = seq(3, 5, 24);
        let (emb, maps) = model.estimate(&feats).unwrap();
        assert_eq!(emb.data.nrows(), 5);
        assert_eq!(emb.d_model(), D_MODEL);
        assert_eq!(maps.len(), 5);
        for m in &maps {
            assert!((m.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn estimator_rejects_width_mismatch() {
        let model = GazeEstimator::new(small_cfg(), 7).unwrap();
        let feats = seq(3, 5, 23);
        assert!(matches!(model.estimate(&feats), Err(Error::Shape(_))));
    }

    #[test]
    fn estimator_masked_rows_produce_zero_embeddings() {
        let model = GazeEstimator::new(small_cfg(), 7).unwrap();
        let mut feats = seq(4, 4, 24);
        feats.mask = vec![false, true, false, true];
        let (emb, _) = model.estimate(&feats).unwrap();
        assert!(emb.data.row(0).iter().all(|v| *v == 0.0));
        assert!(emb.data.row(2).iter().all(|v| *v == 0.0));
        assert!(emb.data.row(1).iter().any(|v| *v != 0.0));

        feats.mask = vec![false; 4];
        let (emb, _) = model.estimate(&feats).unwrap();
        assert!(emb.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn estimator_forward_is_deterministic() {
        let model = GazeEstimator::new(small_cfg(), 9).unwrap();
        let feats = seq(5, 4, 24);
        let (e1, m1) = model.estimate(&feats).unwrap();
        let (e2, m2) = model.estimate(&feats).unwrap();
        assert_eq!(e1.data, e2.data);
        assert_eq!(m1, m2);
    }

    #[test]
    fn branch_identical_windows_give_identical_interior_embeddings() {
        let model = GazeEstimator::new(small_cfg(), 11).unwrap();
        let h = build_gaze_heatmap(
            &[crate::heatmap::GazePoint { frame_index: 0, x: 0.7, y: 0.3, valid: true }],
            2.0,
        )
        .unwrap();
        let emb = model.embed_heatmaps(&vec![h; 5]).unwrap();
        for t in 1..4 {
            for j in 0..D_MODEL {
                assert!((emb.data[[t, j]] - emb.data[[1, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn branch_permuting_windows_permutes_interior_embeddings() {
        let model = GazeEstimator::new(small_cfg(), 11).unwrap();
        let maps: Vec<GazeHeatmap> = (0..5)
            .map(|i| GazeHeatmap::delta(i * 11 + 3, 60 - i * 9))
            .collect();
        let base = model.embed_heatmaps(&maps).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let permuted_maps: Vec<GazeHeatmap> = perm.iter().map(|&i| maps[i].clone()).collect();
        let permuted = model.embed_heatmaps(&permuted_maps).unwrap();
        for t in 1..4 {
            for j in 0..D_MODEL {
                assert!((permuted.data[[t, j]] - base.data[[perm[t], j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn branch_rejects_empty_input() {
        let model = GazeEstimator::new(small_cfg(), 11).unwrap();
        assert!(model.embed_heatmaps(&[]).is_err());
    }

    #[test]
    fn predicted_heatmaps_sum_to_one_property() {
        let model = GazeEstimator::new(small_cfg(), 13).unwrap();
        for s in 0..10 {
            let feats = seq(100 + s, 3, 24);
            let (_, maps) = model.estimate(&feats).unwrap();
            for m in &maps {
                assert!((m.sum() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // gradients w.r.t. the embedding inputs of both loss terms
        let mut r = substream(17, "gradcheck");
        let n = 4;
        let d = 6;
        let v0 = Array2::from_shape_fn((n, d), |_| normal(&mut r));
        let g0 = Array2::from_shape_fn((n, d), |_| normal(&mut r));

        let check = |data: Array2<f64>, loss_of: &dyn Fn(&Tensor) -> Tensor| {
            let leaf = Tensor::param(data.clone().into_dyn());
            loss_of(&leaf).backward();
            let analytic = leaf.grad().unwrap();
            let h = 1e-6;
            for i in 0..n {
                for j in 0..d {
                    let mut plus = data.clone();
                    let mut minus = data.clone();
                    plus[[i, j]] += h;
                    minus[[i, j]] -= h;
                    let fp = loss_of(&Tensor::param(plus.into_dyn())).scalar();
                    let fm = loss_of(&Tensor::param(minus.into_dyn())).scalar();
                    let numeric = (fp - fm) / (2.0 * h);
                    let a = analytic[[i, j]];
                    let denom = a.abs().max(numeric.abs()).max(1e-4);
                    assert!(
                        (a - numeric).abs() / denom < 1e-3,
                        "at ({i},{j}): {a} vs {numeric}"
                    );
                }
            }
        };

        let gc = Tensor::constant(g0.clone().into_dyn());
        check(v0.clone(), &|v| info_nce_graph(v, &gc, &InvTau::Fixed(1.0 / 0.3)));
        let vc = Tensor::constant(v0.into_dyn());
        check(g0, &|g| info_nce_graph(&vc, g, &InvTau::Fixed(1.0 / 0.3)));

        // KL w.r.t. predicted distributions (kept away from the eps floor)
        let mut gt = Array2::from_shape_fn((n, d), |_| r.random_range_01());
        for i in 0..n {
            let s: f64 = gt.row(i).sum();
            gt.row_mut(i).mapv_inplace(|v| v / s);
        }
        let logits = Array2::from_shape_fn((n, d), |_| normal(&mut r));
        let gt2 = gt.clone();
        check(logits, &|z| kl_gaze_graph(&gt2, &z.softmax_rows()));
    }

    trait RandHelper {
        fn random_range_01(&mut self) -> f64;
    }

    impl RandHelper for rand_chacha::ChaCha12Rng {
        fn random_range_01(&mut self) -> f64 {
            use rand::Rng;
            self.random_range(0.05..1.0)
        }
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        // 64 (features, heatmap) pairs with a learnable feature->location map
        let mut r = substream(23, "pretrain-data");
        let cfg = small_cfg();
        let mut dataset = Vec::new();
        for _ in 0..64 {
            use rand::Rng;
            let cell = r.random_range(0..4usize);
            let (cy, cx) = [(16, 16), (16, 48), (48, 16), (48, 48)][cell];
            let mut feat = Array2::from_shape_fn((1, 24), |_| 0.1 * normal(&mut r));
            feat[[0, cell]] += 2.0;
            let h = build_gaze_heatmap(
                &[crate::heatmap::GazePoint {
                    frame_index: 0,
                    x: cx as f64 / GRID as f64,
                    y: cy as f64 / GRID as f64,
                    valid: true,
                }],
                3.0,
            )
            .unwrap();
            dataset.push(GazePretrainSample::dense(feat, vec![h]));
        }
        let opts = PretrainOptions { epochs: 20, seed: 5, ..Default::default() };
        let (_, log) = pretrain_gaze(&dataset, cfg.clone(), &opts).unwrap();
        let first = log.first().unwrap().total;
        let last = log.last().unwrap().total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");

        // bit-identical loss curve across two runs with the same seed
        let (_, log2) = pretrain_gaze(&dataset, cfg.clone(), &opts).unwrap();
        assert_eq!(log, log2);

        // zero learning rate leaves parameters untouched
        let zero = PretrainOptions { lr: 0.0, epochs: 2, seed: 5, ..Default::default() };
        let (model_zero, _) = pretrain_gaze(&dataset, cfg.clone(), &zero).unwrap();
        let fresh = GazeEstimator::new(cfg, 5).unwrap();
        for (a, b) in model_zero.reg.snapshot().iter().zip(fresh.reg.snapshot().iter()) {
            assert_eq!(a.1, b.1, "parameter {} changed under lr=0", a.0);
        }
    }

    #[test]
    fn pretraining_rejects_empty_dataset() {
        let opts = PretrainOptions::default();
        assert!(matches!(
            pretrain_gaze(&[], small_cfg(), &opts),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_restores_outputs() {
        let model = GazeEstimator::new(small_cfg(), 31).unwrap();
        let feats = seq(32, 3, 24);
        let (emb_a, _) = model.estimate(&feats).unwrap();
        let ckpt = model.to_checkpoint();
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&buf[..], GAZE_VERSION).unwrap();
        let restored = GazeEstimator::from_checkpoint(&back).unwrap();
        let (emb_b, _) = restored.estimate(&feats).unwrap();
        assert_eq!(emb_a.data, emb_b.data);
    }

    #[test]
    fn loss_log_csv_header() {
        let rows = vec![LossLogRow { epoch: 0, step: 1, nce: 1.5, kl: 0.25, total: 1.75 }];
        let csv = loss_log_csv(&rows);
        assert!(csv.starts_with("epoch,step,nce,kl,total\n"));
        assert!(csv.contains("0,1,1.500000,0.250000,1.750000"));
    }
}
