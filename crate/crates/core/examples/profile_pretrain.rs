use gazenlq::gaze::*;
use gazenlq::heatmap::*;
use gazenlq::nn::ParamReg;
use gazenlq::optim::AdamW;
use gazenlq::rng::{normal, substream};
use gazenlq::sequence::EmbeddingSequence;
use gazenlq::tensor::Tensor;
use ndarray::Array2;
use std::time::Instant;

fn main() {
    let mut r = substream(23, "pretrain-data");
    let cfg = GazeEstimatorConfig { d_in: 24, ..Default::default() };
    let model = GazeEstimator::new(cfg.clone(), 5).unwrap();
    let feat = Array2::from_shape_fn((1, 24), |_| 0.1 * normal(&mut r));
    let seq = EmbeddingSequence::dense(feat);
    let h = build_gaze_heatmap(
        &[GazePoint { frame_index: 0, x: 0.25, y: 0.25, valid: true }],
        3.0,
    )
    .unwrap();

    let t0 = Instant::now();
    for _ in 0..16 {
        let _ = model.forward_graph(&seq).unwrap();
    }
    println!("16 trunk forwards: {:?}", t0.elapsed());

    let t0 = Instant::now();
    for _ in 0..16 {
        let rows = heatmap_rows_tensor(&[h.clone()]).unwrap();
        let _ = model.branch_graph(&rows);
    }
    println!("16 branch forwards: {:?}", t0.elapsed());

    let t0 = Instant::now();
    let (emb, maps) = model.forward_graph(&seq).unwrap();
    let rows = heatmap_rows_tensor(&[h.clone()]).unwrap();
    let gemb = model.branch_graph(&rows);
    let nce = info_nce_graph(&emb, &gemb, &InvTau::Fixed(1.0 / 0.07));
    let kl = kl_gaze_graph(&rows.to_matrix(), &maps);
    let loss = nce.add(&kl);
    println!("1-sample losses: {:?}", t0.elapsed());
    let t0 = Instant::now();
    loss.backward();
    println!("1-sample backward: {:?}", t0.elapsed());

    let mut opt = AdamW::new(model.params().entries().len(), 0.01);
    let t0 = Instant::now();
    for _ in 0..5 {
        opt.step(model.params().entries(), 1e-3);
    }
    println!("5 adamw steps (no grads): {:?}", t0.elapsed());

    // one real step with grads present
    let (emb, maps) = model.forward_graph(&seq).unwrap();
    let gemb = model.branch_graph(&rows);
    let nce = info_nce_graph(&emb, &gemb, &InvTau::Fixed(1.0 / 0.07));
    let kl = kl_gaze_graph(&rows.to_matrix(), &maps);
    nce.add(&kl).backward();
    let t0 = Instant::now();
    opt.step(model.params().entries(), 1e-3);
    println!("1 adamw step (with grads): {:?}", t0.elapsed());

    // raw matmul timing for scale
    let a = Tensor::from_matrix(Array2::from_shape_fn((1, 384), |_| 0.1));
    let w = Tensor::from_matrix(Array2::from_shape_fn((384, 4096), |_| 0.1));
    let t0 = Instant::now();
    for _ in 0..100 {
        let _ = a.matmul(&w);
    }
    println!("100 (1x384)@(384x4096) matmuls: {:?}", t0.elapsed());
}
