//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;
use uwav_core::data::BinaryGrid;

/// Independent event matcher: repeatedly takes the best remaining pair by
/// (IoU desc, gt start asc, pred start asc), comparing IoUs as exact
/// fractions. Returns (tp, fp, fn).
pub fn dual_match(pred: &[(usize, usize)], gt: &[(usize, usize)], threshold: (usize, usize)) -> (usize, usize, usize) {
    let frac = |p: (usize, usize), g: (usize, usize)| -> (usize, usize) {
        let lo = p.0.max(g.0);
        let hi = p.1.min(g.1);
        let inter = hi.saturating_sub(lo);
        let union = (p.1 - p.0) + (g.1 - g.0) - inter;
        (inter, union.max(1))
    };
    // a/b >= c/d  <=>  a*d >= c*b
    let ge = |x: (usize, usize), y: (usize, usize)| x.0 * y.1 >= y.0 * x.1;
    let gt_frac = |x: (usize, usize), y: (usize, usize)| x.0 * y.1 > y.0 * x.1;
    let mut free_p = vec![true; pred.len()];
    let mut free_g = vec![true; gt.len()];
    let mut tp = 0;
    loop {
        let mut best: Option<(usize, usize, (usize, usize))> = None;
        for (gi, &g) in gt.iter().enumerate() {
            for (pi, &p) in pred.iter().enumerate() {
                if !free_g[gi] || !free_p[pi] {
                    continue;
                }
                let iou = frac(p, g);
                if !ge(iou, threshold) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bg, bp, biou)) => {
                        gt_frac(iou, biou)
                            || (!gt_frac(biou, iou) && (g.0, p.0) < (gt[bg].0, pred[bp].0))
                    }
                };
                if better {
                    best = Some((gi, pi, iou));
                }
            }
        }
        match best {
            Some((gi, pi, _)) => {
                free_g[gi] = false;
                free_p[pi] = false;
                tp += 1;
            }
            None => break,
        }
    }
    (tp, pred.len() - tp, gt.len() - tp)
}

/// Timeline of length `t` with at most `max_events` random disjoint runs.
pub fn random_timeline<R: Rng>(rng: &mut R, t: usize, max_events: usize) -> Vec<u8> {
    let mut out = vec![0u8; t];
    let n = rng.random_range(0..=max_events);
    for _ in 0..n {
        let len = rng.random_range(1..=t.min(5));
        let start = rng.random_range(0..=t - len);
        out[start..start + len].iter_mut().for_each(|v| *v = 1);
    }
    out
}

pub fn random_grid<R: Rng>(rng: &mut R, t: usize, c: usize, density: f64) -> BinaryGrid {
    (0..t).map(|_| (0..c).map(|_| u8::from(rng.random_bool(density))).collect()).collect()
}

pub fn column(values: &[u8]) -> BinaryGrid {
    values.iter().map(|&v| vec![v]).collect()
}

/// Desk-scale schedule for 200-video synthetic runs: batches of 16 and a
/// tenfold higher peak rate than the full-scale defaults, which assume
/// thousands of videos per epoch.
pub fn desk_recipe(cfg: &mut uwav_core::pipeline::RunConfig) {
    cfg.pretrain.batch_size = 16;
    cfg.pretrain.peak_lr = 1e-3;
    cfg.pretrain.min_lr = 1e-4;
    cfg.train.batch_size = 16;
    cfg.train.peak_lr = 1e-3;
    cfg.train.min_lr = 5e-5;
}

pub fn randn(rng: &mut rand_chacha::ChaCha8Rng, shape: [usize; 2]) -> uwav_core::Tensor<f64> {
    let data: Vec<f64> = (0..shape[0] * shape[1]).map(|_| rng.random_range(-2.0..2.0)).collect();
    uwav_core::Tensor::from_f64(shape, &data).unwrap()
}

/// Pseudo-labels of a `t x c` video from random logits and thresholds,
/// with its random video label.
pub fn random_pseudo_set(rng: &mut rand_chacha::ChaCha8Rng, t: usize, c: usize) -> (uwav_core::data::PseudoLabelSet, Vec<u8>) {
    use uwav_core::pseudolabel::{binary_pseudo_labels, soft_pseudo_labels};
    let y: Vec<u8> = (0..c).map(|_| u8::from(rng.random_bool(0.4))).collect();
    let th: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let zv: Vec<f64> = (0..t * c).map(|_| rng.random_range(-3.0..3.0)).collect();
    let za: Vec<f64> = (0..t * c).map(|_| rng.random_range(-3.0..3.0)).collect();
    let set = uwav_core::data::PseudoLabelSet {
        binary_visual: binary_pseudo_labels(&zv, &th, &y),
        binary_audio: binary_pseudo_labels(&za, &th, &y),
        soft_visual: soft_pseudo_labels(&zv, &th, &y),
        soft_audio: soft_pseudo_labels(&za, &th, &y),
        thresholds_visual: th.clone(),
        thresholds_audio: th,
    };
    (set, y)
}
