//! Finite-difference gradient checks for every differentiable op and loss.
//!
//! Each check builds the same scalar function twice from one seed: in `f32`
//! for the analytic backward pass and in `f64` for central differences.
//! Parameters and inputs are drawn as `f32` so both copies hold identical
//! numbers.

use std::fmt::Write;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{encoder_block, han_layer, multi_head_attention, AttentionParams, EncoderBlockParams, EncoderConfig, HanLayerParams};
use crate::data::PseudoLabelSet;
use crate::error::Result;
use crate::han::{video_loss, BackboneInputs, HanConfig, HanModel};
use crate::objectives::{
    class_balance_weights, mix_with, mixup_loss, pseudo_label_loss, weighted_soft_loss, LabelMode, MixupConfig,
    ObjectiveConfig, PseudoTargets,
};
use crate::pipeline::stage2::{stage2_batch_loss, Stage2Item};
use crate::pseudolabel::{pretrain_loss, EmbedInputs, PseudoLabelerConfig, PseudoLabelerModel, TextTensors};
use crate::tensor::{Elem, Tensor};

/// Maximum relative error accepted by the suite. The error of a check is
/// the worst, over its parameter tensors, of the norm-wise relative error
/// between analytic and numeric gradients at the probed entries.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Central-difference step in `f64`.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so gradients near zero are
/// compared in absolute terms. Some gradients are exactly zero (a key
/// projection bias shifts every score of a softmax row equally), where `f32`
/// leaves noise of about `1e-8` per entry.
pub const REL_FLOOR: f64 = 1e-2;
/// Entries probed per parameter tensor.
const PROBES_PER_PARAM: usize = 12;

const T: usize = 10;
const C: usize = 6;

/// A scalar function of some trainable tensors.
pub struct World<E: Elem> {
    pub params: Vec<Tensor<E>>,
    pub loss: Box<dyn Fn() -> Result<Tensor<E>>>,
}

pub type Builder<E> = fn(u64) -> Result<World<E>>;

/// One registered check: the same builder instantiated at both precisions.
#[derive(Clone, Copy)]
pub struct GradCheck {
    pub name: &'static str,
    f32_world: Builder<f32>,
    f64_world: Builder<f64>,
}

impl GradCheck {
    pub fn new(name: &'static str, f32_world: Builder<f32>, f64_world: Builder<f64>) -> Self {
        Self {
            name,
            f32_world,
            f64_world,
        }
    }
}

macro_rules! check {
    ($name:expr, $build:ident) => {
        GradCheck::new($name, $build::<f32>, $build::<f64>)
    };
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
    pub passed: bool,
    /// Set when building or differentiating failed outright.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
    pub elapsed_s: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>12} {:>7}  result", "check", "max rel err", "probes");
        for r in &self.results {
            let verdict = match (&r.error, r.passed) {
                (Some(e), _) => format!("ERROR {e}"),
                (None, true) => "pass".to_string(),
                (None, false) => "FAIL".to_string(),
            };
            let _ = writeln!(out, "{:<24} {:>12.3e} {:>7}  {verdict}", r.name, r.max_rel_err, r.probes);
        }
        let _ = writeln!(
            out,
            "{} checks, max rel err {:.3e}, tolerance {:.0e}, {:.1} s",
            self.results.len(),
            self.max_rel_err(),
            self.tolerance,
            self.elapsed_s
        );
        out
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)` over the probed entries of one
/// tensor, with `|.|` the Euclidean norm.
fn relative_error(diff_norm: f64, analytic_norm: f64, numeric_norm: f64) -> f64 {
    diff_norm / analytic_norm.max(numeric_norm).max(REL_FLOOR)
}

fn try_check(check: &GradCheck, seed: u64) -> Result<(f64, usize)> {
    let w32 = (check.f32_world)(seed)?;
    let w64 = (check.f64_world)(seed)?;
    for p in &w32.params {
        p.zero_grad();
    }
    (w32.loss)()?.backward()?;
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (mut worst, mut probes) = (0.0f64, 0usize);
    for (p32, p64) in w32.params.iter().zip(&w64.params) {
        let grad = p32.grad().unwrap_or_else(|| vec![0.0; p32.numel()]);
        let n = p64.numel();
        let idx: Vec<usize> = if n <= PROBES_PER_PARAM {
            (0..n).collect()
        } else {
            sample(&mut pick, n, PROBES_PER_PARAM).into_vec()
        };
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for i in idx {
            let x = p64.data()[i];
            p64.data_mut()[i] = x + FD_STEP;
            let up = (w64.loss)()?.item();
            p64.data_mut()[i] = x - FD_STEP;
            let down = (w64.loss)()?.item();
            p64.data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grad[i] as f64;
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
            probes += 1;
        }
        worst = worst.max(relative_error(diff.sqrt(), na.sqrt(), nn.sqrt()));
    }
    Ok((worst, probes))
}

/// Runs one check; failures are reported in the result, not returned.
pub fn run_check(check: &GradCheck, seed: u64) -> CheckResult {
    match try_check(check, seed) {
        Ok((err, probes)) => CheckResult {
            name: check.name.to_string(),
            max_rel_err: err,
            probes,
            passed: err < GRADCHECK_TOL,
            error: None,
        },
        Err(e) => CheckResult {
            name: check.name.to_string(),
            max_rel_err: f64::INFINITY,
            probes: 0,
            passed: false,
            error: Some(e.to_string()),
        },
    }
}

pub fn run_checks(checks: &[GradCheck], seed: u64) -> GradCheckReport {
    let started = Instant::now();
    let results = checks.iter().map(|c| run_check(c, seed)).collect();
    GradCheckReport {
        seed,
        tolerance: GRADCHECK_TOL,
        results,
        elapsed_s: started.elapsed().as_secs_f64(),
    }
}

/// Every registered op, composite and loss check.
pub fn registered_checks() -> Vec<GradCheck> {
    vec![
        check!("add", op_add),
        check!("add_broadcast", op_add_broadcast),
        check!("sub", op_sub),
        check!("mul", op_mul),
        check!("mul_broadcast", op_mul_broadcast),
        check!("sigmoid", op_sigmoid),
        check!("exp", op_exp),
        check!("log", op_log),
        check!("clamp", op_clamp),
        check!("scale", op_scale),
        check!("add_scalar", op_add_scalar),
        check!("relu", op_relu),
        check!("matmul", op_matmul),
        check!("transpose", op_transpose),
        check!("softmax_rows", op_softmax_rows),
        check!("softmax_axis0", op_softmax_axis0),
        check!("softmax_3d_axis1", op_softmax_3d),
        check!("layer_norm", op_layer_norm),
        check!("sum_all", op_sum_all),
        check!("mean_all", op_mean_all),
        check!("sum_axis", op_sum_axis),
        check!("reshape", op_reshape),
        check!("narrow", op_narrow),
        check!("concat", op_concat),
        check!("stack", op_stack),
        check!("index_select", op_index_select),
        check!("add_n", op_add_n),
        check!("bce", op_bce),
        check!("bce_weighted", op_bce_weighted),
        check!("attention", comp_attention),
        check!("han_layer", comp_han_layer),
        check!("encoder_stack", comp_encoder_stack),
        check!("loss_temporal", loss_temporal),
        check!("loss_video", loss_video),
        check!("loss_hard", loss_hard),
        check!("loss_soft", loss_soft),
        check!("loss_weighted_soft", loss_weighted_soft),
        check!("loss_mixup", loss_mixup),
        check!("loss_total", loss_total),
    ]
}

/// The full suite at `seed`.
pub fn gradcheck_suite(seed: u64) -> GradCheckReport {
    run_checks(&registered_checks(), seed)
}

/// Seeded source of `f32`-exact values.
pub struct Gen(ChaCha8Rng);

impl Gen {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.0
    }

    fn values(&mut self, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| self.0.random_range(lo..hi)).collect()
    }

    pub fn param<E: Elem>(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor<E> {
        let v = self.values(shape.iter().product(), lo, hi);
        Tensor::param(shape.to_vec(), v.iter().map(|&x| E::from_f32(x)).collect()).expect("finite")
    }

    pub fn constant<E: Elem>(&mut self, shape: &[usize], lo: f32, hi: f32) -> Tensor<E> {
        let v = self.values(shape.iter().product(), lo, hi);
        Tensor::from_f32(shape.to_vec(), &v).expect("finite")
    }

    /// Values bounded away from zero so kinks stay out of the probe step.
    pub fn off_zero<E: Elem>(&mut self, shape: &[usize]) -> Tensor<E> {
        let v: Vec<E> = self
            .values(shape.iter().product(), 0.05, 1.0)
            .into_iter()
            .map(|x| E::from_f32(if self.0.random::<bool>() { x } else { -x }))
            .collect();
        Tensor::param(shape.to_vec(), v).expect("finite")
    }

    pub fn binary_grid(&mut self, rows: usize, cols: usize, mask: &[u8]) -> Vec<Vec<u8>> {
        (0..rows)
            .map(|_| (0..cols).map(|c| u8::from(self.0.random::<bool>()) & mask[c]).collect())
            .collect()
    }

    pub fn video_label(&mut self, classes: usize) -> Vec<u8> {
        let mut y: Vec<u8> = (0..classes).map(|_| u8::from(self.0.random_bool(0.5))).collect();
        y[self.0.random_range(0..classes)] = 1;
        y
    }

    /// Random pseudo-labels consistent with `y`.
    pub fn pseudo_set(&mut self, y: &[u8]) -> PseudoLabelSet {
        let soft = |bin: &Vec<Vec<u8>>, g: &mut Self| -> Vec<Vec<f64>> {
            bin.iter()
                .map(|row| {
                    row.iter()
                        .zip(y)
                        .map(|(&b, &m)| match (m, b) {
                            (0, _) => 0.0,
                            (_, 1) => g.0.random_range(0.55f32..0.99) as f64,
                            _ => g.0.random_range(0.01f32..0.45) as f64,
                        })
                        .collect()
                })
                .collect()
        };
        let bv = self.binary_grid(T, y.len(), y);
        let ba = self.binary_grid(T, y.len(), y);
        let sv = soft(&bv, self);
        let sa = soft(&ba, self);
        PseudoLabelSet {
            binary_visual: bv,
            binary_audio: ba,
            soft_visual: sv,
            soft_audio: sa,
            thresholds_visual: vec![0.0; y.len()],
            thresholds_audio: vec![0.0; y.len()],
        }
    }
}

/// `sum(out * r)` for a fixed random `r`, turning any output into a scalar
/// with a non-trivial upstream gradient.
fn project<E: Elem>(out: &Tensor<E>, r: &Tensor<E>) -> Result<Tensor<E>> {
    out.mul(r)?.sum_all()
}

fn unary_world<E: Elem>(
    seed: u64,
    x: impl FnOnce(&mut Gen) -> Tensor<E>,
    f: impl Fn(&Tensor<E>) -> Result<Tensor<E>> + 'static,
) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let x = x(&mut g);
    let probe = f(&x)?;
    let r = g.constant::<E>(probe.shape(), -1.0, 1.0);
    let xc = x.clone();
    Ok(World {
        params: vec![x],
        loss: Box::new(move || project(&f(&xc)?, &r)),
    })
}

fn binary_world<E: Elem>(
    seed: u64,
    sa: &[usize],
    sb: &[usize],
    f: impl Fn(&Tensor<E>, &Tensor<E>) -> Result<Tensor<E>> + 'static,
) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let a = g.param::<E>(sa, -1.0, 1.0);
    let b = g.param::<E>(sb, -1.0, 1.0);
    let probe = f(&a, &b)?;
    let r = g.constant::<E>(probe.shape(), -1.0, 1.0);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(World {
        params: vec![a, b],
        loss: Box::new(move || project(&f(&ac, &bc)?, &r)),
    })
}

fn op_add<E: Elem>(seed: u64) -> Result<World<E>> {
    binary_world(seed, &[T, 8], &[T, 8], |a, b| a.add(b))
}

fn op_add_broadcast<E: Elem>(seed: u64) -> Result<World<E>> {
    binary_world(seed, &[T, 8], &[8], |a, b| a.add(b))
}

fn op_sub<E: Elem>(seed: u64) -> Result<World<E>> {
    binary_world(seed, &[T, 8], &[T, 8], |a, b| a.sub(b))
}

fn op_mul<E: Elem>(seed: u64) -> Result<World<E>> {
    binary_world(seed, &[T, 8], &[T, 8], |a, b| a.mul(b))
}

fn op_mul_broadcast<E: Elem>(seed: u64) -> Result<World<E>> {
    binary_world(seed, &[2, T, 8], &[T, 8], |a, b| a.mul(b))
}

fn op_sigmoid<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 8], -3.0, 3.0), |x| x.sigmoid())
}

fn op_exp<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 8], -2.0, 2.0), |x| x.exp())
}

fn op_log<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 8], 0.2, 3.0), |x| x.log())
}

fn op_clamp<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.off_zero(&[T, 8]), |x| x.clamp(-0.5, 0.5))
}

fn op_scale<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 8], -1.0, 1.0), |x| x.scale(-2.5))
}

fn op_add_scalar<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 8], -1.0, 1.0), |x| x.add_scalar(0.75))
}

fn op_relu<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.off_zero(&[T, 8]), |x| x.relu())
}

fn op_matmul<E: Elem>(seed: u64) -> Result<World<E>> {
    binary_world(seed, &[T, 16], &[16, 12], |a, b| a.matmul(b))
}

fn op_transpose<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 7], -1.0, 1.0), |x| x.transpose())
}

fn op_softmax_rows<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 9], -2.0, 2.0), |x| x.softmax(1))
}

fn op_softmax_axis0<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[2, T, C], -2.0, 2.0), |x| x.softmax(0))
}

fn op_softmax_3d<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[2, T, C], -2.0, 2.0), |x| x.softmax(1))
}

fn op_layer_norm<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let x = g.param::<E>(&[T, 16], -2.0, 2.0);
    let gain = g.param::<E>(&[16], 0.5, 1.5);
    let bias = g.param::<E>(&[16], -0.5, 0.5);
    let r = g.constant::<E>(&[T, 16], -1.0, 1.0);
    let (xc, gc, bc) = (x.clone(), gain.clone(), bias.clone());
    Ok(World {
        params: vec![x, gain, bias],
        loss: Box::new(move || project(&xc.layer_norm(&gc, &bc, crate::attention::LN_EPS)?, &r)),
    })
}

fn op_sum_all<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 8], -1.0, 1.0), |x| x.mul(x)?.sum_all())
}

fn op_mean_all<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 8], -1.0, 1.0), |x| x.mul(x)?.mean_all())
}

fn op_sum_axis<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[2, T, C], -1.0, 1.0), |x| x.sum_axis(1)?.sum_axis(0))
}

fn op_reshape<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 8], -1.0, 1.0), |x| x.reshape([4, 20]))
}

fn op_narrow<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 12], -1.0, 1.0), |x| x.narrow(1, 3, 5)?.narrow(0, 2, 6))
}

fn op_concat<E: Elem>(seed: u64) -> Result<World<E>> {
    binary_world(seed, &[T, 4], &[T, 6], |a, b| {
        let wide = Tensor::concat(&[a.clone(), b.clone()], 1)?;
        Tensor::concat(&[wide.clone(), wide.narrow(0, 0, 3)?], 0)
    })
}

fn op_stack<E: Elem>(seed: u64) -> Result<World<E>> {
    binary_world(seed, &[T, C], &[T, C], |a, b| Tensor::stack(&[a.clone(), b.clone(), a.clone()]))
}

fn op_index_select<E: Elem>(seed: u64) -> Result<World<E>> {
    unary_world(seed, |g| g.param(&[T, 5], -1.0, 1.0), |x| x.index_select(&[3, 0, 3, 9, 1, 1]))
}

fn op_add_n<E: Elem>(seed: u64) -> Result<World<E>> {
    binary_world(seed, &[T, C], &[T, C], |a, b| Tensor::add_n(&[a.clone(), b.clone(), a.clone()]))
}

fn op_bce<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let p = g.param::<E>(&[T, C], 0.05, 0.95);
    let y = g.constant::<E>(&[T, C], 0.0, 1.0);
    let pc = p.clone();
    Ok(World {
        params: vec![p],
        loss: Box::new(move || pc.bce(&y, None)),
    })
}

fn op_bce_weighted<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let p = g.param::<E>(&[T, C], 0.05, 0.95);
    let y = g.constant::<E>(&[T, C], 0.0, 1.0);
    let w = g.constant::<E>(&[T, C], 0.1, 2.0);
    let pc = p.clone();
    Ok(World {
        params: vec![p],
        loss: Box::new(move || pc.bce(&y, Some(&w))),
    })
}

fn module_params<E: Elem>(m: &impl crate::nn::Module<E>) -> Vec<Tensor<E>> {
    m.params()
}

fn comp_attention<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let params = AttentionParams::<E>::new(g.rng(), 16, 4)?;
    let q = g.param::<E>(&[T, 16], -1.0, 1.0);
    let kv = g.param::<E>(&[T, 16], -1.0, 1.0);
    let r = g.constant::<E>(&[T, 16], -1.0, 1.0);
    let mut all = module_params(&params);
    all.push(q.clone());
    all.push(kv.clone());
    Ok(World {
        params: all,
        loss: Box::new(move || project(&multi_head_attention(&q, &kv, &kv, &params)?, &r)),
    })
}

fn comp_han_layer<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let params = HanLayerParams::<E>::new(g.rng(), 16, 4)?;
    let fv = g.param::<E>(&[T, 16], -1.0, 1.0);
    let fa = g.param::<E>(&[T, 16], -1.0, 1.0);
    let rv = g.constant::<E>(&[T, 16], -1.0, 1.0);
    let ra = g.constant::<E>(&[T, 16], -1.0, 1.0);
    let mut all = module_params(&params);
    all.push(fv.clone());
    all.push(fa.clone());
    Ok(World {
        params: all,
        loss: Box::new(move || {
            let (v, a) = han_layer(&fv, &fa, &params)?;
            project(&v, &rv)?.add(&project(&a, &ra)?)
        }),
    })
}

fn comp_encoder_stack<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let cfg = EncoderConfig {
        blocks: 2,
        ..EncoderConfig::default()
    };
    let blocks: Vec<EncoderBlockParams<E>> = (0..2)
        .map(|_| EncoderBlockParams::new(g.rng(), 16, &cfg))
        .collect::<Result<_>>()?;
    // Perturb the norm parameters so their gradients are not at a symmetric point.
    for b in &blocks {
        for p in [&b.norm1_gain, &b.norm2_gain] {
            for v in p.data_mut().iter_mut() {
                *v = E::from_f32(g.rng().random_range(0.7f32..1.3));
            }
        }
    }
    let x = g.param::<E>(&[T, 16], -1.0, 1.0);
    let r = g.constant::<E>(&[T, 16], -1.0, 1.0);
    let mut all: Vec<Tensor<E>> = blocks.iter().flat_map(module_params).collect();
    all.push(x.clone());
    Ok(World {
        params: all,
        loss: Box::new(move || {
            let mut h = x.clone();
            for b in &blocks {
                h = encoder_block(&h, b)?;
            }
            project(&h, &r)
        }),
    })
}

fn loss_temporal<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let cfg = PseudoLabelerConfig {
        encoder: EncoderConfig {
            blocks: 2,
            ..EncoderConfig::default()
        },
        dim_visual: 16,
        dim_audio: 12,
    };
    let model = PseudoLabelerModel::<E>::new(g.rng(), cfg)?;
    let inputs = EmbedInputs {
        visual: g.constant::<E>(&[T, 16], -1.0, 1.0),
        audio: g.constant::<E>(&[T, 12], -1.0, 1.0),
    };
    let text = TextTensors {
        visual: g.constant::<E>(&[C, 16], -0.5, 0.5),
        audio: g.constant::<E>(&[C, 12], -0.5, 0.5),
    };
    let mask = vec![1u8; C];
    let y = crate::pseudolabel::grid_tensor::<E>(&g.binary_grid(T, C, &mask))?;
    let params = module_params(&model);
    Ok(World {
        params,
        loss: Box::new(move || {
            let (zv, za) = model.logits(&inputs, &text)?;
            pretrain_loss(&zv, &za, &y)
        }),
    })
}

fn small_han<E: Elem>(g: &mut Gen) -> Result<HanModel<E>> {
    HanModel::new(
        g.rng(),
        HanConfig {
            dim_visual: 12,
            dim_audio: 10,
            hidden: 16,
            heads: 4,
            num_classes: C,
        },
    )
}

fn backbone<E: Elem>(g: &mut Gen) -> BackboneInputs<E> {
    BackboneInputs {
        visual: g.constant(&[T, 12], -1.0, 1.0),
        audio: g.constant(&[T, 10], -1.0, 1.0),
    }
}

fn video_target<E: Elem>(y: &[u8]) -> Result<Tensor<E>> {
    Tensor::from_f64([y.len()], &y.iter().map(|&b| f64::from(b)).collect::<Vec<_>>())
}

fn loss_video<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let model = small_han::<E>(&mut g)?;
    let inputs = backbone::<E>(&mut g);
    let y = video_target::<E>(&g.video_label(C))?;
    let params = module_params(&model);
    Ok(World {
        params,
        loss: Box::new(move || video_loss(&model.forward(&inputs)?.pool.video_probs, &y)),
    })
}

fn pseudo_world<E: Elem>(seed: u64, mode: LabelMode, weighted: bool) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let model = small_han::<E>(&mut g)?;
    let inputs = backbone::<E>(&mut g);
    let y = g.video_label(C);
    let set = g.pseudo_set(&y);
    let targets = PseudoTargets::<E>::new(&set)?;
    let weights = class_balance_weights([&set], 0.5)?;
    let params = module_params(&model);
    Ok(World {
        params,
        loss: Box::new(move || {
            let out = model.forward(&inputs)?;
            if weighted {
                let (tv, ta) = targets.for_mode(mode);
                weighted_soft_loss(&out.probs_visual, &out.probs_audio, tv, ta, &y, &weights)
            } else {
                pseudo_label_loss(&out.probs_visual, &out.probs_audio, &targets, mode)
            }
        }),
    })
}

fn loss_hard<E: Elem>(seed: u64) -> Result<World<E>> {
    pseudo_world(seed, LabelMode::Hard, false)
}

fn loss_soft<E: Elem>(seed: u64) -> Result<World<E>> {
    pseudo_world(seed, LabelMode::Soft, false)
}

fn loss_weighted_soft<E: Elem>(seed: u64) -> Result<World<E>> {
    pseudo_world(seed, LabelMode::Soft, true)
}

fn loss_mixup<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let model = small_han::<E>(&mut g)?;
    let inputs = [backbone::<E>(&mut g), backbone::<E>(&mut g)];
    let sets: Vec<PseudoLabelSet> = (0..2)
        .map(|_| {
            let y = g.video_label(C);
            g.pseudo_set(&y)
        })
        .collect();
    let targets: Vec<PseudoTargets<E>> = sets.iter().map(PseudoTargets::new).collect::<Result<_>>()?;
    let cfg = MixupConfig::default();
    let draw = crate::objectives::draw_mixup(2 * T, &cfg, g.rng())?;
    let params = module_params(&model);
    Ok(World {
        params,
        loss: Box::new(move || {
            let outs = [model.forward(&inputs[0])?, model.forward(&inputs[1])?];
            let fv = Tensor::concat(&[outs[0].features_visual.clone(), outs[1].features_visual.clone()], 0)?;
            let fa = Tensor::concat(&[outs[0].features_audio.clone(), outs[1].features_audio.clone()], 0)?;
            let lv = Tensor::concat(&[targets[0].soft_visual.clone(), targets[1].soft_visual.clone()], 0)?;
            let la = Tensor::concat(&[targets[0].soft_audio.clone(), targets[1].soft_audio.clone()], 0)?;
            let batch = mix_with(&fv, &fa, &lv, &la, &cfg, draw.clone())?;
            mixup_loss(&batch, &model.classifier)
        }),
    })
}

fn loss_total<E: Elem>(seed: u64) -> Result<World<E>> {
    let mut g = Gen::new(seed);
    let model = small_han::<E>(&mut g)?;
    let items: Vec<Stage2Item<E>> = (0..3)
        .map(|_| {
            let inputs = backbone::<E>(&mut g);
            let y = g.video_label(C);
            let set = g.pseudo_set(&y);
            Ok(Stage2Item {
                inputs,
                targets: PseudoTargets::new(&set)?,
                y: video_target(&y)?,
                video_labels: y,
            })
        })
        .collect::<Result<_>>()?;
    let sets: Vec<PseudoLabelSet> = {
        let mut g2 = Gen::new(seed ^ 1);
        (0..3).map(|_| {
            let y = g2.video_label(C);
            g2.pseudo_set(&y)
        }).collect()
    };
    let weights = class_balance_weights(&sets, 0.5)?;
    let obj = ObjectiveConfig::default();
    let params = module_params(&model);
    let draw_seed = g.rng().random::<u64>();
    Ok(World {
        params,
        loss: Box::new(move || {
            let refs: Vec<&Stage2Item<E>> = items.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
            Ok(stage2_batch_loss(&model, &refs, &obj, &weights, &mut rng)?.loss)
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wrong_sigmoid<E: Elem>(seed: u64) -> Result<World<E>> {
        unary_world(
            seed,
            |g| g.param(&[T, 4], -2.0, 2.0),
            |x| {
                x.map_custom(
                    "bad_sigmoid",
                    crate::tensor::ops::sigmoid_scalar,
                    // Missing the (1 - s) factor.
                    |v| crate::tensor::ops::sigmoid_scalar(v),
                )
            },
        )
    }

    fn right_sigmoid<E: Elem>(seed: u64) -> Result<World<E>> {
        unary_world(
            seed,
            |g| g.param(&[T, 4], -2.0, 2.0),
            |x| {
                x.map_custom("good_sigmoid", crate::tensor::ops::sigmoid_scalar, |v| {
                    let s = crate::tensor::ops::sigmoid_scalar(v);
                    s * (E::one() - s)
                })
            },
        )
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let bad = run_check(&check!("bad", wrong_sigmoid), 3);
        assert!(!bad.passed, "{bad:?}");
        assert!(bad.max_rel_err > 0.1);
        let good = run_check(&check!("good", right_sigmoid), 3);
        assert!(good.passed, "{good:?}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 0.0), 0.0);
        assert!((relative_error(1e-6, 1e-6, 0.0) - 1e-4).abs() < 1e-15);
        assert!((relative_error(1.0, 2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
