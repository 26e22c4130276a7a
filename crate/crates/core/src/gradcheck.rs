//! Finite-difference gradient checking.
//!
//! Central differences in plain `f64` cannot resolve gradients much below
//! `1e-6` at `epsilon = 1e-5`: rounding in the two loss values is divided by
//! `2 epsilon` and swamps the signal. Parameters whose gradient falls under
//! [`GradCheckConfig::refine_below`] are therefore re-differenced with the
//! same step through an independent forward pass in double-double
//! arithmetic (about 32 significant digits).

use std::ops::{Add, Div, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassWeights, Label, N_CHANNELS};
use crate::error::Result;
use crate::exec::{self, ExecPolicy};
use crate::features::{DeltaSeries, FeatureSample};
use crate::model::{
    fusion_backward, fusion_forward, DropoutMasks, FusionModel, HeadActivation, Mode, ModelConfig, Params, META_HIDDEN,
};
use crate::training::{derive_seed, weighted_ce_loss, PROB_FLOOR};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn mul_f64(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.hi, b);
        quick_two_sum(p, e + self.lo * b)
    }

    fn ldexp(self, k: i32) -> Dd {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    /// `e^a - 1` for `|a| <= ln 2 / 2`, accurate relative to the result.
    fn expm1_reduced(self) -> Dd {
        const SQUARINGS: i32 = 9;
        let r = self.ldexp(-SQUARINGS);
        let mut s = r;
        let mut term = r;
        for i in 2..40 {
            term = term * r / Dd::new(i as f64);
            s = s + term;
            if term.hi.abs() <= 1e-36 * s.hi.abs() {
                break;
            }
        }
        // (1 + s)^2 - 1 = s (s + 2)
        for _ in 0..SQUARINGS {
            s = s * (s + Dd::new(2.0));
        }
        s
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2.mul_f64(k);
        (r.expm1_reduced() + Dd::ONE).ldexp(k as i32)
    }

    pub fn exp_m1(self) -> Dd {
        if self.hi.abs() < 0.34 {
            self.expm1_reduced()
        } else {
            self.exp() - Dd::ONE
        }
    }

    pub fn ln(self) -> Dd {
        if self.hi.is_nan() || self.hi <= 0.0 {
            return Dd::new(f64::NAN);
        }
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn tanh(self) -> Dd {
        if self.hi < 0.0 {
            return -(-self).tanh();
        }
        if self.hi > 40.0 {
            return Dd::ONE;
        }
        if self.hi < 0.5 {
            let e = self.mul_f64(2.0).exp_m1();
            e / (e + Dd::new(2.0))
        } else {
            let e = self.mul_f64(-2.0).exp();
            (Dd::ONE - e) / (Dd::ONE + e)
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, b.hi);
        let (t1, t2) = two_sum(self.lo, b.lo);
        let s = quick_two_sum(s1, s2 + t1);
        quick_two_sum(s.hi, s.lo + t2)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        quick_two_sum(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Dd::new(q3)
    }
}

/// Scalar arithmetic the reference forward pass is generic over.
pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    fn sigmoid(self) -> Self {
        let one = Self::from_f64(1.0);
        if self.to_f64() >= 0.0 {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }

    fn relu(self) -> Self {
        if self.to_f64() > 0.0 {
            self
        } else {
            Self::from_f64(0.0)
        }
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

impl Real for Dd {
    fn from_f64(v: f64) -> Self {
        Dd::new(v)
    }
    fn to_f64(self) -> f64 {
        Dd::to_f64(self)
    }
    fn exp(self) -> Self {
        Dd::exp(self)
    }
    fn ln(self) -> Self {
        Dd::ln(self)
    }
    fn tanh(self) -> Self {
        Dd::tanh(self)
    }
}

/// Parameter tensors lifted to `T`, in [`Params::tensors`] order.
pub fn lift<T: Real>(params: &Params) -> Vec<Vec<T>> {
    params
        .tensors()
        .iter()
        .map(|t| t.iter().map(|&v| T::from_f64(v)).collect())
        .collect()
}

fn affine<T: Real>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let inp = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &br)| {
            w[r * inp..(r + 1) * inp]
                .iter()
                .zip(x)
                .fold(br, |acc, (&wi, &xi)| acc + wi * xi)
        })
        .collect()
}

fn masked<T: Real>(v: &mut [T], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        v.iter_mut().zip(m).for_each(|(x, &k)| *x = *x * T::from_f64(k));
    }
}

/// Final hidden state of branch `b` after dropout.
fn reference_branch<T: Real>(tensors: &[Vec<T>], b: usize, hd: usize, seq: &[f64], masks: &DropoutMasks) -> Vec<T> {
    let zero = T::from_f64(0.0);
    let (w_ih, w_hh, bias) = (&tensors[3 * b], &tensors[3 * b + 1], &tensors[3 * b + 2]);
    let mut h = vec![zero; hd];
    let mut c = vec![zero; hd];
    for &x in seq {
        let x = T::from_f64(x);
        let z: Vec<T> = (0..4 * hd)
            .map(|r| {
                let rec = w_hh[r * hd..(r + 1) * hd]
                    .iter()
                    .zip(&h)
                    .fold(zero, |acc, (&w, &hj)| acc + w * hj);
                bias[r] + w_ih[r] * x + rec
            })
            .collect();
        for k in 0..hd {
            let i = z[k].sigmoid();
            let f = z[hd + k].sigmoid();
            let g = z[2 * hd + k].tanh();
            let o = z[3 * hd + k].sigmoid();
            c[k] = f * c[k] + i * g;
            h[k] = o * c[k].tanh();
        }
    }
    masked(&mut h, &masks.branches[b]);
    h
}

/// First meta-data layer after dropout; `first` indexes its weights.
fn reference_meta1<T: Real>(tensors: &[Vec<T>], first: usize, meta_vec: &[f64], masks: &DropoutMasks) -> Vec<T> {
    let x: Vec<T> = meta_vec.iter().map(|&v| T::from_f64(v)).collect();
    let mut d1: Vec<T> = affine(&tensors[first], &tensors[first + 1], &x)
        .into_iter()
        .map(Real::relu)
        .collect();
    masked(&mut d1, &masks.meta1);
    d1
}

fn reference_meta2<T: Real>(tensors: &[Vec<T>], first: usize, d1: &[T], masks: &DropoutMasks) -> Vec<T> {
    let mut d2: Vec<T> = affine(&tensors[first + 2], &tensors[first + 3], d1)
        .into_iter()
        .map(Real::relu)
        .collect();
    masked(&mut d2, &masks.meta2);
    d2
}

fn reference_head<T: Real>(model: &FusionModel, tensors: &[Vec<T>], merged: &[T], label: Label, weight: f64) -> T {
    let n = tensors.len();
    let mut z = affine(&tensors[n - 2], &tensors[n - 1], merged);
    if model.config.head_activation == HeadActivation::Relu {
        z.iter_mut().for_each(|v| *v = v.relu());
    }
    let m = if z[0].to_f64() >= z[1].to_f64() { z[0] } else { z[1] };
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let p = e[label.index()] / (e[0] + e[1]);
    -T::from_f64(weight) * (p + T::from_f64(PROB_FLOOR)).ln()
}

/// Per-component outputs of the reference pass, so a perturbation of one
/// tensor only recomputes the component that owns it.
struct ReferenceParts<T> {
    branches: Vec<Vec<T>>,
    /// Both meta-data layer outputs.
    meta: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> ReferenceParts<T> {
    fn compute(model: &FusionModel, tensors: &[Vec<T>], sample: &FeatureSample, masks: &DropoutMasks) -> Self {
        let p = &model.params;
        ReferenceParts {
            branches: (0..p.branches.len())
                .map(|b| reference_branch(tensors, b, p.branches[b].hidden, &sample.deltas.channels[b], masks))
                .collect(),
            meta: p.meta.as_ref().map(|_| {
                let first = 3 * p.branches.len();
                let d1 = reference_meta1(tensors, first, &sample.meta_vec, masks);
                let d2 = reference_meta2(tensors, first, &d1, masks);
                (d1, d2)
            }),
        }
    }

    /// Loss after element `(ti, ei)` of `tensors` changed; everything that
    /// does not depend on it comes from the cached parts.
    #[allow(clippy::too_many_arguments)]
    fn loss_varying(
        &self,
        model: &FusionModel,
        tensors: &[Vec<T>],
        ti: usize,
        ei: usize,
        sample: &FeatureSample,
        weight: f64,
        masks: &DropoutMasks,
    ) -> T {
        let p = &model.params;
        let nb = p.branches.len();
        let mut merged = Vec::with_capacity(model.head_in());
        for (b, cached) in self.branches.iter().enumerate() {
            if ti / 3 == b && ti < 3 * nb {
                merged.extend(reference_branch(
                    tensors,
                    b,
                    p.branches[b].hidden,
                    &sample.deltas.channels[b],
                    masks,
                ));
            } else {
                merged.extend_from_slice(cached);
            }
        }
        if let Some((d1, d2)) = &self.meta {
            let first = 3 * nb;
            if ti == first || ti == first + 1 {
                let d1 = reference_meta1(tensors, first, &sample.meta_vec, masks);
                merged.extend(reference_meta2(tensors, first, &d1, masks));
            } else if ti == first + 2 || ti == first + 3 {
                // only one output unit depends on the perturbed element
                let r = if ti == first + 2 { ei / d1.len() } else { ei };
                let w = &tensors[first + 2][r * d1.len()..(r + 1) * d1.len()];
                let z = w
                    .iter()
                    .zip(d1)
                    .fold(tensors[first + 3][r], |acc, (&wi, &xi)| acc + wi * xi);
                let mut d2 = d2.clone();
                d2[r] = z.relu();
                if let Some(m) = &masks.meta2 {
                    d2[r] = d2[r] * T::from_f64(m[r]);
                }
                merged.extend(d2);
            } else {
                merged.extend_from_slice(d2);
            }
        }
        reference_head(model, tensors, &merged, sample.label, weight)
    }
}

/// Weighted cross-entropy of one sample, written independently of
/// [`fusion_forward`]. `tensors` follows the layout of `model.params`;
/// dropout multipliers are taken from `masks` instead of being drawn.
pub fn reference_loss<T: Real>(
    model: &FusionModel,
    tensors: &[Vec<T>],
    sample: &FeatureSample,
    weight: f64,
    masks: &DropoutMasks,
) -> T {
    let parts = ReferenceParts::compute(model, tensors, sample, masks);
    let merged: Vec<T> = parts
        .branches
        .into_iter()
        .flatten()
        .chain(parts.meta.into_iter().flat_map(|(_, d2)| d2))
        .collect();
    reference_head(model, tensors, &merged, sample.label, weight)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub mode: Mode,
    pub head_activation: HeadActivation,
    pub dropout_rate: f64,
    pub hidden: usize,
    pub in_dim: usize,
    pub seq_len: usize,
    pub epsilon: f64,
    pub tolerance: f64,
    /// Gradients smaller than this in magnitude are re-differenced in
    /// double-double. Zero disables refinement.
    pub refine_below: f64,
}

impl GradCheckConfig {
    pub fn new(seed: u64, mode: Mode, tolerance: f64) -> Self {
        GradCheckConfig {
            seed,
            mode,
            head_activation: HeadActivation::Identity,
            dropout_rate: 0.0,
            hidden: 10,
            in_dim: 6,
            seq_len: 5,
            epsilon: 1e-5,
            tolerance,
            refine_below: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub n_params: usize,
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst parameter.
    pub worst: (usize, usize),
    /// Worst error using only `f64` differences.
    pub max_rel_error_f64: f64,
    pub n_refined: usize,
    /// Meta units moved off the rectifier kink before comparing.
    pub kinks_cleared: usize,
    pub passed: bool,
}

/// Outcome of comparing one analytic gradient against finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub max_rel_error: f64,
    pub worst: (usize, usize),
    pub max_rel_error_f64: f64,
    pub n_refined: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of the sample loss over
/// every parameter, with dropout masks pinned by `dropout_seed`.
pub fn compare_with_finite_differences(
    model: &FusionModel,
    sample: &FeatureSample,
    weights: &ClassWeights,
    dropout_seed: u64,
    analytic: &Params,
    epsilon: f64,
    refine_below: f64,
) -> Result<Comparison> {
    let (_, cache) = fusion_forward(model, sample, true, dropout_seed)?;
    let masks = cache.dropout_masks();
    let weight = weights.get(sample.label);
    let mut probe = model.clone();
    let loss_at = |m: &FusionModel| -> Result<f64> {
        let (p, _) = fusion_forward(m, sample, true, dropout_seed)?;
        Ok(weighted_ce_loss(p, sample.label, weights))
    };
    let base: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| t.to_vec()).collect();
    let mut lifted: Vec<Vec<Dd>> = lift(&model.params);
    let parts = ReferenceParts::compute(model, &lifted, sample, &masks);
    let analytic = analytic.tensors();
    let mut out = Comparison {
        max_rel_error: 0.0,
        worst: (0, 0),
        max_rel_error_f64: 0.0,
        n_refined: 0,
    };
    for (ti, tensor) in base.iter().enumerate() {
        for (ei, &orig) in tensor.iter().enumerate() {
            probe.params.tensors_mut()[ti][ei] = orig + epsilon;
            let lp = loss_at(&probe)?;
            probe.params.tensors_mut()[ti][ei] = orig - epsilon;
            let lm = loss_at(&probe)?;
            probe.params.tensors_mut()[ti][ei] = orig;
            let numeric = (lp - lm) / (2.0 * epsilon);
            let a = analytic[ti][ei];
            let plain = rel_error(a, numeric);
            out.max_rel_error_f64 = out.max_rel_error_f64.max(plain);
            let err = if a.abs().max(numeric.abs()) < refine_below {
                out.n_refined += 1;
                let step = Dd::new(epsilon);
                lifted[ti][ei] = Dd::new(orig) + step;
                let lp = parts.loss_varying(model, &lifted, ti, ei, sample, weight, &masks);
                lifted[ti][ei] = Dd::new(orig) - step;
                let lm = parts.loss_varying(model, &lifted, ti, ei, sample, weight, &masks);
                lifted[ti][ei] = Dd::new(orig);
                rel_error(a, ((lp - lm) / step.mul_f64(2.0)).to_f64())
            } else {
                plain
            };
            if err > out.max_rel_error || err.is_nan() {
                out.max_rel_error = err;
                out.worst = (ti, ei);
            }
        }
    }
    Ok(out)
}

/// Random tiny model and sample for gradient checks.
pub fn grad_check_fixture(cfg: &GradCheckConfig) -> Result<(FusionModel, FeatureSample, ClassWeights)> {
    let model = FusionModel::init(ModelConfig {
        mode: cfg.mode,
        in_dim: cfg.in_dim,
        hidden: cfg.hidden,
        meta_hidden: META_HIDDEN,
        dropout_rate: cfg.dropout_rate,
        head_activation: cfg.head_activation,
        seed: cfg.seed,
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[7]));
    let channels = (0..N_CHANNELS)
        .map(|_| (0..cfg.seq_len).map(|_| rng.random_range(-1.0..=1.0)).collect())
        .collect();
    let sample = FeatureSample {
        video_id: "gradcheck".into(),
        deltas: DeltaSeries {
            video_id: "gradcheck".into(),
            channels,
            gap_flags: vec![false; cfg.seq_len],
            frame_index: (1..=cfg.seq_len as i64).collect(),
            timestamp: (1..=cfg.seq_len).map(|t| t as f64 * 0.25).collect(),
        },
        meta_vec: (0..cfg.in_dim).map(|_| rng.random_range(-2.0..=2.0)).collect(),
        label: if rng.random_bool(0.5) {
            Label::POSITIVE
        } else {
            Label::NEGATIVE
        },
    };
    let weights = ClassWeights([rng.random_range(0.5..3.0), rng.random_range(0.5..3.0)]);
    Ok((model, sample, weights))
}

/// Distance kept between every meta pre-activation and zero. A central
/// difference of step `eps` moves a pre-activation by at most `eps` times an
/// input of order one, so this leaves two orders of magnitude of slack.
const KINK_MARGIN: f64 = 1e-3;

/// Shifts meta-layer biases so every pre-activation within `margin` of the
/// rectifier kink ends up `2 * margin` away from it. Near the kink the loss
/// is not differentiable and central differences average the two one-sided
/// slopes. Returns the number of units moved.
fn clear_meta_kinks(model: &mut FusionModel, meta_vec: &[f64], masks: &DropoutMasks, margin: f64) -> usize {
    let Some(meta) = model.params.meta.as_mut() else {
        return 0;
    };
    let mut moved = 0;
    let mut nudge = |b: &mut [f64], z: &[f64]| {
        for (bi, &zi) in b.iter_mut().zip(z) {
            if zi.abs() < margin {
                *bi += (2.0 * margin).copysign(zi) - zi;
                moved += 1;
            }
        }
    };
    let z1 = affine(&meta.l1.w, &meta.l1.b, meta_vec);
    nudge(&mut meta.l1.b, &z1);
    let mut h1: Vec<f64> = affine(&meta.l1.w, &meta.l1.b, meta_vec)
        .into_iter()
        .map(Real::relu)
        .collect();
    masked(&mut h1, &masks.meta1);
    let z2 = affine(&meta.l2.w, &meta.l2.b, &h1);
    nudge(&mut meta.l2.b, &z2);
    moved
}

pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (mut model, sample, weights) = grad_check_fixture(cfg)?;
    let dropout_seed = derive_seed(cfg.seed, &[8]);
    let (_, mut cache) = fusion_forward(&model, &sample, true, dropout_seed)?;
    // masks depend only on the seed, so they survive the bias shifts below
    let kinks_cleared = clear_meta_kinks(&mut model, &sample.meta_vec, &cache.dropout_masks(), KINK_MARGIN);
    if kinks_cleared > 0 {
        cache = fusion_forward(&model, &sample, true, dropout_seed)?.1;
    }
    if cfg.head_activation == HeadActivation::Relu {
        // With both scores rectified away every gradient is zero and the
        // check says nothing. Pin the scores to +-0.5 so exactly one class
        // passes and neither sits near the kink.
        let z = cache.scores();
        let top = usize::from(z[1] > z[0]);
        model.params.head.b[top] += 0.5 - z[top];
        model.params.head.b[1 - top] += -0.5 - z[1 - top];
        cache = fusion_forward(&model, &sample, true, dropout_seed)?.1;
    }
    let analytic = fusion_backward(&model, &sample, weights.get(sample.label), &cache)?;
    let cmp = compare_with_finite_differences(
        &model,
        &sample,
        &weights,
        dropout_seed,
        &analytic,
        cfg.epsilon,
        cfg.refine_below,
    )?;
    Ok(GradCheckReport {
        config: cfg.clone(),
        n_params: model.params.len(),
        max_rel_error: cmp.max_rel_error,
        worst: cmp.worst,
        max_rel_error_f64: cmp.max_rel_error_f64,
        n_refined: cmp.n_refined,
        kinks_cleared,
        passed: cmp.max_rel_error < cfg.tolerance,
    })
}

/// The standard sweep: every mode and head activation, with and without
/// dropout, over several seeds (24 configurations).
pub fn grad_check_suite(base_seed: u64, tolerance: f64, policy: ExecPolicy) -> Result<Vec<GradCheckReport>> {
    let mut cfgs = Vec::new();
    for (i, mode) in Mode::ALL.into_iter().enumerate() {
        for head in [HeadActivation::Identity, HeadActivation::Relu] {
            for (j, dropout) in [0.0, 0.0, 0.2, 0.5].into_iter().enumerate() {
                let mut c = GradCheckConfig::new(derive_seed(base_seed, &[i as u64, j as u64]), mode, tolerance);
                c.head_activation = head;
                c.dropout_rate = dropout;
                cfgs.push(c);
            }
        }
    }
    exec::try_map(policy, &cfgs, grad_check)
}
