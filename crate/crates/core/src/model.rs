//! Late-fusion network.
//!
//! Eight single-unit-input LSTM branches (one per landmark channel) and a
//! two-layer ReLU network over the encoded meta-data are concatenated and fed
//! to an affine head producing two class scores:
//!
//! ```text
//! channel_c ──► LSTM_c ──► h_T ─┐
//!                               ├─► concat ──► W·m + b ──► [relu] ──► softmax
//! meta ──► relu(W1) ──► relu(W2)┘
//! ```
//!
//! Inverted dropout is applied to every branch output and to both meta hidden
//! layers in training mode. All arithmetic is `f64`.

use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::N_CHANNELS;
use crate::error::{Error, Result};
use crate::features::FeatureSample;
use crate::training::weighted_ce_grad;

pub const LSTM_HIDDEN: usize = 10;
pub const META_HIDDEN: [usize; 2] = [128, 64];
pub const N_CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FacialOnly,
    MetaOnly,
    Merged,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Merged, Mode::FacialOnly, Mode::MetaOnly];

    pub fn uses_face(self) -> bool {
        self != Mode::MetaOnly
    }

    pub fn uses_meta(self) -> bool {
        self != Mode::FacialOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::FacialOnly => "facial_only",
            Mode::MetaOnly => "meta_only",
            Mode::Merged => "merged",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "facial_only" | "facial" => Ok(Mode::FacialOnly),
            "meta_only" | "meta" => Ok(Mode::MetaOnly),
            "merged" => Ok(Mode::Merged),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    Relu,
    #[default]
    Identity,
}

impl std::str::FromStr for HeadActivation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(HeadActivation::Relu),
            "identity" => Ok(HeadActivation::Identity),
            other => Err(Error::Config(format!("unknown head activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Length of the encoded meta vector.
    pub in_dim: usize,
    pub hidden: usize,
    pub meta_hidden: [usize; 2],
    pub dropout_rate: f64,
    pub head_activation: HeadActivation,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(mode: Mode, in_dim: usize, dropout_rate: f64) -> Self {
        ModelConfig {
            mode,
            in_dim,
            hidden: LSTM_HIDDEN,
            meta_hidden: META_HIDDEN,
            dropout_rate,
            head_activation: HeadActivation::default(),
            seed: 0,
        }
    }

    pub fn head_in(&self) -> usize {
        let face = if self.mode.uses_face() {
            N_CHANNELS * self.hidden
        } else {
            0
        };
        let meta = if self.mode.uses_meta() { self.meta_hidden[1] } else { 0 };
        face + meta
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.mode.uses_meta() && self.in_dim == 0 {
            return Err(Error::Config("meta input dimension must be >= 1".into()));
        }
        if self.hidden == 0 || self.meta_hidden.contains(&0) {
            return Err(Error::Config("hidden sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Affine layer with row-major `(out, inp)` weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub out: usize,
    pub inp: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            out,
            inp,
            w: vec![0.0; out * inp],
            b: vec![0.0; out],
        }
    }

    fn uniform(out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut d = Dense::zeros(out, inp);
        fill_uniform(&mut d.w, inp, rng);
        fill_uniform(&mut d.b, inp, rng);
        d
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        self.w
            .chunks_exact(self.inp)
            .zip(&self.b)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &[f64], dz: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inp];
        for (r, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[r] += g;
            let row = r * self.inp..(r + 1) * self.inp;
            for ((gw, w), (xi, dxi)) in grad.w[row.clone()]
                .iter_mut()
                .zip(&self.w[row])
                .zip(x.iter().zip(dx.iter_mut()))
            {
                *gw += g * xi;
                *dxi += g * w;
            }
        }
        dx
    }
}

/// Single-layer LSTM over a scalar input sequence. Gate blocks are stacked
/// in the order input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub hidden: usize,
    pub w_ih: Vec<f64>,
    pub w_hh: Vec<f64>,
    pub b: Vec<f64>,
}

/// Activations of the non-masked steps of one LSTM run.
#[derive(Clone, Debug)]
pub struct LstmTrace {
    xs: Vec<f64>,
    /// Post-activation gates, `4H` per step.
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

impl LstmTrace {
    pub fn steps(&self) -> usize {
        self.xs.len()
    }

    pub fn final_hidden(&self, hidden: usize) -> Vec<f64> {
        let n = self.h.len();
        if n == 0 {
            vec![0.0; hidden]
        } else {
            self.h[n - hidden..].to_vec()
        }
    }
}

impl Lstm {
    fn zeros(hidden: usize) -> Self {
        Lstm {
            hidden,
            w_ih: vec![0.0; 4 * hidden],
            w_hh: vec![0.0; 4 * hidden * hidden],
            b: vec![0.0; 4 * hidden],
        }
    }

    fn uniform(hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = 1 + hidden;
        let mut l = Lstm::zeros(hidden);
        fill_uniform(&mut l.w_ih, fan_in, rng);
        fill_uniform(&mut l.w_hh, fan_in, rng);
        fill_uniform(&mut l.b, fan_in, rng);
        l
    }

    /// Runs the cell from zero state. Steps with `mask[t] == false` leave
    /// the state untouched.
    pub fn run(&self, seq: &[f64], mask: Option<&[bool]>) -> LstmTrace {
        let hd = self.hidden;
        let active = |t: usize| mask.is_none_or(|m| m[t]);
        let n = (0..seq.len()).filter(|&t| active(t)).count();
        let mut tr = LstmTrace {
            xs: Vec::with_capacity(n),
            gates: Vec::with_capacity(n * 4 * hd),
            c: Vec::with_capacity(n * hd),
            tanh_c: Vec::with_capacity(n * hd),
            h: Vec::with_capacity(n * hd),
        };
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut z = vec![0.0; 4 * hd];
        for (t, &x) in seq.iter().enumerate() {
            if !active(t) {
                continue;
            }
            for (r, zr) in z.iter_mut().enumerate() {
                *zr = self.b[r] + self.w_ih[r] * x + dot(&self.w_hh[r * hd..(r + 1) * hd], &h);
            }
            for k in 0..hd {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[hd + k]);
                let g = z[2 * hd + k].tanh();
                let o = sigmoid(z[3 * hd + k]);
                z[k] = i;
                z[hd + k] = f;
                z[2 * hd + k] = g;
                z[3 * hd + k] = o;
                c[k] = f * c[k] + i * g;
                h[k] = o * c[k].tanh();
            }
            tr.xs.push(x);
            tr.gates.extend_from_slice(&z);
            tr.c.extend_from_slice(&c);
            tr.tanh_c.extend(c.iter().map(|v| v.tanh()));
            tr.h.extend_from_slice(&h);
        }
        tr
    }

    /// Backpropagation through time from `dh_final`, the loss gradient with
    /// respect to the last hidden state.
    fn backward(&self, tr: &LstmTrace, dh_final: &[f64], grad: &mut Lstm) {
        let hd = self.hidden;
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0.0; hd];
        let mut dz = vec![0.0; 4 * hd];
        let zero = vec![0.0; hd];
        for t in (0..tr.steps()).rev() {
            let gates = &tr.gates[t * 4 * hd..(t + 1) * 4 * hd];
            let tanh_c = &tr.tanh_c[t * hd..(t + 1) * hd];
            let (h_prev, c_prev) = if t == 0 {
                (&zero[..], &zero[..])
            } else {
                (&tr.h[(t - 1) * hd..t * hd], &tr.c[(t - 1) * hd..t * hd])
            };
            for k in 0..hd {
                let (i, f, g, o) = (gates[k], gates[hd + k], gates[2 * hd + k], gates[3 * hd + k]);
                let tc = tanh_c[k];
                dc[k] += dh[k] * o * (1.0 - tc * tc);
                dz[k] = dc[k] * g * i * (1.0 - i);
                dz[hd + k] = dc[k] * c_prev[k] * f * (1.0 - f);
                dz[2 * hd + k] = dc[k] * i * (1.0 - g * g);
                dz[3 * hd + k] = dh[k] * tc * o * (1.0 - o);
                dc[k] *= f;
            }
            let x = tr.xs[t];
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (r, &g) in dz.iter().enumerate() {
                grad.w_ih[r] += g * x;
                grad.b[r] += g;
                let row = r * hd..(r + 1) * hd;
                for ((gw, w), (hp, dhj)) in grad.w_hh[row.clone()]
                    .iter_mut()
                    .zip(&self.w_hh[row])
                    .zip(h_prev.iter().zip(dh.iter_mut()))
                {
                    *gw += g * hp;
                    *dhj += g * w;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaNet {
    pub l1: Dense,
    pub l2: Dense,
}

/// All trainable tensors. Gradients share this layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub branches: Vec<Lstm>,
    pub meta: Option<MetaNet>,
    pub head: Dense,
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            branches: self.branches.iter().map(|b| Lstm::zeros(b.hidden)).collect(),
            meta: self.meta.as_ref().map(|m| MetaNet {
                l1: Dense::zeros(m.l1.out, m.l1.inp),
                l2: Dense::zeros(m.l2.out, m.l2.inp),
            }),
            head: Dense::zeros(self.head.out, self.head.inp),
        }
    }

    /// Tensors in a fixed order: branches, meta layers, head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for b in &self.branches {
            v.extend([&b.w_ih[..], &b.w_hh[..], &b.b[..]]);
        }
        if let Some(m) = &self.meta {
            v.extend([&m.l1.w[..], &m.l1.b[..], &m.l2.w[..], &m.l2.b[..]]);
        }
        v.extend([&self.head.w[..], &self.head.b[..]]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.branches {
            v.extend([&mut b.w_ih[..], &mut b.w_hh[..], &mut b.b[..]]);
        }
        if let Some(m) = &mut self.meta {
            v.extend([&mut m.l1.w[..], &mut m.l1.b[..], &mut m.l2.w[..], &mut m.l2.b[..]]);
        }
        v.extend([&mut self.head.w[..], &mut self.head.b[..]]);
        v
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct FusionModel {
    pub config: ModelConfig,
    pub params: Params,
}

pub fn init_model(seed: u64, in_dim: usize, mode: Mode, dropout_rate: f64) -> Result<FusionModel> {
    let mut config = ModelConfig::new(mode, in_dim, dropout_rate);
    config.seed = seed;
    FusionModel::init(config)
}

impl FusionModel {
    /// Uniform `±1/sqrt(fan_in)` initialization, drawn in tensor order from a
    /// generator seeded by `config.seed`. Absent components consume no draws,
    /// so branch weights agree across modes for a given seed.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let branches = if config.mode.uses_face() {
            (0..N_CHANNELS)
                .map(|_| Lstm::uniform(config.hidden, &mut rng))
                .collect()
        } else {
            Vec::new()
        };
        let meta = config.mode.uses_meta().then(|| MetaNet {
            l1: Dense::uniform(config.meta_hidden[0], config.in_dim, &mut rng),
            l2: Dense::uniform(config.meta_hidden[1], config.meta_hidden[0], &mut rng),
        });
        let head = Dense::uniform(N_CLASSES, config.head_in(), &mut rng);
        Ok(FusionModel {
            config,
            params: Params { branches, meta, head },
        })
    }

    pub fn head_in(&self) -> usize {
        self.params.head.inp
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let p = &self.params;
        let want_branches = if c.mode.uses_face() { N_CHANNELS } else { 0 };
        let bad = |what: String| Err(Error::Shape(what));
        if p.branches.len() != want_branches {
            return bad(format!("expected {want_branches} branches, found {}", p.branches.len()));
        }
        for b in &p.branches {
            let h = c.hidden;
            if b.hidden != h || b.w_ih.len() != 4 * h || b.w_hh.len() != 4 * h * h || b.b.len() != 4 * h {
                return bad("recurrent branch shape".into());
            }
        }
        match (&p.meta, c.mode.uses_meta()) {
            (Some(m), true) => {
                if (m.l1.inp, m.l1.out, m.l2.inp, m.l2.out)
                    != (c.in_dim, c.meta_hidden[0], c.meta_hidden[0], c.meta_hidden[1])
                {
                    return bad("meta network shape".into());
                }
            }
            (None, false) => {}
            _ => return bad("meta network presence does not match mode".into()),
        }
        if (p.head.out, p.head.inp) != (N_CLASSES, c.head_in()) {
            return bad(format!("head must be {}x{}", N_CLASSES, c.head_in()));
        }
        if !p.all_finite() {
            return bad("non-finite parameter".into());
        }
        Ok(())
    }
}

pub fn branch_forward(params: &Lstm, seq: &[f64]) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Err(Error::Shape("recurrent branch needs a non-empty sequence".into()));
    }
    Ok(params.run(seq, None).final_hidden(params.hidden))
}

/// Padded variant: `mask[t] == false` marks padding. The result equals
/// [`branch_forward`] on the unpadded sequence.
pub fn branch_forward_masked(params: &Lstm, seq: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if seq.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} steps but {} mask entries",
            seq.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Shape("recurrent branch needs at least one unmasked step".into()));
    }
    Ok(params.run(seq, Some(mask)).final_hidden(params.hidden))
}

pub fn meta_forward(params: &MetaNet, meta_vec: &[f64]) -> Result<Vec<f64>> {
    if meta_vec.len() != params.l1.inp {
        return Err(Error::Shape(format!(
            "meta vector has length {}, expected {}",
            meta_vec.len(),
            params.l1.inp
        )));
    }
    let h1 = relu(params.l1.forward(meta_vec));
    Ok(relu(params.l2.forward(&h1)))
}

#[derive(Clone, Debug)]
struct MetaCache {
    x: Vec<f64>,
    z1: Vec<f64>,
    d1: Vec<f64>,
    mask1: Option<Vec<f64>>,
    z2: Vec<f64>,
    mask2: Option<Vec<f64>>,
}

/// Everything backward needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    traces: Vec<LstmTrace>,
    branch_masks: Vec<Option<Vec<f64>>>,
    meta: Option<MetaCache>,
    merged: Vec<f64>,
    z: [f64; N_CLASSES],
    probs: [f64; N_CLASSES],
}

impl ForwardCache {
    /// Head input after dropout.
    pub fn merged(&self) -> &[f64] {
        &self.merged
    }

    /// Head scores before the optional rectifier.
    pub fn scores(&self) -> [f64; N_CLASSES] {
        self.z
    }

    pub fn probs(&self) -> [f64; N_CLASSES] {
        self.probs
    }

    pub fn dropout_masks(&self) -> DropoutMasks {
        let (meta1, meta2) = match &self.meta {
            Some(m) => (m.mask1.clone(), m.mask2.clone()),
            None => (None, None),
        };
        DropoutMasks {
            branches: self.branch_masks.clone(),
            meta1,
            meta2,
        }
    }
}

/// Multipliers applied by dropout in one forward pass: 0 for dropped units,
/// `1/(1-p)` for survivors. `None` when dropout was inactive.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    pub branches: Vec<Option<Vec<f64>>>,
    pub meta1: Option<Vec<f64>>,
    pub meta2: Option<Vec<f64>>,
}

/// Inverted-dropout masks: survivors are scaled by `1/(1-p)`.
struct Dropout {
    rng: Option<ChaCha8Rng>,
    keep_scale: f64,
    rate: f64,
}

impl Dropout {
    fn new(rate: f64, train_mode: bool, seed: u64) -> Self {
        let active = train_mode && rate > 0.0;
        Dropout {
            rng: active.then(|| ChaCha8Rng::seed_from_u64(seed)),
            keep_scale: 1.0 / (1.0 - rate),
            rate,
        }
    }

    fn mask(&mut self, n: usize) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        Some(
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < self.rate {
                        0.0
                    } else {
                        self.keep_scale
                    }
                })
                .collect(),
        )
    }
}

fn apply_mask(v: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        v.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
    }
}

fn check_sample(model: &FusionModel, sample: &FeatureSample) -> Result<()> {
    let mode = model.config.mode;
    let bad = |msg: String| {
        Err(Error::Video {
            video_id: sample.video_id.clone(),
            msg,
        })
    };
    if mode.uses_face() {
        let ch = &sample.deltas.channels;
        if ch.len() != N_CHANNELS {
            return bad(format!("{mode} model needs {N_CHANNELS} channels, found {}", ch.len()));
        }
        if ch.iter().any(|c| c.is_empty()) {
            return bad("empty delta channel".into());
        }
    }
    if mode.uses_meta() && sample.meta_vec.len() != model.config.in_dim {
        return bad(format!(
            "{mode} model needs a meta vector of length {}, found {}",
            model.config.in_dim,
            sample.meta_vec.len()
        ));
    }
    Ok(())
}

pub fn fusion_forward(
    model: &FusionModel,
    sample: &FeatureSample,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<([f64; N_CLASSES], ForwardCache)> {
    check_sample(model, sample)?;
    let cfg = &model.config;
    let p = &model.params;
    let mut drop = Dropout::new(cfg.dropout_rate, train_mode, dropout_seed);
    let mut merged = Vec::with_capacity(model.head_in());

    let mut traces = Vec::with_capacity(p.branches.len());
    let mut branch_masks = Vec::with_capacity(p.branches.len());
    for (lstm, seq) in p.branches.iter().zip(&sample.deltas.channels) {
        let tr = lstm.run(seq, None);
        let mut h = tr.final_hidden(lstm.hidden);
        let mask = drop.mask(h.len());
        apply_mask(&mut h, &mask);
        merged.extend_from_slice(&h);
        traces.push(tr);
        branch_masks.push(mask);
    }

    let meta = p.meta.as_ref().map(|m| {
        let z1 = m.l1.forward(&sample.meta_vec);
        let mut d1 = relu(z1.clone());
        let mask1 = drop.mask(d1.len());
        apply_mask(&mut d1, &mask1);
        let z2 = m.l2.forward(&d1);
        let mut d2 = relu(z2.clone());
        let mask2 = drop.mask(d2.len());
        apply_mask(&mut d2, &mask2);
        merged.extend_from_slice(&d2);
        MetaCache {
            x: sample.meta_vec.clone(),
            z1,
            d1,
            mask1,
            z2,
            mask2,
        }
    });

    let zv = p.head.forward(&merged);
    let z = [zv[0], zv[1]];
    let a = match cfg.head_activation {
        HeadActivation::Relu => z.map(|v| v.max(0.0)),
        HeadActivation::Identity => z,
    };
    let probs = softmax(a);
    Ok((
        probs,
        ForwardCache {
            traces,
            branch_masks,
            meta,
            merged,
            z,
            probs,
        },
    ))
}

/// Gradient of the class-weighted cross-entropy of one sample with respect
/// to every parameter.
pub fn fusion_backward(
    model: &FusionModel,
    sample: &FeatureSample,
    class_weight: f64,
    cache: &ForwardCache,
) -> Result<Params> {
    check_sample(model, sample)?;
    let mut grad = model.params.zeros_like();
    let da = weighted_ce_grad(cache.probs, sample.label, class_weight);
    backward_from_scores(model, cache, da, &mut grad);
    Ok(grad)
}

/// Backpropagates `da`, the loss gradient with respect to the post-activation
/// head scores, accumulating into `grad`.
pub fn backward_from_scores(model: &FusionModel, cache: &ForwardCache, da: [f64; N_CLASSES], grad: &mut Params) {
    let p = &model.params;
    let dz: Vec<f64> = match model.config.head_activation {
        HeadActivation::Relu => (0..N_CLASSES)
            .map(|k| if cache.z[k] > 0.0 { da[k] } else { 0.0 })
            .collect(),
        HeadActivation::Identity => da.to_vec(),
    };
    let dm = p.head.backward(&cache.merged, &dz, &mut grad.head);

    let mut offset = 0;
    for (b, lstm) in p.branches.iter().enumerate() {
        let hd = lstm.hidden;
        let mut dh = dm[offset..offset + hd].to_vec();
        apply_mask(&mut dh, &cache.branch_masks[b]);
        lstm.backward(&cache.traces[b], &dh, &mut grad.branches[b]);
        offset += hd;
    }

    if let (Some(m), Some(mc), Some(mg)) = (&p.meta, &cache.meta, grad.meta.as_mut()) {
        let mut dz2 = dm[offset..].to_vec();
        apply_mask(&mut dz2, &mc.mask2);
        relu_grad(&mut dz2, &mc.z2);
        let mut dz1 = m.l2.backward(&mc.d1, &dz2, &mut mg.l2);
        apply_mask(&mut dz1, &mc.mask1);
        relu_grad(&mut dz1, &mc.z1);
        // input gradient unused
        m.l1.backward(&mc.x, &dz1, &mut mg.l1);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn relu(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    v
}

fn relu_grad(d: &mut [f64], z: &[f64]) {
    d.iter_mut().zip(z).for_each(|(g, &z)| {
        if z <= 0.0 {
            *g = 0.0
        }
    });
}

pub fn softmax(a: [f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let m = a[0].max(a[1]);
    let e = a.map(|v| (v - m).exp());
    let s = e[0] + e[1];
    e.map(|v| v / s)
}

fn fill_uniform(v: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    v.iter_mut().for_each(|x| *x = dist.sample(rng));
}

// Checkpoint layout: weight matrices as nested `[out][in]` arrays.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseRepr {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LstmRepr {
    weight_ih: Vec<Vec<f64>>,
    weight_hh: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRepr {
    layer1: DenseRepr,
    layer2: DenseRepr,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsRepr {
    branches: Vec<LstmRepr>,
    meta: Option<MetaRepr>,
    head: DenseRepr,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRepr {
    config: ModelConfig,
    params: ParamsRepr,
}

fn rows(flat: &[f64], cols: usize) -> Vec<Vec<f64>> {
    flat.chunks_exact(cols).map(<[f64]>::to_vec).collect()
}

fn unrows(rows: Vec<Vec<f64>>, cols: usize) -> Result<Vec<f64>> {
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape(format!("ragged matrix, expected rows of {cols}")));
    }
    Ok(rows.concat())
}

impl From<&Dense> for DenseRepr {
    fn from(d: &Dense) -> Self {
        DenseRepr {
            weight: rows(&d.w, d.inp),
            bias: d.b.clone(),
        }
    }
}

impl TryFrom<DenseRepr> for Dense {
    type Error = Error;
    fn try_from(r: DenseRepr) -> Result<Self> {
        let out = r.weight.len();
        let inp = r.weight.first().map_or(0, Vec::len);
        if r.bias.len() != out {
            return Err(Error::Shape("bias length differs from weight rows".into()));
        }
        Ok(Dense {
            out,
            inp,
            w: unrows(r.weight, inp)?,
            b: r.bias,
        })
    }
}

impl From<FusionModel> for ModelRepr {
    fn from(m: FusionModel) -> Self {
        let p = &m.params;
        ModelRepr {
            params: ParamsRepr {
                branches: p
                    .branches
                    .iter()
                    .map(|b| LstmRepr {
                        weight_ih: rows(&b.w_ih, 1),
                        weight_hh: rows(&b.w_hh, b.hidden),
                        bias: b.b.clone(),
                    })
                    .collect(),
                meta: p.meta.as_ref().map(|mn| MetaRepr {
                    layer1: (&mn.l1).into(),
                    layer2: (&mn.l2).into(),
                }),
                head: (&p.head).into(),
            },
            config: m.config,
        }
    }
}

impl TryFrom<ModelRepr> for FusionModel {
    type Error = Error;
    fn try_from(r: ModelRepr) -> Result<Self> {
        let hidden = r.config.hidden;
        let branches = r
            .params
            .branches
            .into_iter()
            .map(|b| {
                Ok(Lstm {
                    hidden,
                    w_ih: unrows(b.weight_ih, 1)?,
                    w_hh: unrows(b.weight_hh, hidden)?,
                    b: b.bias,
                })
            })
            .collect::<Result<_>>()?;
        let meta = match r.params.meta {
            Some(m) => Some(MetaNet {
                l1: m.layer1.try_into()?,
                l2: m.layer2.try_into()?,
            }),
            None => None,
        };
        let model = FusionModel {
            config: r.config,
            params: Params {
                branches,
                meta,
                head: r.params.head.try_into()?,
            },
        };
        model.check_shapes()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Label;
    use crate::features::DeltaSeries;

    fn sample(seq_len: usize, in_dim: usize, seed: u64) -> FeatureSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = (0..N_CHANNELS)
            .map(|_| (0..seq_len).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        FeatureSample {
            video_id: "v".into(),
            deltas: DeltaSeries {
                video_id: "v".into(),
                channels,
                gap_flags: vec![false; seq_len],
                frame_index: (1..=seq_len as i64).collect(),
                timestamp: (1..=seq_len).map(|t| t as f64 * 0.25).collect(),
            },
            meta_vec: (0..in_dim).map(|_| rng.random_range(-2.0..=2.0)).collect(),
            label: Label::POSITIVE,
        }
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn init_is_deterministic_and_mode_shaped() {
        let a = init_model(7, 22, Mode::Merged, 0.2).unwrap();
        let b = init_model(7, 22, Mode::Merged, 0.2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(8, 22, Mode::Merged, 0.2).unwrap());
        assert_eq!(a.head_in(), 144);
        assert_eq!(init_model(7, 22, Mode::FacialOnly, 0.2).unwrap().head_in(), 80);
        assert_eq!(init_model(7, 22, Mode::MetaOnly, 0.2).unwrap().head_in(), 64);
        assert!(init_model(7, 22, Mode::Merged, 1.0).is_err());
        assert!(init_model(7, 22, Mode::Merged, -0.1).is_err());
        assert!(init_model(7, 0, Mode::MetaOnly, 0.0).is_err());
        assert!(init_model(7, 0, Mode::FacialOnly, 0.0).is_ok());
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let m = init_model(3, 22, Mode::Merged, 0.0).unwrap();
        let lstm_bound = 1.0 / 11f64.sqrt();
        for b in &m.params.branches {
            assert!(b.w_hh.iter().chain(&b.w_ih).chain(&b.b).all(|v| v.abs() <= lstm_bound));
        }
        let meta = m.params.meta.as_ref().unwrap();
        assert!(meta.l1.w.iter().all(|v| v.abs() <= 1.0 / 22f64.sqrt()));
        assert!(meta.l2.w.iter().all(|v| v.abs() <= 1.0 / 128f64.sqrt()));
        assert!(m.params.head.w.iter().all(|v| v.abs() <= 1.0 / 144f64.sqrt()));
    }

    #[test]
    fn zero_input_zero_bias_fixed_point() {
        let mut l = Lstm::uniform(10, &mut ChaCha8Rng::seed_from_u64(1));
        l.b.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(branch_forward(&l, &[0.0; 6]).unwrap(), vec![0.0; 10]);
        assert!(branch_forward(&l, &[]).is_err());
    }

    #[test]
    fn one_unit_cell_matches_hand_evaluation() {
        // gates i, f, g, o
        let l = Lstm {
            hidden: 1,
            w_ih: vec![0.5, -0.3, 0.8, 0.2],
            w_hh: vec![0.1, 0.4, -0.6, 0.7],
            b: vec![0.05, 0.2, -0.1, 0.0],
        };
        let x = 0.9;
        let step = |h: f64, c: f64| {
            let i = sig(0.05 + 0.5 * x + 0.1 * h);
            let f = sig(0.2 - 0.3 * x + 0.4 * h);
            let g = (-0.1 + 0.8 * x - 0.6 * h).tanh();
            let o = sig(0.0 + 0.2 * x + 0.7 * h);
            let c = f * c + i * g;
            (o * c.tanh(), c)
        };
        let (h1, c1) = step(0.0, 0.0);
        let (h2, _) = step(h1, c1);
        let one = branch_forward(&l, &[x]).unwrap()[0];
        let two = branch_forward(&l, &[x, x]).unwrap()[0];
        assert!((one - h1).abs() < 1e-15, "{one} vs {h1}");
        assert!((two - h2).abs() < 1e-15, "{two} vs {h2}");
        assert_ne!(one, two);
    }

    #[test]
    fn masked_padding_equals_unpadded() {
        let l = Lstm::uniform(10, &mut ChaCha8Rng::seed_from_u64(4));
        let seq = [0.3, -0.2, 0.9, 0.1];
        let want = branch_forward(&l, &seq).unwrap();
        let padded = [0.3, -0.2, 0.9, 0.1, 5.0, -7.0];
        let mask = [true, true, true, true, false, false];
        assert_eq!(branch_forward_masked(&l, &padded, &mask).unwrap(), want);
        let front = [9.0, 0.3, -0.2, 0.9, 0.1];
        let mask = [false, true, true, true, true];
        assert_eq!(branch_forward_masked(&l, &front, &mask).unwrap(), want);
        assert!(branch_forward_masked(&l, &padded, &[true]).is_err());
        assert!(branch_forward_masked(&l, &[1.0], &[false]).is_err());
    }

    #[test]
    fn meta_forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = MetaNet {
            l1: Dense::uniform(128, 6, &mut rng),
            l2: Dense::uniform(64, 128, &mut rng),
        };
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        assert!(meta_forward(&m, &x).unwrap().iter().all(|&v| v >= 0.0));
        assert!(meta_forward(&m, &x[..5]).is_err());
        m.l1.b.iter_mut().for_each(|v| *v = 0.0);
        m.l2.b.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(meta_forward(&m, &[0.0; 6]).unwrap(), vec![0.0; 64]);
    }

    #[test]
    fn meta_nonlinearity_witness() {
        // 1 -> 2 -> 1 toy: relu(w2 . relu(w1 x + b1) + b2)
        let toy = |w1: [f64; 2], x: f64| {
            let d = Dense {
                out: 2,
                inp: 1,
                w: w1.to_vec(),
                b: vec![0.5, -0.5],
            };
            let e = Dense {
                out: 1,
                inp: 2,
                w: vec![1.0, -1.0],
                b: vec![0.25],
            };
            meta_forward(&MetaNet { l1: d, l2: e }, &[x]).unwrap()[0]
        };
        // by hand: w1=(1,-1), x=1 gives h=(1.5, 0) and 1.5 + 0.25
        assert_eq!(toy([1.0, -1.0], 1.0), 1.75);
        // w1=(2,-2), x=2 gives h=(4.5, 0) and 4.5 + 0.25
        assert_eq!(toy([2.0, -2.0], 2.0), 4.75);
    }

    #[test]
    fn dropout_zero_train_equals_eval() {
        let m = init_model(9, 6, Mode::Merged, 0.0).unwrap();
        let s = sample(7, 6, 1);
        let (pt, _) = fusion_forward(&m, &s, true, 123).unwrap();
        let (pe, _) = fusion_forward(&m, &s, false, 0).unwrap();
        assert_eq!(pt, pe);
    }

    #[test]
    fn probabilities_are_normalized() {
        for mode in Mode::ALL {
            let m = init_model(2, 6, mode, 0.3).unwrap();
            for seed in 0..20 {
                let (p, _) = fusion_forward(&m, &sample(5, 6, seed), seed % 2 == 0, seed).unwrap();
                assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
                assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
        let p = softmax([1e308, -1e308]);
        assert_eq!(p, [1.0, 0.0]);
        assert!(softmax([800.0, 799.0]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn relu_head_saturation_gives_even_odds() {
        let mut m = init_model(2, 6, Mode::Merged, 0.0).unwrap();
        m.config.head_activation = HeadActivation::Relu;
        m.params.head.w.iter_mut().for_each(|v| *v = 0.0);
        m.params.head.b = vec![-1.0, -0.5];
        let (p, cache) = fusion_forward(&m, &sample(4, 6, 3), false, 0).unwrap();
        assert_eq!(p, [0.5, 0.5]);
        assert_eq!(cache.scores(), [-1.0, -0.5]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = init_model(5, 6, Mode::Merged, 0.5).unwrap();
        let s = sample(6, 6, 2);
        let a = fusion_forward(&m, &s, true, 77).unwrap();
        let b = fusion_forward(&m, &s, true, 77).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.merged(), b.1.merged());
        let c = fusion_forward(&m, &s, true, 78).unwrap();
        assert_ne!(a.1.merged(), c.1.merged());
    }

    #[test]
    fn mode_sample_mismatch_is_rejected() {
        let m = init_model(5, 6, Mode::Merged, 0.0).unwrap();
        assert!(fusion_forward(&m, &sample(4, 5, 0), false, 0).is_err());
        let mut s = sample(4, 6, 0);
        s.deltas.channels.pop();
        assert!(fusion_forward(&m, &s, false, 0).is_err());
        // meta-only ignores the face channels entirely
        let meta = init_model(5, 6, Mode::MetaOnly, 0.0).unwrap();
        assert!(fusion_forward(&meta, &s, false, 0).is_ok());
        let face = init_model(5, 6, Mode::FacialOnly, 0.0).unwrap();
        assert!(fusion_forward(&face, &sample(4, 0, 0), false, 0).is_ok());
    }

    #[test]
    fn zero_class_weight_gives_zero_gradient() {
        let m = init_model(5, 6, Mode::Merged, 0.2).unwrap();
        let s = sample(5, 6, 4);
        let (_, cache) = fusion_forward(&m, &s, true, 1).unwrap();
        let g = fusion_backward(&m, &s, 0.0, &cache).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let g = fusion_backward(&m, &s, 1.0, &cache).unwrap();
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn meta_only_has_no_branch_gradients() {
        let m = init_model(5, 6, Mode::MetaOnly, 0.0).unwrap();
        let s = sample(5, 6, 4);
        let (_, cache) = fusion_forward(&m, &s, false, 0).unwrap();
        let g = fusion_backward(&m, &s, 1.0, &cache).unwrap();
        assert!(g.branches.is_empty());
        let f = init_model(5, 6, Mode::FacialOnly, 0.0).unwrap();
        let (_, cache) = fusion_forward(&f, &s, false, 0).unwrap();
        assert!(fusion_backward(&f, &s, 1.0, &cache).unwrap().meta.is_none());
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let m = init_model(6, 6, Mode::Merged, 0.3).unwrap();
        let s = sample(5, 6, 8);
        let (_, eval) = fusion_forward(&m, &s, false, 0).unwrap();
        let want = eval.merged()[..N_CHANNELS * LSTM_HIDDEN].to_vec();
        let n = 4000;
        let mut sum = vec![0.0; want.len()];
        let mut sq = vec![0.0; want.len()];
        for seed in 0..n {
            let (_, c) = fusion_forward(&m, &s, true, seed).unwrap();
            for (k, &v) in c.merged()[..want.len()].iter().enumerate() {
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        for k in 0..want.len() {
            let mean = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - want[k]).abs() <= 5.0 * se + 1e-12,
                "unit {k}: {mean} vs {} (se {se})",
                want[k]
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for mode in Mode::ALL {
            let mut m = init_model(13, 9, mode, 0.25).unwrap();
            m.config.head_activation = HeadActivation::Relu;
            let json = serde_json::to_string(&m).unwrap();
            let back: FusionModel = serde_json::from_str(&json).unwrap();
            assert_eq!(back, m);
            assert_eq!(serde_json::to_string(&back).unwrap(), json);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = init_model(1, 4, Mode::Merged, 0.0).unwrap();
        m.save_json(&path).unwrap();
        assert_eq!(FusionModel::load_json(&path).unwrap(), m);
    }

    #[test]
    fn checkpoint_shape_errors() {
        let m = init_model(1, 4, Mode::Merged, 0.0).unwrap();
        let mut v: serde_json::Value = serde_json::to_value(&m).unwrap();
        v["config"]["in_dim"] = 5.into();
        assert!(serde_json::from_value::<FusionModel>(v.clone()).is_err());
        let mut v: serde_json::Value = serde_json::to_value(&m).unwrap();
        v["config"]["mode"] = "facial_only".into();
        assert!(serde_json::from_value::<FusionModel>(v).is_err());
        let mut v: serde_json::Value = serde_json::to_value(&m).unwrap();
        v["params"]["extra"] = 1.into();
        assert!(serde_json::from_value::<FusionModel>(v).is_err());
    }
}
