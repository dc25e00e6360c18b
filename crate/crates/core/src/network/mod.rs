//! Siamese two-view CNN and its multi-visit variants.
//!
//! Both views of every visit go through one shared conv stack and one
//! shared `branch_fc`; the two branch vectors are concatenated and fed to a
//! two-layer head. The fusion methods differ only in where the visits are
//! combined:
//!
//! | method | combination |
//! |---|---|
//! | `Baseline` | latest visit only |
//! | `AvgPrediction` | mean of per-visit logits |
//! | `ConvPooling` | elementwise max of per-visit features |
//! | `Tsm` | channel shifts across time between conv layers, latest visit read out |
//! | `Lstm` | bidirectional LSTM over per-visit features |
//!
//! Every method runs per-image kernels on the same code path, so on a
//! single visit the parameter-free variants reproduce the baseline bit for
//! bit.

pub(crate) mod card;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use card::ModelCard;

use crate::autograd::{serialize, Params, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, str_key};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    /// 2×2 max pooling after conv layer `i` when `pool_after[i]`.
    pub pool_after: Vec<bool>,
    /// Side length of the square model input.
    pub input_size: usize,
    pub branch_out: usize,
    pub head_hidden: usize,
    pub init_seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 64, 64, 128, 128, 256],
            kernel: 3,
            padding: 1,
            pool_after: vec![true; 7],
            input_size: 256,
            branch_out: 512,
            head_hidden: 256,
            init_seed: 0,
        }
    }
}

impl BaselineConfig {
    /// Seven narrow conv layers on 32×32 inputs, pooled down to 2×2. Small
    /// enough to train in seconds on one CPU core.
    pub fn compact() -> Self {
        Self {
            conv_channels: vec![8, 8, 16, 16, 16, 16, 16],
            pool_after: vec![true, true, true, true, false, false, false],
            input_size: 32,
            branch_out: 32,
            head_hidden: 32,
            ..Self::default()
        }
    }

    /// 8×8 inputs and 2-channel convs, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            conv_channels: vec![2; 7],
            pool_after: vec![true, true, false, false, false, false, true],
            input_size: 8,
            branch_out: 3,
            head_hidden: 4,
            ..Self::default()
        }
    }

    /// Spatial side length after the conv stack.
    pub fn final_side(&self) -> usize {
        let pools = self.pool_after.iter().filter(|&&p| p).count();
        self.input_size >> pools
    }

    /// Length of the flattened conv output fed to `branch_fc`.
    pub fn flat_features(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0) * self.final_side().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::invalid("conv_channels must be non-empty and positive"));
        }
        if self.pool_after.len() != self.conv_channels.len() {
            return Err(Error::invalid(format!(
                "pool_after has {} entries for {} conv layers",
                self.pool_after.len(),
                self.conv_channels.len()
            )));
        }
        if self.kernel == 0 || 2 * self.padding + 1 != self.kernel {
            return Err(Error::invalid(format!(
                "kernel {} with padding {} does not preserve spatial size",
                self.kernel, self.padding
            )));
        }
        let pools = self.pool_after.iter().filter(|&&p| p).count() as u32;
        if self.input_size == 0 || !self.input_size.is_multiple_of(2usize.pow(pools)) {
            return Err(Error::invalid(format!(
                "input size {} is not divisible by 2^{pools}",
                self.input_size
            )));
        }
        if self.branch_out == 0 || self.head_hidden == 0 {
            return Err(Error::invalid("branch_out and head_hidden must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    Baseline,
    AvgPrediction,
    ConvPooling,
    Tsm,
    Lstm,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] = [
        FusionKind::Baseline,
        FusionKind::AvgPrediction,
        FusionKind::ConvPooling,
        FusionKind::Tsm,
        FusionKind::Lstm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FusionKind::Baseline => "Baseline",
            FusionKind::AvgPrediction => "Avg. Prediction",
            FusionKind::ConvPooling => "Conv. Pooling",
            FusionKind::Tsm => "TSM",
            FusionKind::Lstm => "LSTM",
        }
    }

    /// True when the method adds parameters to the baseline.
    pub fn has_extra_params(self) -> bool {
        self == FusionKind::Lstm
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_', '.', ' '], "").as_str() {
            "baseline" => Ok(FusionKind::Baseline),
            "avgprediction" | "avgpred" | "avg" => Ok(FusionKind::AvgPrediction),
            "convpooling" | "convpool" => Ok(FusionKind::ConvPooling),
            "tsm" => Ok(FusionKind::Tsm),
            "lstm" => Ok(FusionKind::Lstm),
            _ => Err(Error::invalid(format!("unknown fusion method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionMethod {
    pub kind: FusionKind,
    /// Fraction of channels shifted each way by TSM.
    #[serde(default = "default_shift")]
    pub tsm_shift_fraction: f64,
    /// Hidden units per LSTM direction; `None` matches `branch_out`, which
    /// is the only value the head accepts.
    #[serde(default)]
    pub lstm_hidden: Option<usize>,
}

fn default_shift() -> f64 {
    0.125
}

impl FusionMethod {
    pub fn new(kind: FusionKind) -> Self {
        Self {
            kind,
            tsm_shift_fraction: default_shift(),
            lstm_hidden: None,
        }
    }

    pub fn with_shift(mut self, fraction: f64) -> Self {
        self.tsm_shift_fraction = fraction;
        self
    }
}

impl From<FusionKind> for FusionMethod {
    fn from(kind: FusionKind) -> Self {
        Self::new(kind)
    }
}

/// The two preprocessed views of one visit, each `[1,S,S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair<T: Scalar = f32> {
    pub sagittal: Tensor<T>,
    pub transverse: Tensor<T>,
}

impl<T: Scalar> ViewPair<T> {
    pub fn cast<U: Scalar>(&self) -> ViewPair<U> {
        ViewPair {
            sagittal: self.sagittal.cast(),
            transverse: self.transverse.cast(),
        }
    }
}

/// Layer layout and forward passes, independent of any weight values.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub config: BaselineConfig,
    pub method: FusionMethod,
    conv_names: Vec<(String, String)>,
}

const BRANCH: (&str, &str) = ("branch_fc.weight", "branch_fc.bias");
const HEAD1: (&str, &str) = ("head_fc1.weight", "head_fc1.bias");
const HEAD2: (&str, &str) = ("head_fc2.weight", "head_fc2.bias");
const LSTM_DIRS: [&str; 2] = ["lstm.fwd", "lstm.bwd"];

impl Architecture {
    pub fn new(config: BaselineConfig, method: FusionMethod) -> Result<Self> {
        config.validate()?;
        if !(0.0..=0.5).contains(&method.tsm_shift_fraction) {
            return Err(Error::invalid(format!(
                "TSM shift fraction must lie in [0, 0.5], got {}",
                method.tsm_shift_fraction
            )));
        }
        if let Some(h) = method.lstm_hidden {
            if h != config.branch_out {
                return Err(Error::invalid(format!(
                    "LSTM hidden size {h} must equal branch_out {} so the head input stays 2·branch_out",
                    config.branch_out
                )));
            }
        }
        let conv_names = (0..config.conv_channels.len())
            .map(|i| (format!("conv{}.weight", i + 1), format!("conv{}.bias", i + 1)))
            .collect();
        Ok(Self {
            config,
            method,
            conv_names,
        })
    }

    pub fn lstm_hidden(&self) -> usize {
        self.config.branch_out
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let k = c.kernel;
        let mut out = Vec::new();
        let mut c_in = 1;
        for ((w, b), &c_out) in self.conv_names.iter().zip(&c.conv_channels) {
            out.push((w.clone(), vec![c_out, c_in, k, k]));
            out.push((b.clone(), vec![c_out]));
            c_in = c_out;
        }
        let feat = 2 * c.branch_out;
        for ((w, b), (n_out, n_in)) in [BRANCH, HEAD1, HEAD2].into_iter().zip([
            (c.branch_out, c.flat_features()),
            (c.head_hidden, feat),
            (2, c.head_hidden),
        ]) {
            out.push((w.to_string(), vec![n_out, n_in]));
            out.push((b.to_string(), vec![n_out]));
        }
        if self.method.kind == FusionKind::Lstm {
            let h = self.lstm_hidden();
            for dir in LSTM_DIRS {
                out.push((format!("{dir}.w_ih"), vec![4 * h, feat]));
                out.push((format!("{dir}.w_hh"), vec![4 * h, h]));
                out.push((format!("{dir}.bias"), vec![4 * h]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Kaiming-uniform weights (bound `√(6/fan_in)`), zero biases, LSTM
    /// weights uniform in `±1/√H` with forget-gate bias 1. Each tensor draws
    /// from its own stream keyed by its name, so adding the LSTM leaves the
    /// shared weights unchanged.
    pub fn init(&self) -> Params<f32> {
        let mut params = Params::new();
        let h = self.lstm_hidden();
        for (name, shape) in self.param_shapes() {
            let len: usize = shape.iter().product();
            let mut rng = keyed_rng(self.config.init_seed, &[str_key(&name)]);
            let data: Vec<f32> = if name.starts_with("lstm.") {
                if name.ends_with(".bias") {
                    (0..len).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect()
                } else {
                    let bound = 1.0 / (h as f64).sqrt();
                    (0..len).map(|_| rng.gen_range(-bound..bound) as f32).collect()
                }
            } else if name.ends_with(".bias") {
                vec![0.0; len]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-bound..bound) as f32).collect()
            };
            params
                .insert(name, Tensor::new(shape, data).expect("shape matches data"))
                .expect("names are unique");
        }
        params
    }

    /// Errors unless `params` holds exactly this architecture's tensors.
    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        let expected = self.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            match params.by_name(&name) {
                None => return Err(Error::invalid(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::shape("load weights", name, format!("expected {shape:?}, got {:?}", t.shape())))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn p<'a, T: Scalar>(&self, tape: &mut Tape<'a, T>, params: &'a Params<T>, name: &str) -> Result<Var> {
        let id = params.id(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
        Ok(tape.param(id, params.get(id)))
    }

    fn check_input<T: Scalar>(&self, t: &Tensor<T>, what: &str) -> Result<()> {
        let s = self.config.input_size;
        if t.shape() != [1, s, s] {
            return Err(Error::shape("forward", what, format!("expected [1, {s}, {s}], got {:?}", t.shape())));
        }
        Ok(())
    }

    /// Conv stack and `branch_fc` on a `[T,1,S,S]` stack of one view.
    /// Returns `[T, branch_out]`.
    fn branch<'a, T: Scalar>(
        &self,
        tape: &mut Tape<'a, T>,
        params: &'a Params<T>,
        images: Vec<Var>,
        shift: Option<f64>,
    ) -> Result<Var> {
        let steps = images.len();
        let mut x = tape.stack(&images)?;
        for (i, (w, b)) in self.conv_names.iter().enumerate() {
            if let (Some(f), true) = (shift, i > 0) {
                x = tape.temporal_shift(x, f)?;
            }
            let (w, b) = (self.p(tape, params, w)?, self.p(tape, params, b)?);
            x = tape.conv2d(x, w, b, self.config.padding)?;
            x = tape.relu(x)?;
            if self.config.pool_after[i] {
                x = tape.maxpool2d(x)?;
            }
        }
        let x = tape.reshape(x, &[steps, self.config.flat_features()])?;
        let (w, b) = (self.p(tape, params, BRANCH.0)?, self.p(tape, params, BRANCH.1)?);
        let y = tape.linear(x, w, Some(b))?;
        tape.relu(y)
    }

    /// Per-visit concatenated features `[sag_t; trv_t]`, one var per visit.
    fn visit_features<'a, T: Scalar>(
        &self,
        tape: &mut Tape<'a, T>,
        params: &'a Params<T>,
        visits: &[ViewPair<T>],
        shift: Option<f64>,
    ) -> Result<Vec<Var>> {
        if visits.is_empty() {
            return Err(Error::shape("forward", "visits", "a sequence needs at least one visit"));
        }
        let mut sag = Vec::with_capacity(visits.len());
        let mut trv = Vec::with_capacity(visits.len());
        for v in visits {
            self.check_input(&v.sagittal, "sagittal input")?;
            self.check_input(&v.transverse, "transverse input")?;
            sag.push(tape.input(v.sagittal.clone()));
            trv.push(tape.input(v.transverse.clone()));
        }
        let fs = self.branch(tape, params, sag, shift)?;
        let ft = self.branch(tape, params, trv, shift)?;
        (0..visits.len())
            .map(|t| {
                let a = tape.select(fs, t)?;
                let b = tape.select(ft, t)?;
                tape.concat(a, b)
            })
            .collect()
    }

    fn head<'a, T: Scalar>(&self, tape: &mut Tape<'a, T>, params: &'a Params<T>, feature: Var) -> Result<Var> {
        let (w1, b1) = (self.p(tape, params, HEAD1.0)?, self.p(tape, params, HEAD1.1)?);
        let (w2, b2) = (self.p(tape, params, HEAD2.0)?, self.p(tape, params, HEAD2.1)?);
        let h = tape.linear(feature, w1, Some(b1))?;
        let h = tape.relu(h)?;
        tape.linear(h, w2, Some(b2))
    }

    /// Logits `[2]` of the single-visit model on one visit.
    pub fn forward_single<'a, T: Scalar>(
        &self,
        tape: &mut Tape<'a, T>,
        params: &'a Params<T>,
        visit: &ViewPair<T>,
    ) -> Result<Var> {
        let f = self.visit_features(tape, params, std::slice::from_ref(visit), None)?;
        self.head(tape, params, f[0])
    }

    /// Logits `[2]` of this architecture's method on a visit sequence,
    /// oldest visit first.
    pub fn forward<'a, T: Scalar>(
        &self,
        tape: &mut Tape<'a, T>,
        params: &'a Params<T>,
        visits: &[ViewPair<T>],
    ) -> Result<Var> {
        self.forward_as(self.method, tape, params, visits)
    }

    /// Like [`Architecture::forward`] with another method on the same
    /// weights. `Lstm` needs LSTM parameters to be present.
    pub fn forward_as<'a, T: Scalar>(
        &self,
        method: FusionMethod,
        tape: &mut Tape<'a, T>,
        params: &'a Params<T>,
        visits: &[ViewPair<T>],
    ) -> Result<Var> {
        let last = visits
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::shape("forward", "visits", "a sequence needs at least one visit"))?;
        match method.kind {
            FusionKind::Baseline => self.forward_single(tape, params, &visits[last]),
            FusionKind::AvgPrediction => {
                let feats = self.visit_features(tape, params, visits, None)?;
                let logits = feats
                    .into_iter()
                    .map(|f| self.head(tape, params, f))
                    .collect::<Result<Vec<_>>>()?;
                let stacked = tape.stack(&logits)?;
                tape.mean_rows(stacked)
            }
            FusionKind::ConvPooling => {
                let feats = self.visit_features(tape, params, visits, None)?;
                let stacked = tape.stack(&feats)?;
                let pooled = tape.temporal_max(stacked)?;
                self.head(tape, params, pooled)
            }
            FusionKind::Tsm => {
                let feats = self.visit_features(tape, params, visits, Some(method.tsm_shift_fraction))?;
                self.head(tape, params, feats[last])
            }
            FusionKind::Lstm => {
                let feats = self.visit_features(tape, params, visits, None)?;
                let fwd = self.lstm_pass(tape, params, LSTM_DIRS[0], feats.iter().copied())?;
                let bwd = self.lstm_pass(tape, params, LSTM_DIRS[1], feats.iter().rev().copied())?;
                let joined = tape.concat(fwd, bwd)?;
                self.head(tape, params, joined)
            }
        }
    }

    /// Runs one LSTM direction over `inputs` and returns its last hidden
    /// state. Gate order in the stacked weights is i, f, g, o.
    fn lstm_pass<'a, T: Scalar>(
        &self,
        tape: &mut Tape<'a, T>,
        params: &'a Params<T>,
        dir: &str,
        inputs: impl Iterator<Item = Var>,
    ) -> Result<Var> {
        let hsz = self.lstm_hidden();
        let w_ih = self.p(tape, params, &format!("{dir}.w_ih"))?;
        let w_hh = self.p(tape, params, &format!("{dir}.w_hh"))?;
        let bias = self.p(tape, params, &format!("{dir}.bias"))?;
        let mut h = tape.input(Tensor::zeros(vec![hsz]));
        let mut c = tape.input(Tensor::zeros(vec![hsz]));
        for x in inputs {
            let zx = tape.linear(x, w_ih, Some(bias))?;
            let zh = tape.linear(h, w_hh, None)?;
            let z = tape.add(zx, zh)?;
            let gate = |tape: &mut Tape<'a, T>, k: usize| tape.slice(z, k * hsz, hsz);
            let (zi, zf, zg, zo) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
            let i = tape.sigmoid(zi);
            let f = tape.sigmoid(zf);
            let g = tape.tanh(zg);
            let o = tape.sigmoid(zo);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
        }
        Ok(h)
    }
}

/// `softmax(logits)[1]` for two-class logits.
pub fn positive_probability<T: Scalar>(logits: &Tensor<T>) -> f64 {
    let d = logits.data();
    debug_assert_eq!(d.len(), 2);
    1.0 / (1.0 + (d[0].as_f64() - d[1].as_f64()).exp())
}

/// An architecture together with f32 weights.
#[derive(Clone, Debug)]
pub struct Network {
    pub arch: Architecture,
    pub params: Params<f32>,
}

impl Network {
    pub fn init(config: BaselineConfig, method: impl Into<FusionMethod>) -> Result<Self> {
        let arch = Architecture::new(config, method.into())?;
        let params = arch.init();
        Ok(Self { arch, params })
    }

    pub fn from_params(config: BaselineConfig, method: impl Into<FusionMethod>, params: Params<f32>) -> Result<Self> {
        let arch = Architecture::new(config, method.into())?;
        arch.check_params(&params)?;
        Ok(Self { arch, params })
    }

    /// Fresh weights for `method` with every tensor shared with `source`
    /// copied over (everything except the LSTM, for a baseline source).
    pub fn warm_start(config: BaselineConfig, method: impl Into<FusionMethod>, source: &Params<f32>) -> Result<Self> {
        let mut net = Self::init(config, method)?;
        net.params.copy_matching(source);
        Ok(net)
    }

    /// Same weights, different forward pass. Parameter-free methods
    /// ignore any LSTM tensors; `Lstm` fails unless they are present.
    pub fn with_method(&self, method: impl Into<FusionMethod>) -> Result<Self> {
        let method = method.into();
        let arch = Architecture::new(self.arch.config.clone(), method)?;
        if method.kind.has_extra_params() {
            arch.check_params(&self.params)?;
        }
        Ok(Self {
            arch,
            params: self.params.clone(),
        })
    }

    pub fn method(&self) -> FusionMethod {
        self.arch.method
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.arch.config
    }

    pub fn logits(&self, visits: &[ViewPair<f32>]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let out = self.arch.forward(&mut tape, &self.params, visits)?;
        Ok(tape.value(out).clone())
    }

    pub fn logits_single(&self, visit: &ViewPair<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let out = self.arch.forward_single(&mut tape, &self.params, visit)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_proba(&self, visits: &[ViewPair<f32>]) -> Result<f64> {
        Ok(positive_probability(&self.logits(visits)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serialize::save(path, &self.params)
    }

    pub fn load(config: BaselineConfig, method: impl Into<FusionMethod>, path: &Path) -> Result<Self> {
        Self::from_params(config, method, serialize::load(path)?)
    }

    pub fn card(&self) -> ModelCard {
        ModelCard::new(self)
    }
}

#[cfg(test)]
mod tests;
