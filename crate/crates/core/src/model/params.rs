use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::read_arrays;
use super::config::{EncoderKind, ModelConfig, PredictorKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with variance `2 / fan_in`, for layers followed by a rectifier.
    He(usize),
    /// Normal with variance `1 / fan_in`.
    Lecun(usize),
    Normal(f64),
    Zeros,
    Ones,
    /// LSTM gate bias: ones on the forget block of width `units`, zeros elsewhere.
    ForgetBias(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stage layout of the full encoder trunk: (blocks, bottleneck width, output width, stride).
pub const TRUNK_STAGES: [(usize, usize, usize, usize); 3] = [(3, 64, 256, 1), (4, 128, 512, 2), (3, 256, 1024, 2)];

struct Specs(Vec<ParamSpec>);

impl Specs {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
    }

    fn conv(&mut self, prefix: &str, out: usize, inp: usize, k: usize, bias: bool) {
        self.push(format!("{prefix}.weight"), &[out, inp, k, k], Init::He(inp * k * k));
        if bias {
            self.push(format!("{prefix}.bias"), &[out], Init::Zeros);
        }
    }

    fn frozen_bn(&mut self, prefix: &str, ch: usize) {
        self.push(format!("{prefix}.bn.scale"), &[ch], Init::Ones);
        self.push(format!("{prefix}.bn.shift"), &[ch], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize, rectified: bool) {
        let init = if rectified { Init::He(inp) } else { Init::Lecun(inp) };
        self.push(format!("{prefix}.weight"), &[inp, out], init);
        self.push(format!("{prefix}.bias"), &[out], Init::Zeros);
    }

    fn norm(&mut self, prefix: &str, dim: usize) {
        self.push(format!("{prefix}.gain"), &[dim], Init::Ones);
        self.push(format!("{prefix}.bias"), &[dim], Init::Zeros);
    }
}

/// Every trainable array of the network, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut s = Specs(Vec::new());
    match cfg.encoder_kind {
        EncoderKind::Toy => {
            let mut inp = 3;
            for (i, &c) in cfg.toy_channels.iter().enumerate() {
                s.conv(&format!("encoder.conv{}", i + 1), c, inp, 3, true);
                inp = c;
            }
        }
        EncoderKind::Full => {
            s.conv("encoder.conv1", 64, 3, 7, false);
            s.frozen_bn("encoder.conv1", 64);
            let mut inp = 64;
            for (stage, &(blocks, mid, out, _)) in TRUNK_STAGES.iter().enumerate() {
                for b in 1..=blocks {
                    let p = format!("encoder.conv{}_block{b}", stage + 2);
                    if b == 1 {
                        s.conv(&format!("{p}.0"), out, inp, 1, false);
                        s.frozen_bn(&format!("{p}.0"), out);
                    }
                    for (j, (o, i, k)) in [(mid, inp, 1), (mid, mid, 3), (out, mid, 1)].into_iter().enumerate() {
                        s.conv(&format!("{p}.{}", j + 1), o, i, k, false);
                        s.frozen_bn(&format!("{p}.{}", j + 1), o);
                    }
                    inp = out;
                }
            }
        }
    }
    let (kt, c, d) = (cfg.temporal_kernel, cfg.trunk_channels(), cfg.embed_dim);
    s.push("encoder.temporal.weight".into(), &[kt, d, c, 3, 3], Init::He(kt * c * 9));
    s.push("encoder.temporal.bias".into(), &[d], Init::Zeros);

    let n = cfg.n_frames;
    let flat = n * cfg.tsm_channels;
    let features = match cfg.predictor_kind {
        PredictorKind::Conv2d => {
            let mut inp = 1;
            for (i, &c) in cfg.conv2d_channels.iter().enumerate() {
                s.conv(&format!("predictor.conv2d.{i}"), c, inp, 3, true);
                inp = c;
            }
            inp
        }
        kind => {
            s.conv("predictor.tsm_conv", cfg.tsm_channels, 1, 3, true);
            match kind {
                PredictorKind::Transformer => {
                    let md = cfg.model_dim;
                    s.linear("predictor.input", flat, md, false);
                    s.push("predictor.pos_embedding".into(), &[n, md], Init::Normal(0.02));
                    for proj in ["query", "key", "value", "output"] {
                        s.linear(&format!("predictor.attention.{proj}"), md, md, false);
                    }
                    s.norm("predictor.attention_norm", md);
                    s.linear("predictor.ffn.1", md, cfg.ffn_dim, true);
                    s.linear("predictor.ffn.2", cfg.ffn_dim, md, false);
                    s.norm("predictor.ffn_norm", md);
                    md
                }
                PredictorKind::Lstm => {
                    let u = cfg.lstm_units;
                    s.push("predictor.lstm.input".into(), &[flat, 4 * u], Init::Lecun(flat));
                    s.push("predictor.lstm.recurrent".into(), &[u, 4 * u], Init::Lecun(u));
                    s.push("predictor.lstm.bias".into(), &[4 * u], Init::ForgetBias(u));
                    u
                }
                PredictorKind::Tcn1d => {
                    let c = cfg.tcn_channels;
                    s.linear("predictor.tcn.input", flat, c, false);
                    for i in 0..cfg.tcn_dilations.len() {
                        let p = format!("predictor.tcn.{i}");
                        s.push(format!("{p}.past"), &[c, c], Init::He(2 * c));
                        s.push(format!("{p}.current"), &[c, c], Init::He(2 * c));
                        s.push(format!("{p}.bias"), &[c], Init::Zeros);
                        s.norm(&format!("{p}.norm"), c);
                    }
                    c
                }
                PredictorKind::Conv2d => unreachable!(),
            }
        }
    };
    for (head, out) in [("period", cfg.period_classes), ("periodicity", 1)] {
        s.linear(&format!("head.{head}.fc1"), features, cfg.head_hidden, true);
        s.linear(&format!("head.{head}.fc2"), cfg.head_hidden, cfg.head_hidden, true);
        s.linear(&format!("head.{head}.out"), cfg.head_hidden, out, false);
    }
    s.0
}

/// Named parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    arrays: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn from_arrays(arrays: IndexMap<String, Tensor<T>>) -> Result<Self> {
        if let Some((name, _)) = arrays.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::InvalidInput(format!("parameter {name} has non-finite values")));
        }
        Ok(Self { arrays })
    }

    /// Parameters must match the config's layer list exactly, name for name.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.arrays.len() {
            return Err(Error::ShapeMismatch(format!(
                "config expects {} arrays, parameters hold {}",
                specs.len(),
                self.arrays.len()
            )));
        }
        for spec in &specs {
            let t = self
                .arrays
                .get(&spec.name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: expected {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.arrays.get_mut(name)
    }

    pub fn arrays(&self) -> &IndexMap<String, Tensor<T>> {
        &self.arrays
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.arrays.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total number of scalars across all arrays.
    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arrays: self.arrays.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Replaces encoder arrays with those stored in a checkpoint file. Every
    /// `encoder.*` array in the file must exist here with the same shape.
    /// Returns how many arrays were replaced.
    pub fn load_encoder_weights(&mut self, path: &Path) -> Result<usize> {
        let (arrays, _) = read_arrays(path)?;
        let mut replaced = 0;
        for (name, value) in arrays.into_iter().filter(|(n, _)| n.starts_with("encoder.")) {
            let slot = self
                .arrays
                .get_mut(&name)
                .ok_or_else(|| Error::ShapeMismatch(format!("no encoder parameter named {name}")))?;
            if slot.shape() != value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: expected {:?}, file has {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value.cast();
            replaced += 1;
        }
        Ok(replaced)
    }
}

/// Random initialization; values are drawn in `f64` so both precisions see
/// the same stream.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut arrays = IndexMap::new();
    for spec in param_specs(cfg) {
        let len = spec.len();
        let mut normal = |std: f64| -> Vec<T> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..len).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
        };
        let data = match spec.init {
            Init::He(fan_in) => normal((2.0 / fan_in as f64).sqrt()),
            Init::Lecun(fan_in) => normal((1.0 / fan_in as f64).sqrt()),
            Init::Normal(std) => normal(std),
            Init::Zeros => vec![T::zero(); len],
            Init::Ones => vec![T::one(); len],
            Init::ForgetBias(units) => (0..len)
                .map(|i| if (units..2 * units).contains(&i) { T::one() } else { T::zero() })
                .collect(),
        };
        arrays.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(ModelParams { arrays })
}
