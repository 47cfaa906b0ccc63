use serde::Serialize;

use super::config::{EncoderKind, ModelConfig, PredictorKind, Similarity};
use super::params::{ModelParams, TRUNK_STAGES};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::video::{FrameWindow, PeriodLabels};

/// `N × D` per-frame embeddings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingSequence<T>(pub Tensor<T>);

impl<T: Scalar> EmbeddingSequence<T> {
    pub fn new(matrix: Tensor<T>) -> Result<Self> {
        if matrix.shape().len() != 2 || !matrix.is_finite() {
            return Err(Error::InvalidInput("embeddings must be a finite matrix".into()));
        }
        Ok(Self(matrix))
    }

    pub fn matrix(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// Self-similarity of a window: `raw` before and `s` after the row softmax.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimilarityMatrix<T> {
    pub raw: Tensor<T>,
    pub s: Tensor<T>,
}

impl<T: Scalar> SimilarityMatrix<T> {
    pub fn size(&self) -> usize {
        self.s.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeriodOutputs<T> {
    /// `N × period_classes`; class `k` stands for a period of `k + 1` frames.
    pub period_logits: Tensor<T>,
    /// `N × 1`.
    pub periodicity_logits: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardOutputs<T> {
    pub embeddings: EmbeddingSequence<T>,
    pub similarity: SimilarityMatrix<T>,
    pub outputs: PeriodOutputs<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Losses<T> {
    pub period: T,
    pub periodicity: T,
    pub total: T,
}

/// Layer-by-layer output shapes recorded during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ShapeTrace {
    pub rows: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    pub fn get(&self, layer: &str) -> Option<&[usize]> {
        self.rows.iter().find(|(n, _)| n == layer).map(|(_, s)| s.as_slice())
    }
}

/// Graph handles for every stage of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GraphOutputs {
    pub embeddings: Var,
    pub raw: Var,
    pub similarity: Var,
    pub period_logits: Var,
    pub periodicity_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub period: Var,
    pub periodicity: Var,
    pub total: Var,
}

struct Builder<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    params: &'a ModelParams<T>,
    cfg: &'a ModelConfig,
    trace: Option<&'a mut ShapeTrace>,
}

impl<T: Scalar> Builder<'_, T> {
    fn p(&mut self, name: &str) -> Var {
        self.g.param(name, self.params.get(name))
    }

    fn record(&mut self, layer: &str, v: Var) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.rows.push((layer.to_string(), self.g.shape(v).to_vec()));
        }
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        self.g.linear(x, w, b)
    }

    fn conv(&mut self, x: Var, prefix: &str, stride: usize, pad: usize, bias: bool) -> Var {
        let w = self.p(&format!("{prefix}.weight"));
        let b = bias.then(|| self.p(&format!("{prefix}.bias")));
        self.g.conv2d(x, w, b, stride, pad)
    }

    fn conv_bn(&mut self, x: Var, prefix: &str, stride: usize, pad: usize) -> Var {
        let y = self.conv(x, prefix, stride, pad, false);
        let scale = self.p(&format!("{prefix}.bn.scale"));
        let shift = self.p(&format!("{prefix}.bn.shift"));
        self.g.channel_affine(y, scale, shift)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Var {
        let gain = self.p(&format!("{prefix}.gain"));
        let bias = self.p(&format!("{prefix}.bias"));
        self.g.layer_norm(x, gain, bias)
    }

    fn encoder(&mut self, frames: Var) -> Var {
        let mut x = frames;
        match self.cfg.encoder_kind {
            EncoderKind::Toy => {
                for i in 1..=self.cfg.toy_channels.len() {
                    let name = format!("encoder.conv{i}");
                    x = self.conv(x, &name, 2, 1, true);
                    x = self.g.relu(x);
                    self.record(&name, x);
                }
            }
            EncoderKind::Full => {
                x = self.conv_bn(x, "encoder.conv1", 2, 3);
                x = self.g.relu(x);
                self.record("conv1", x);
                x = self.g.max_pool2d(x, 3, 2, 1);
                self.record("pool1", x);
                for (stage, &(blocks, _, _, stride)) in TRUNK_STAGES.iter().enumerate() {
                    for b in 1..=blocks {
                        let p = format!("encoder.conv{}_block{b}", stage + 2);
                        let s = if b == 1 { stride } else { 1 };
                        let shortcut = if b == 1 { self.conv_bn(x, &format!("{p}.0"), s, 0) } else { x };
                        let mut y = self.conv_bn(x, &format!("{p}.1"), s, 0);
                        y = self.g.relu(y);
                        y = self.conv_bn(y, &format!("{p}.2"), 1, 1);
                        y = self.g.relu(y);
                        y = self.conv_bn(y, &format!("{p}.3"), 1, 0);
                        let sum = self.g.add(y, shortcut);
                        x = self.g.relu(sum);
                    }
                    self.record(&format!("conv{}_x", stage + 2), x);
                }
            }
        }
        let w = self.p("encoder.temporal.weight");
        let b = self.p("encoder.temporal.bias");
        x = self.g.conv3d_temporal(x, w, b, self.cfg.temporal_dilation);
        x = self.g.relu(x);
        self.record("temporal_conv", x);
        let e = self.g.spatial_max(x);
        self.record("spatial_pool", e);
        e
    }

    fn similarity(&mut self, e: Var) -> (Var, Var) {
        let raw = match self.cfg.tsm_similarity {
            Similarity::NegSqL2 => self.g.neg_sq_dist(e),
            Similarity::Cosine => {
                let u = self.g.normalize_rows(e);
                self.g.matmul_t(u, false, u, true)
            }
        };
        self.record("raw_similarity", raw);
        let s = if self.cfg.tsm_softmax {
            let scaled = self.g.scale(raw, T::from_f64_lossy(1.0 / self.cfg.temperature));
            self.g.softmax_rows(scaled)
        } else {
            raw
        };
        self.record("similarity", s);
        (raw, s)
    }

    /// 3x3 convolution over the similarity matrix, then one row of `N × C`
    /// features per frame, flattened to `[N, N·C]`.
    fn tsm_features(&mut self, s: Var) -> Var {
        let n = self.g.shape(s)[0];
        let c = self.cfg.tsm_channels;
        let img = self.g.reshape(s, &[1, 1, n, n]);
        let mut f = self.conv(img, "predictor.tsm_conv", 1, 1, true);
        f = self.g.relu(f);
        self.record("tsm_conv", f);
        let f = self.g.reshape(f, &[c, n, n]);
        let f = self.g.permute3(f, [1, 2, 0]);
        let f = self.g.reshape(f, &[n, n * c]);
        self.record("flatten", f);
        f
    }

    fn transformer(&mut self, f: Var) -> Var {
        let cfg = self.cfg;
        let mut h = self.linear(f, "predictor.input");
        let pos = self.p("predictor.pos_embedding");
        h = self.g.add(h, pos);
        let q = self.linear(h, "predictor.attention.query");
        let k = self.linear(h, "predictor.attention.key");
        let v = self.linear(h, "predictor.attention.value");
        let inv = T::from_f64_lossy(1.0 / (cfg.head_dim as f64).sqrt());
        let mut heads = Vec::with_capacity(cfg.heads);
        for i in 0..cfg.heads {
            let qi = self.g.slice_cols(q, i * cfg.head_dim, cfg.head_dim);
            let ki = self.g.slice_cols(k, i * cfg.head_dim, cfg.head_dim);
            let vi = self.g.slice_cols(v, i * cfg.head_dim, cfg.head_dim);
            let scores = self.g.matmul_t(qi, false, ki, true);
            let scores = self.g.scale(scores, inv);
            let attn = self.g.softmax_rows(scores);
            heads.push(self.g.matmul(attn, vi));
        }
        let cat = self.g.concat_cols(&heads);
        let o = self.linear(cat, "predictor.attention.output");
        let r = self.g.add(h, o);
        let h1 = self.layer_norm(r, "predictor.attention_norm");
        let ff = self.linear(h1, "predictor.ffn.1");
        let ff = self.g.relu(ff);
        let ff = self.linear(ff, "predictor.ffn.2");
        let r = self.g.add(h1, ff);
        let out = self.layer_norm(r, "predictor.ffn_norm");
        self.record("transformer", out);
        out
    }

    fn lstm(&mut self, f: Var) -> Var {
        let n = self.g.shape(f)[0];
        let u = self.cfg.lstm_units;
        let wx = self.p("predictor.lstm.input");
        let wh = self.p("predictor.lstm.recurrent");
        let b = self.p("predictor.lstm.bias");
        let xw = self.g.matmul(f, wx);
        let xw = self.g.add_row(xw, b);
        let mut h = self.g.input(Tensor::zeros(&[1, u]));
        let mut c = self.g.input(Tensor::zeros(&[1, u]));
        let mut outs = Vec::with_capacity(n);
        for t in 0..n {
            let xt = self.g.slice_rows(xw, t, 1);
            let hw = self.g.matmul(h, wh);
            let z = self.g.add(xt, hw);
            let gate = |g: &mut Graph<T>, k: usize| g.slice_cols(z, k * u, u);
            let i = gate(self.g, 0);
            let i = self.g.sigmoid(i);
            let fg = gate(self.g, 1);
            let fg = self.g.sigmoid(fg);
            let cand = gate(self.g, 2);
            let cand = self.g.tanh(cand);
            let o = gate(self.g, 3);
            let o = self.g.sigmoid(o);
            let keep = self.g.mul(fg, c);
            let write = self.g.mul(i, cand);
            c = self.g.add(keep, write);
            let tc = self.g.tanh(c);
            h = self.g.mul(o, tc);
            outs.push(h);
        }
        let out = self.g.concat_rows(&outs);
        self.record("lstm", out);
        out
    }

    fn tcn(&mut self, f: Var) -> Var {
        let mut x = self.linear(f, "predictor.tcn.input");
        for (i, &d) in self.cfg.tcn_dilations.clone().iter().enumerate() {
            let p = format!("predictor.tcn.{i}");
            let wp = self.p(&format!("{p}.past"));
            let wc = self.p(&format!("{p}.current"));
            let b = self.p(&format!("{p}.bias"));
            let past = self.g.shift_rows(x, d);
            let a = self.g.matmul(past, wp);
            let c = self.g.matmul(x, wc);
            let y = self.g.add(a, c);
            let y = self.g.add_row(y, b);
            let gain = self.p(&format!("{p}.norm.gain"));
            let bias = self.p(&format!("{p}.norm.bias"));
            let y = self.g.column_norm(y, gain, bias);
            let y = self.g.relu(y);
            x = self.g.add(x, y);
        }
        self.record("tcn", x);
        x
    }

    /// Whole-clip features `[1, C]` from a plain convolution stack.
    fn conv2d_stack(&mut self, s: Var) -> Var {
        let n = self.g.shape(s)[0];
        let mut x = self.g.reshape(s, &[1, 1, n, n]);
        for i in 0..self.cfg.conv2d_channels.len() {
            x = self.conv(x, &format!("predictor.conv2d.{i}"), 1, 1, true);
            x = self.g.relu(x);
            if self.g.shape(x)[2] >= 2 {
                x = self.g.max_pool2d(x, 2, 2, 0);
            }
            self.record(&format!("conv2d.{i}"), x);
        }
        let out = self.g.spatial_mean(x);
        self.record("global_pool", out);
        out
    }

    fn head(&mut self, x: Var, name: &str) -> Var {
        let mut h = self.linear(x, &format!("head.{name}.fc1"));
        h = self.g.relu(h);
        h = self.linear(h, &format!("head.{name}.fc2"));
        h = self.g.relu(h);
        self.linear(h, &format!("head.{name}.out"))
    }

    fn predictor(&mut self, s: Var) -> (Var, Var) {
        let n = self.g.shape(s)[0];
        let features = match self.cfg.predictor_kind {
            PredictorKind::Conv2d => self.conv2d_stack(s),
            PredictorKind::Transformer => {
                let f = self.tsm_features(s);
                self.transformer(f)
            }
            PredictorKind::Lstm => {
                let f = self.tsm_features(s);
                self.lstm(f)
            }
            PredictorKind::Tcn1d => {
                let f = self.tsm_features(s);
                self.tcn(f)
            }
        };
        let mut period = self.head(features, "period");
        let mut periodicity = self.head(features, "periodicity");
        if self.cfg.predictor_kind == PredictorKind::Conv2d {
            period = self.g.repeat_rows(period, n);
            periodicity = self.g.repeat_rows(periodicity, n);
        }
        self.record("period_classifier", period);
        self.record("periodicity_classifier", periodicity);
        (period, periodicity)
    }
}

/// Model input `[N, 3, H, W]` with pixels mapped from `[0, 1]` to `[-1, 1]`.
pub fn window_tensor<T: Scalar>(window: &FrameWindow, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let v = &window.frames;
    if (v.height(), v.width()) != cfg.input_hw {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {:?} frames, got {}x{}",
            cfg.input_hw,
            v.height(),
            v.width()
        )));
    }
    if v.num_frames() != cfg.n_frames {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects {} frames per window, got {}",
            cfg.n_frames,
            v.num_frames()
        )));
    }
    let two = T::from_f64_lossy(2.0);
    Ok(v.to_tensor::<T>().map(|p| p * two - T::one()))
}

/// Builds the full forward pass on `g` from a prepared input variable.
pub fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    frames: Var,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    trace: Option<&mut ShapeTrace>,
) -> GraphOutputs {
    let mut b = Builder { g, params, cfg, trace };
    let embeddings = b.encoder(frames);
    let (raw, similarity) = b.similarity(embeddings);
    let (period_logits, periodicity_logits) = b.predictor(similarity);
    GraphOutputs {
        embeddings,
        raw,
        similarity,
        period_logits,
        periodicity_logits,
    }
}

/// Class targets for the period head: `Some(l - 1)` on periodic frames.
pub fn period_targets(labels: &PeriodLabels, cfg: &ModelConfig) -> Result<Vec<Option<usize>>> {
    if labels.len() != cfg.n_frames {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} frames",
            labels.len(),
            cfg.n_frames
        )));
    }
    labels
        .period_length
        .iter()
        .zip(&labels.periodicity)
        .map(|(&l, &p)| {
            let l = l as usize;
            if !p {
                return if l == 0 {
                    Ok(None)
                } else {
                    Err(Error::InvalidLabel(format!("non-periodic frame with period {l}")))
                };
            }
            if l < 2 || l > cfg.period_classes {
                return Err(Error::InvalidLabel(format!(
                    "period {l} outside [2, {}]",
                    cfg.period_classes
                )));
            }
            Ok(Some(l - 1))
        })
        .collect()
}

pub fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    period_logits: Var,
    periodicity_logits: Var,
    labels: &PeriodLabels,
    cfg: &ModelConfig,
) -> Result<LossVars> {
    let targets = period_targets(labels, cfg)?;
    let flags: Vec<T> = labels
        .periodicity
        .iter()
        .map(|&p| if p { T::one() } else { T::zero() })
        .collect();
    let period = g.softmax_cross_entropy(period_logits, &targets);
    let periodicity = g.bce_with_logits(periodicity_logits, &flags);
    let total = g.add(period, periodicity);
    Ok(LossVars {
        period,
        periodicity,
        total,
    })
}

fn check_params<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<()> {
    cfg.validate()?;
    params.check_config(cfg)
}

pub fn encode<T: Scalar>(window: &FrameWindow, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<EmbeddingSequence<T>> {
    check_params(params, cfg)?;
    let input = window_tensor(window, cfg)?;
    let mut g = Graph::inference();
    let x = g.input(input);
    let e = Builder {
        g: &mut g,
        params,
        cfg,
        trace: None,
    }
    .encoder(x);
    EmbeddingSequence::new(g.value(e).clone())
}

/// Raw similarities to the matrix fed to the predictor.
pub fn similarity_from_raw<T: Scalar>(raw: &Tensor<T>, temperature: f64, softmax: bool) -> Tensor<T> {
    let mut g = Graph::inference();
    let r = g.input(raw.clone());
    if !softmax {
        return raw.clone();
    }
    let scaled = g.scale(r, T::from_f64_lossy(1.0 / temperature));
    let s = g.softmax_rows(scaled);
    g.value(s).clone()
}

pub fn build_tsm<T: Scalar>(embeddings: &EmbeddingSequence<T>, cfg: &ModelConfig) -> SimilarityMatrix<T> {
    let mut g = Graph::inference();
    let e = g.input(embeddings.0.clone());
    let params = ModelParams::from_arrays(Default::default()).expect("empty parameter set");
    let (raw, s) = Builder {
        g: &mut g,
        params: &params,
        cfg,
        trace: None,
    }
    .similarity(e);
    SimilarityMatrix {
        raw: g.value(raw).clone(),
        s: g.value(s).clone(),
    }
}

pub fn predict_period<T: Scalar>(
    similarity: &SimilarityMatrix<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<PeriodOutputs<T>> {
    check_params(params, cfg)?;
    let s = &similarity.s;
    if s.shape() != [cfg.n_frames, cfg.n_frames] {
        return Err(Error::ShapeMismatch(format!(
            "similarity matrix must be {n}x{n}, got {:?}",
            s.shape(),
            n = cfg.n_frames
        )));
    }
    let mut g = Graph::inference();
    let sv = g.input(s.clone());
    let (p, q) = Builder {
        g: &mut g,
        params,
        cfg,
        trace: None,
    }
    .predictor(sv);
    Ok(PeriodOutputs {
        period_logits: g.value(p).clone(),
        periodicity_logits: g.value(q).clone(),
    })
}

pub fn forward<T: Scalar>(window: &FrameWindow, params: &ModelParams<T>, cfg: &ModelConfig) -> Result<ForwardOutputs<T>> {
    forward_inner(window, params, cfg, None)
}

/// Forward pass that also records every layer's output shape.
pub fn forward_traced<T: Scalar>(
    window: &FrameWindow,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(ForwardOutputs<T>, ShapeTrace)> {
    let mut trace = ShapeTrace::default();
    let out = forward_inner(window, params, cfg, Some(&mut trace))?;
    Ok((out, trace))
}

fn forward_inner<T: Scalar>(
    window: &FrameWindow,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    trace: Option<&mut ShapeTrace>,
) -> Result<ForwardOutputs<T>> {
    check_params(params, cfg)?;
    let input = window_tensor(window, cfg)?;
    let mut g = Graph::inference();
    let x = g.input(input);
    let o = build_forward(&mut g, x, params, cfg, trace);
    let out = ForwardOutputs {
        embeddings: EmbeddingSequence(g.value(o.embeddings).clone()),
        similarity: SimilarityMatrix {
            raw: g.value(o.raw).clone(),
            s: g.value(o.similarity).clone(),
        },
        outputs: PeriodOutputs {
            period_logits: g.value(o.period_logits).clone(),
            periodicity_logits: g.value(o.periodicity_logits).clone(),
        },
    };
    if !out.outputs.period_logits.is_finite() || !out.outputs.periodicity_logits.is_finite() {
        return Err(Error::InvalidInput("forward pass produced non-finite outputs".into()));
    }
    Ok(out)
}

pub fn compute_loss<T: Scalar>(outputs: &PeriodOutputs<T>, labels: &PeriodLabels, cfg: &ModelConfig) -> Result<Losses<T>> {
    let (pl, ql) = (&outputs.period_logits, &outputs.periodicity_logits);
    if pl.shape() != [cfg.n_frames, cfg.period_classes] || ql.shape() != [cfg.n_frames, 1] {
        return Err(Error::ShapeMismatch(format!(
            "outputs {:?} / {:?} do not match the config",
            pl.shape(),
            ql.shape()
        )));
    }
    let mut g = Graph::inference();
    let p = g.input(pl.clone());
    let q = g.input(ql.clone());
    let l = build_loss(&mut g, p, q, labels, cfg)?;
    let v = |x: Var| g.value(x).data()[0];
    Ok(Losses {
        period: v(l.period),
        periodicity: v(l.periodicity),
        total: v(l.total),
    })
}
