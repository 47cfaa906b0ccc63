use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Three strided convolutions; cheap enough for CPU training.
    Toy,
    /// Bottleneck residual trunk through the third block of stage four.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    NegSqL2,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Transformer,
    Lstm,
    Conv2d,
    Tcn1d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_frames: usize,
    pub embed_dim: usize,
    pub period_classes: usize,
    pub encoder_kind: EncoderKind,
    /// Frame `(height, width)` expected by the encoder.
    pub input_hw: (usize, usize),
    /// Channels of the strided convolutions in the toy encoder.
    pub toy_channels: Vec<usize>,
    pub temporal_kernel: usize,
    pub temporal_dilation: usize,
    pub tsm_similarity: Similarity,
    pub tsm_softmax: bool,
    pub temperature: f64,
    pub predictor_kind: PredictorKind,
    /// Filters of the 3x3 convolution applied to the similarity matrix.
    pub tsm_channels: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    /// Width of the two hidden layers in each output head.
    pub head_hidden: usize,
    pub lstm_units: usize,
    pub tcn_channels: usize,
    pub tcn_dilations: Vec<usize>,
    pub conv2d_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-size network on 112x112 frames.
    pub fn full() -> Self {
        Self {
            n_frames: 64,
            embed_dim: 512,
            period_classes: 32,
            encoder_kind: EncoderKind::Full,
            input_hw: (112, 112),
            toy_channels: vec![8, 16, 32],
            temporal_kernel: 3,
            temporal_dilation: 3,
            tsm_similarity: Similarity::NegSqL2,
            tsm_softmax: true,
            temperature: 13.5,
            predictor_kind: PredictorKind::Transformer,
            tsm_channels: 32,
            heads: 4,
            model_dim: 512,
            head_dim: 128,
            ffn_dim: 512,
            head_hidden: 512,
            lstm_units: 512,
            tcn_channels: 512,
            tcn_dilations: vec![1, 2, 4, 8, 16, 32, 64],
            conv2d_channels: vec![32, 64, 128, 256, 512],
        }
    }

    /// Small network on 32x32 frames for desk-scale training and tests.
    pub fn toy() -> Self {
        Self {
            embed_dim: 64,
            encoder_kind: EncoderKind::Toy,
            input_hw: (32, 32),
            tsm_channels: 16,
            model_dim: 64,
            head_dim: 16,
            ffn_dim: 128,
            head_hidden: 128,
            lstm_units: 64,
            tcn_channels: 64,
            conv2d_channels: vec![8, 16, 32, 64, 128],
            ..Self::full()
        }
    }

    /// Same architecture with `n` frames per window and `n / 2` classes.
    pub fn with_frames(mut self, n: usize) -> Self {
        self.n_frames = n;
        self.period_classes = n / 2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_frames < 4 || self.n_frames % 2 != 0 {
            return bad(format!("n_frames must be even and >= 4, got {}", self.n_frames));
        }
        if self.period_classes != self.n_frames / 2 {
            return bad(format!(
                "period_classes must be n_frames / 2 = {}, got {}",
                self.n_frames / 2,
                self.period_classes
            ));
        }
        if self.heads == 0 || self.heads * self.head_dim != self.model_dim {
            return bad(format!(
                "heads ({}) x head_dim ({}) must equal model_dim ({})",
                self.heads, self.head_dim, self.model_dim
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.temporal_kernel == 0 || self.temporal_kernel % 2 == 0 || self.temporal_dilation == 0 {
            return bad("temporal kernel must be odd and dilation positive".into());
        }
        let sizes = [
            self.embed_dim,
            self.tsm_channels,
            self.ffn_dim,
            self.head_hidden,
            self.lstm_units,
            self.tcn_channels,
            self.input_hw.0,
            self.input_hw.1,
        ];
        if sizes.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        if self.encoder_kind == EncoderKind::Toy && (self.toy_channels.is_empty() || self.toy_channels.contains(&0)) {
            return bad("toy encoder needs positive channel counts".into());
        }
        if self.encoder_kind == EncoderKind::Full && (self.input_hw.0 < 32 || self.input_hw.1 < 32) {
            return bad("full encoder needs frames of at least 32x32".into());
        }
        if self.conv2d_channels.is_empty() || self.conv2d_channels.contains(&0) {
            return bad("conv2d predictor needs positive channel counts".into());
        }
        Ok(())
    }

    /// Spatial size after the encoder trunk.
    pub fn feature_hw(&self) -> (usize, usize) {
        let halve = |v: usize| v.div_ceil(2);
        let (mut h, mut w) = self.input_hw;
        let steps = match self.encoder_kind {
            EncoderKind::Toy => self.toy_channels.len(),
            EncoderKind::Full => 4,
        };
        for _ in 0..steps {
            h = halve(h);
            w = halve(w);
        }
        (h, w)
    }

    /// Channels entering the temporal convolution.
    pub fn trunk_channels(&self) -> usize {
        match self.encoder_kind {
            EncoderKind::Toy => *self.toy_channels.last().expect("validated"),
            EncoderKind::Full => 1024,
        }
    }
}
