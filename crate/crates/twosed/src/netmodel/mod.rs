//! Stochastic feed-forward model architectures and their block maps.
//!
//! A model is an ordered list of parametric blocks (linear, convolutional,
//! flattening). Each block has a deterministic map `O_j`; the stochastic
//! model perturbs every block output with isotropic Gaussian noise of
//! variance `sigma2`, which makes the joint density factor as a Markov chain
//! over block outputs. Per-block log-likelihood gradients are exact
//! reverse-mode derivatives through `O_j`.

mod forward;
mod grad;
mod parse;

pub use forward::{
    block_forward, flatten_conv, forward_sample, forward_sample_with_mode, PropagationMode,
};
pub use grad::{block_backward, block_forward_cached, block_grad_loglik, BlockCache};
pub use parse::{parse_model_string, parse_model_string_with, ParseOptions};

use crate::rng::{self, tag};
use serde::Deserialize;
use thiserror::Error;

/// Spatial epsilon inside the per-channel normalization denominator.
pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at position {position}: {message}")]
    ParseError { position: usize, message: String },
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("invalid variance {0} (must be > 0)")]
    InvalidVariance(f64),
}

/// Shape of an activation flowing between blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Flat(n) => write!(f, "({n})"),
            Shape::Image {
                channels,
                height,
                width,
            } => write!(f, "({channels}x{height}x{width})"),
        }
    }
}

/// A channels-first dense rank-3 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if data.len() != channels * height * width {
            return Err(ModelError::ShapeError(format!(
                "tensor data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Tensor3 {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn shape(&self) -> Shape {
        Shape::Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

/// An activation value: flat vector or image tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Flat(Vec<f64>),
    Image(Tensor3),
}

impl Activation {
    pub fn shape(&self) -> Shape {
        match self {
            Activation::Flat(v) => Shape::Flat(v.len()),
            Activation::Image(t) => t.shape(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Activation::Flat(v) => v,
            Activation::Image(t) => &t.data,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Activation::Flat(v) => v,
            Activation::Image(t) => &mut t.data,
        }
    }

    pub fn zeros_of(shape: Shape) -> Self {
        match shape {
            Shape::Flat(n) => Activation::Flat(vec![0.0; n]),
            Shape::Image {
                channels,
                height,
                width,
            } => Activation::Image(Tensor3::zeros(channels, height, width)),
        }
    }

    pub(crate) fn expect_flat(&self, ctx: &str) -> Result<&[f64], ModelError> {
        match self {
            Activation::Flat(v) => Ok(v),
            Activation::Image(t) => Err(ModelError::ShapeError(format!(
                "{ctx}: expected flat input, got {}",
                t.shape()
            ))),
        }
    }

    pub(crate) fn expect_image(&self, ctx: &str) -> Result<&Tensor3, ModelError> {
        match self {
            Activation::Image(t) => Ok(t),
            Activation::Flat(v) => Err(ModelError::ShapeError(format!(
                "{ctx}: expected image input, got ({})",
                v.len()
            ))),
        }
    }
}

/// One parametric block of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSpec {
    Linear {
        in_width: usize,
        out_width: usize,
        relu: bool,
        bias: bool,
    },
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        with_pool: bool,
        with_norm: bool,
    },
    Flatten {
        spatial: usize,
    },
}

impl BlockSpec {
    /// Number of parameters the block owns.
    pub fn param_count(&self) -> usize {
        match *self {
            BlockSpec::Linear {
                in_width,
                out_width,
                bias,
                ..
            } => in_width * out_width + if bias { out_width } else { 0 },
            BlockSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                with_norm,
                ..
            } => {
                kernel * kernel * in_channels * out_channels
                    + if with_norm { 2 * out_channels } else { 0 }
            }
            BlockSpec::Flatten { spatial } => spatial * spatial,
        }
    }

    /// Fan-in used by the default parameter-sampling scheme.
    pub fn fan_in(&self) -> usize {
        match *self {
            BlockSpec::Linear { in_width, .. } => in_width,
            BlockSpec::Conv {
                kernel,
                in_channels,
                ..
            } => kernel * kernel * in_channels,
            BlockSpec::Flatten { spatial } => spatial * spatial,
        }
    }

    /// Output shape for a given input shape.
    pub fn out_shape(&self, input: Shape) -> Result<Shape, ModelError> {
        match *self {
            BlockSpec::Linear { in_width, out_width, .. } => match input {
                Shape::Flat(n) if n == in_width => Ok(Shape::Flat(out_width)),
                other => Err(ModelError::ShapeError(format!(
                    "linear block expects ({in_width}), got {other}"
                ))),
            },
            BlockSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                with_pool,
                ..
            } => match input {
                Shape::Image {
                    channels,
                    height,
                    width,
                } if channels == in_channels => {
                    if height < kernel || width < kernel {
                        return Err(ModelError::ShapeError(format!(
                            "conv kernel {kernel} does not fit input {input}"
                        )));
                    }
                    let (mut h, mut w) = (height - kernel + 1, width - kernel + 1);
                    if with_pool {
                        h /= 2;
                        w /= 2;
                        if h == 0 || w == 0 {
                            return Err(ModelError::ShapeError(format!(
                                "pooling collapses conv output of {input} to zero size"
                            )));
                        }
                    }
                    Ok(Shape::Image {
                        channels: out_channels,
                        height: h,
                        width: w,
                    })
                }
                other => Err(ModelError::ShapeError(format!(
                    "conv block expects {in_channels} channels, got {other}"
                ))),
            },
            BlockSpec::Flatten { spatial } => match input {
                Shape::Image {
                    channels,
                    height,
                    width,
                } if height == spatial && width == spatial => Ok(Shape::Flat(channels)),
                other => Err(ModelError::ShapeError(format!(
                    "flatten expects {spatial}x{spatial} spatial input, got {other}"
                ))),
            },
        }
    }
}

/// An ordered list of blocks with composing shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    blocks: Vec<BlockSpec>,
    input_shape: Shape,
    sigma2: f64,
    frozen: bool,
}

impl ModelSpec {
    /// Validates shape composition, positive sizes, and the no-ReLU rule on
    /// the final linear block.
    pub fn new(blocks: Vec<BlockSpec>, input_shape: Shape, sigma2: f64) -> Result<Self, ModelError> {
        if blocks.is_empty() {
            return Err(ModelError::ShapeError("model has no blocks".into()));
        }
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(ModelError::InvalidVariance(sigma2));
        }
        for b in &blocks {
            let ok = match *b {
                BlockSpec::Linear {
                    in_width, out_width, ..
                } => in_width >= 1 && out_width >= 1,
                BlockSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                } => kernel >= 1 && in_channels >= 1 && out_channels >= 1,
                BlockSpec::Flatten { spatial } => spatial >= 1,
            };
            if !ok {
                return Err(ModelError::ShapeError(format!("zero-size field in {b:?}")));
            }
        }
        if let Some(BlockSpec::Linear { relu: true, .. }) = blocks.last() {
            return Err(ModelError::ShapeError(
                "final linear block must not apply ReLU".into(),
            ));
        }
        let spec = ModelSpec {
            blocks,
            input_shape,
            sigma2,
            frozen: false,
        };
        spec.shapes()?; // composition check
        Ok(spec)
    }

    pub fn blocks(&self) -> &[BlockSpec] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn set_sigma2(&mut self, sigma2: f64) -> Result<(), ModelError> {
        if !(sigma2 >= 0.0) || !sigma2.is_finite() {
            return Err(ModelError::InvalidVariance(sigma2));
        }
        self.sigma2 = sigma2;
        Ok(())
    }

    /// A frozen model keeps its parameter space but its block maps use fixed
    /// zero weights, so the family is constant in theta and its Fisher
    /// information vanishes identically.
    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Input shape followed by every block's output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>, ModelError> {
        let mut shapes = Vec::with_capacity(self.blocks.len() + 1);
        shapes.push(self.input_shape);
        let mut cur = self.input_shape;
        for b in &self.blocks {
            cur = b.out_shape(cur)?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Width of the final flat output, if the model ends flat.
    pub fn output_width(&self) -> Option<usize> {
        match self.shapes().ok()?.last()? {
            Shape::Flat(n) => Some(*n),
            _ => None,
        }
    }

    pub fn block_param_counts(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.param_count()).collect()
    }
}

/// Total parameter dimension `d = Σ_j d_j`.
pub fn param_count(spec: &ModelSpec) -> usize {
    spec.blocks.iter().map(|b| b.param_count()).sum()
}

/// One sampled parameter point, partitioned into per-block slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    slices: Vec<Vec<f64>>,
}

impl ParamVector {
    pub fn new(slices: Vec<Vec<f64>>, spec: &ModelSpec) -> Result<Self, ModelError> {
        if slices.len() != spec.block_count() {
            return Err(ModelError::ShapeError(format!(
                "{} slices for {} blocks",
                slices.len(),
                spec.block_count()
            )));
        }
        for (j, (slice, block)) in slices.iter().zip(spec.blocks()).enumerate() {
            if slice.len() != block.param_count() {
                return Err(ModelError::ShapeError(format!(
                    "block {j} expects {} parameters, got {}",
                    block.param_count(),
                    slice.len()
                )));
            }
        }
        Ok(ParamVector { slices })
    }

    pub fn zeros_like(spec: &ModelSpec) -> Self {
        ParamVector {
            slices: spec
                .blocks()
                .iter()
                .map(|b| vec![0.0; b.param_count()])
                .collect(),
        }
    }

    pub fn slices(&self) -> &[Vec<f64>] {
        &self.slices
    }

    pub fn slices_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.slices
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        &self.slices[j]
    }

    pub fn total_len(&self) -> usize {
        self.slices.iter().map(|s| s.len()).sum()
    }
}

/// A forward pass through the noisy chain: sampled outputs `xs` and the
/// deterministic pre-noise outputs `os`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub x0: Activation,
    pub xs: Vec<Activation>,
    pub os: Vec<Activation>,
}

/// How parameter points are drawn from the parameter space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingScheme {
    /// Each weight of block j uniform in `[-1/√fan_in_j, +1/√fan_in_j]`.
    FanInUniform,
    /// Each entry uniform in `[0, 1]` (unit-cube parameter space).
    UnitCube,
}

/// Draws one parameter point; deterministic given `(seed, scheme)`.
pub fn sample_params(spec: &ModelSpec, seed: u64, scheme: SamplingScheme) -> ParamVector {
    let slices = spec
        .blocks()
        .iter()
        .enumerate()
        .map(|(j, block)| {
            let mut r = rng::keyed_rng(seed, &[tag::PARAMS, j as u64]);
            let n = block.param_count();
            match scheme {
                SamplingScheme::FanInUniform => {
                    let bound = 1.0 / (block.fan_in() as f64).sqrt();
                    (0..n).map(|_| rng::uniform(&mut r, -bound, bound)).collect()
                }
                SamplingScheme::UnitCube => (0..n).map(|_| rng::next_f64(&mut r)).collect(),
            }
        })
        .collect();
    ParamVector { slices }
}

/// Structured model description loadable from a TOML file.
///
/// Fields: `model_string`, optional `input_shape` (1 or 3 integers),
/// `conv_channels` (one per conv block), `sigma2`, `bias`, `frozen`.
#[derive(Debug, Clone, Deserialize)]
pub struct ModelConfig {
    pub model_string: String,
    #[serde(default)]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default)]
    pub conv_channels: Option<Vec<usize>>,
    #[serde(default)]
    pub sigma2: Option<f64>,
    #[serde(default)]
    pub bias: Option<bool>,
    #[serde(default)]
    pub frozen: Option<bool>,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::ParseError {
            position: e.span().map(|s| s.start).unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    pub fn build(&self) -> Result<ModelSpec, ModelError> {
        let input_shape = match self.input_shape.as_deref() {
            None => None,
            Some([n]) => Some(Shape::Flat(*n)),
            Some([c, h, w]) => Some(Shape::Image {
                channels: *c,
                height: *h,
                width: *w,
            }),
            Some(other) => {
                return Err(ModelError::ShapeError(format!(
                    "input_shape needs 1 or 3 entries, got {}",
                    other.len()
                )))
            }
        };
        let opts = ParseOptions {
            input_shape,
            conv_channels: self.conv_channels.clone(),
            sigma2: self.sigma2,
            bias: self.bias.unwrap_or(false),
        };
        let mut spec = parse_model_string_with(&self.model_string, &opts)?;
        spec.set_frozen(self.frozen.unwrap_or(false));
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_published_mlp_sizes() {
        for (s, expect) in [
            ("MLP 54-16-7", 976),
            ("MLP 54-13-11-9-7", 1007),
            ("MLP 54-10-2-10-25-7", 1005),
        ] {
            let spec = parse_model_string(s).unwrap();
            assert_eq!(param_count(&spec), expect, "{s}");
        }
    }

    #[test]
    fn sample_params_is_deterministic() {
        let spec = parse_model_string("MLP 6-4-3").unwrap();
        let a = sample_params(&spec, 42, SamplingScheme::FanInUniform);
        let b = sample_params(&spec, 42, SamplingScheme::FanInUniform);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let spec = parse_model_string("MLP 6-4-3").unwrap();
        let a = sample_params(&spec, 1, SamplingScheme::FanInUniform);
        let b = sample_params(&spec, 2, SamplingScheme::FanInUniform);
        assert_ne!(a, b);
    }

    #[test]
    fn unit_cube_entries_land_in_unit_interval() {
        let spec = parse_model_string("MLP 6-4-3").unwrap();
        let p = sample_params(&spec, 5, SamplingScheme::UnitCube);
        for s in p.slices() {
            for &w in s {
                assert!((0.0..=1.0).contains(&w));
            }
        }
    }

    #[test]
    fn fan_in_scheme_respects_bounds() {
        let spec = parse_model_string("MLP 16-4-3").unwrap();
        let p = sample_params(&spec, 5, SamplingScheme::FanInUniform);
        for &w in p.slice(0) {
            assert!(w.abs() <= 1.0 / 4.0);
        }
        for &w in p.slice(1) {
            assert!(w.abs() <= 1.0 / 2.0);
        }
    }

    #[test]
    fn model_config_round_trip() {
        let cfg = ModelConfig::from_toml(
            r#"
model_string = "CNN 3|4-6-3"
input_shape = [2, 8, 8]
conv_channels = [4]
sigma2 = 0.05
"#,
        )
        .unwrap();
        let spec = cfg.build().unwrap();
        assert_eq!(spec.sigma2(), 0.05);
        assert_eq!(spec.input_shape(), Shape::Image { channels: 2, height: 8, width: 8 });
        assert!(matches!(
            spec.blocks()[0],
            BlockSpec::Conv { kernel: 3, in_channels: 2, out_channels: 4, .. }
        ));
    }

    #[test]
    fn bad_config_reports_position() {
        let err = ModelConfig::from_toml("model_string = [1,").unwrap_err();
        assert!(matches!(err, ModelError::ParseError { .. }));
    }

    #[test]
    fn final_relu_is_rejected() {
        let err = ModelSpec::new(
            vec![BlockSpec::Linear {
                in_width: 3,
                out_width: 2,
                relu: true,
                bias: false,
            }],
            Shape::Flat(3),
            1e-2,
        );
        assert!(matches!(err, Err(ModelError::ShapeError(_))));
    }
}
