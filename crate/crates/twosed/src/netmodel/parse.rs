//! Model-string grammar: `MLP w(-w)+` and `CNN k(-k)*|w(-w)+`.
//!
//! MLP widths become chained linear blocks with ReLU on all but the last.
//! CNN kernel sizes become conv blocks (conv, per-channel norm, ReLU, 2x2
//! max pool), then a parametric flattening kernel, then the MLP tail. The
//! string carries no channel counts, so conv output channels come from
//! [`ParseOptions::conv_channels`], defaulting every conv block to the first
//! MLP width (which makes the flattened width line up with the tail).

use super::{BlockSpec, ModelError, ModelSpec, Shape};

/// Knobs the model string itself does not carry.
#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Input shape; defaults to `(N_0)` for MLPs and `(1, 28, 28)` for CNNs.
    pub input_shape: Option<Shape>,
    /// Output channels per conv block; defaults to the first MLP width.
    pub conv_channels: Option<Vec<usize>>,
    /// Shared output variance; defaults to 1e-2.
    pub sigma2: Option<f64>,
    /// Bias terms on linear blocks; off by default.
    pub bias: bool,
}

const DEFAULT_SIGMA2: f64 = 1e-2;

fn parse_err(position: usize, message: impl Into<String>) -> ModelError {
    ModelError::ParseError {
        position,
        message: message.into(),
    }
}

/// Parses a dash-separated positive-integer list, reporting byte positions
/// relative to `offset`.
fn parse_int_list(text: &str, offset: usize, what: &str) -> Result<Vec<usize>, ModelError> {
    let mut out = Vec::new();
    let mut pos = offset;
    for piece in text.split('-') {
        let trimmed = piece.trim();
        if trimmed.is_empty() {
            return Err(parse_err(pos, format!("empty {what} entry")));
        }
        let value: usize = trimmed
            .parse()
            .map_err(|_| parse_err(pos, format!("invalid {what} '{trimmed}'")))?;
        if value == 0 {
            return Err(parse_err(pos, format!("{what} must be >= 1")));
        }
        out.push(value);
        pos += piece.len() + 1;
    }
    Ok(out)
}

/// Parses a model string with default options.
pub fn parse_model_string(s: &str) -> Result<ModelSpec, ModelError> {
    parse_model_string_with(s, &ParseOptions::default())
}

/// Parses a model string, applying explicit shape/channel/variance options.
pub fn parse_model_string_with(s: &str, opts: &ParseOptions) -> Result<ModelSpec, ModelError> {
    let trimmed = s.trim();
    let base = s.len() - s.trim_start().len();
    let sigma2 = opts.sigma2.unwrap_or(DEFAULT_SIGMA2);
    if let Some(rest) = trimmed.strip_prefix("MLP") {
        let body = rest.trim_start();
        let body_off = base + 3 + (rest.len() - body.len());
        if body.is_empty() {
            return Err(parse_err(body_off, "MLP needs a width list"));
        }
        let widths = parse_int_list(body, body_off, "width")?;
        if widths.len() < 2 {
            return Err(parse_err(body_off, "MLP needs at least two widths"));
        }
        let blocks = mlp_blocks(&widths, opts.bias);
        let input_shape = opts.input_shape.unwrap_or(Shape::Flat(widths[0]));
        ModelSpec::new(blocks, input_shape, sigma2)
    } else if let Some(rest) = trimmed.strip_prefix("CNN") {
        let body = rest.trim_start();
        let body_off = base + 3 + (rest.len() - body.len());
        let bar = body
            .find('|')
            .ok_or_else(|| parse_err(body_off, "CNN needs a '|' between kernels and widths"))?;
        let kernels = parse_int_list(&body[..bar], body_off, "kernel size")?;
        let widths = parse_int_list(&body[bar + 1..], body_off + bar + 1, "width")?;
        if widths.len() < 2 {
            return Err(parse_err(body_off + bar + 1, "CNN tail needs at least two widths"));
        }
        let input_shape = opts.input_shape.unwrap_or(Shape::Image {
            channels: 1,
            height: 28,
            width: 28,
        });
        let (in_channels, mut h, w) = match input_shape {
            Shape::Image {
                channels,
                height,
                width,
            } => (channels, height, width),
            Shape::Flat(_) => {
                return Err(ModelError::ShapeError(
                    "CNN needs an image input shape".into(),
                ))
            }
        };
        if h != w {
            return Err(ModelError::ShapeError(format!(
                "CNN input must be square, got {input_shape}"
            )));
        }
        let channels = match &opts.conv_channels {
            Some(c) => {
                if c.len() != kernels.len() {
                    return Err(ModelError::ShapeError(format!(
                        "{} conv_channels for {} conv blocks",
                        c.len(),
                        kernels.len()
                    )));
                }
                c.clone()
            }
            None => vec![widths[0]; kernels.len()],
        };
        let mut blocks = Vec::with_capacity(kernels.len() + widths.len());
        let mut prev_ch = in_channels;
        for (&k, &out_ch) in kernels.iter().zip(&channels) {
            blocks.push(BlockSpec::Conv {
                kernel: k,
                in_channels: prev_ch,
                out_channels: out_ch,
                with_pool: true,
                with_norm: true,
            });
            if h < k {
                return Err(ModelError::ShapeError(format!(
                    "conv kernel {k} does not fit remaining spatial size {h}"
                )));
            }
            h = (h - k + 1) / 2;
            if h == 0 {
                return Err(ModelError::ShapeError(
                    "pooling collapses the spatial size to zero".into(),
                ));
            }
            prev_ch = out_ch;
        }
        blocks.push(BlockSpec::Flatten { spatial: h });
        blocks.extend(mlp_blocks(&widths, opts.bias));
        ModelSpec::new(blocks, input_shape, sigma2)
    } else {
        Err(parse_err(
            base,
            "model string must start with 'MLP' or 'CNN'",
        ))
    }
}

fn mlp_blocks(widths: &[usize], bias: bool) -> Vec<BlockSpec> {
    (1..widths.len())
        .map(|i| BlockSpec::Linear {
            in_width: widths[i - 1],
            out_width: widths[i],
            relu: i + 1 < widths.len(),
            bias,
        })
        .collect()
}
