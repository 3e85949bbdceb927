//! Network definitions: a small declarative layer list, a named parameter
//! store, and the classifier and purifier built from them.

mod classifier;
mod params;
mod purifier;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, Graph, Var};
use crate::rng::Rng;
use crate::tensor::{conv_out_extent, conv_transpose_out_extent, ConvGeometry, Scalar, TensorError};

pub use classifier::{Classifier, ClassifierSpec, InternalRepresentation};
pub use params::{ParamStore, Session};
pub use purifier::{reparameterize, DatasetStats, Purifier, PurifierSpec, PurifierWidths, ReprEncoderSpec};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// `logvar` is clamped to this range before exponentiation.
pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("internal representation is missing capture layer `{0}`")]
    MissingCapture(String),
    #[error("layer `{layer}`: {detail}")]
    Mismatch { layer: String, detail: String },
    #[error("invalid network spec: {0}")]
    Spec(String),
}

/// Whether batch-norm layers use batch statistics (and report them) or their
/// running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    ConvTranspose2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
    },
    BatchNorm {
        name: String,
        features: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Sigmoid,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
    Flatten,
    Unflatten {
        shape: Vec<usize>,
    },
}

impl Layer {
    pub fn conv(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Layer::Conv2d {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            padding,
            bias,
        }
    }

    pub fn batch_norm(name: &str, features: usize) -> Self {
        Layer::BatchNorm {
            name: name.into(),
            features,
        }
    }

    pub fn linear(name: &str, fin: usize, fout: usize, bias: bool) -> Self {
        Layer::Linear {
            name: name.into(),
            in_features: fin,
            out_features: fout,
            bias,
        }
    }

    pub fn leaky() -> Self {
        Layer::LeakyRelu { slope: LEAKY_SLOPE }
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv2d { name, .. }
            | Layer::ConvTranspose2d { name, .. }
            | Layer::BatchNorm { name, .. }
            | Layer::Linear { name, .. } => Some(name),
            _ => None,
        }
    }

    /// Output shape (without batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NetError> {
        let mismatch = |detail: String| NetError::Mismatch {
            layer: self.name().unwrap_or("?").to_string(),
            detail,
        };
        match self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(mismatch(format!("expects {in_channels} input channels, got {input:?}")));
                }
                let g = ConvGeometry::new(*kernel, *stride, *padding);
                Ok(vec![*out_channels, conv_out_extent(input[1], g)?, conv_out_extent(input[2], g)?])
            }
            Layer::ConvTranspose2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                output_padding,
                ..
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(mismatch(format!("expects {in_channels} input channels, got {input:?}")));
                }
                let g = ConvGeometry::new(*kernel, *stride, *padding).with_output_padding(*output_padding);
                Ok(vec![
                    *out_channels,
                    conv_transpose_out_extent(input[1], g)?,
                    conv_transpose_out_extent(input[2], g)?,
                ])
            }
            Layer::BatchNorm { features, .. } => {
                if input.first() != Some(features) {
                    return Err(mismatch(format!("expects {features} features, got {input:?}")));
                }
                Ok(input.to_vec())
            }
            Layer::LeakyRelu { .. } | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Linear {
                in_features,
                out_features,
                ..
            } => {
                if input != [*in_features] {
                    return Err(mismatch(format!("expects flat input of {in_features}, got {input:?}")));
                }
                Ok(vec![*out_features])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Unflatten { shape } => {
                if input.iter().product::<usize>() != shape.iter().product::<usize>() {
                    return Err(NetError::Mismatch {
                        layer: "unflatten".into(),
                        detail: format!("cannot view {input:?} as {shape:?}"),
                    });
                }
                Ok(shape.clone())
            }
        }
    }

    /// Learnable parameters and buffers with their shapes and initial values.
    fn init_params<T: Scalar>(&self, prefix: &str, rng: &mut Rng, store: &mut ParamStore<T>) {
        use crate::tensor::Tensor;
        let uniform = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut t = Tensor::zeros(shape);
            rng.fill_uniform(t.data_mut(), -bound, bound);
            t
        };
        match self {
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                store.insert(format!("{prefix}{name}.weight"), uniform(&[*out_channels, *in_channels, *kernel, *kernel], fan_in, rng));
                if *bias {
                    store.insert(format!("{prefix}{name}.bias"), uniform(&[*out_channels], fan_in, rng));
                }
            }
            Layer::ConvTranspose2d {
                name,
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let fan_in = out_channels * kernel * kernel;
                store.insert(format!("{prefix}{name}.weight"), uniform(&[*in_channels, *out_channels, *kernel, *kernel], fan_in, rng));
                if *bias {
                    store.insert(format!("{prefix}{name}.bias"), uniform(&[*out_channels], fan_in, rng));
                }
            }
            Layer::Linear {
                name,
                in_features,
                out_features,
                bias,
            } => {
                store.insert(format!("{prefix}{name}.weight"), uniform(&[*out_features, *in_features], *in_features, rng));
                if *bias {
                    store.insert(format!("{prefix}{name}.bias"), uniform(&[*out_features], *in_features, rng));
                }
            }
            Layer::BatchNorm { name, features } => {
                store.insert(format!("{prefix}{name}.weight"), Tensor::ones(&[*features]));
                store.insert(format!("{prefix}{name}.bias"), Tensor::zeros(&[*features]));
                store.insert(format!("{prefix}{name}.running_mean"), Tensor::zeros(&[*features]));
                store.insert(format!("{prefix}{name}.running_var"), Tensor::ones(&[*features]));
            }
            _ => {}
        }
    }
}

/// Shape after running `layers` on a (batchless) input shape.
pub fn infer_shape(layers: &[Layer], input: &[usize]) -> Result<Vec<usize>, NetError> {
    layers
        .iter()
        .try_fold(input.to_vec(), |shape, layer| layer.output_shape(&shape))
}

pub(crate) fn init_layers<T: Scalar>(layers: &[Layer], prefix: &str, rng: &mut Rng, store: &mut ParamStore<T>) {
    for layer in layers {
        layer.init_params(prefix, rng, store);
    }
}

/// Records every layer of `layers` on the graph. `tap` sees the output of each
/// convolution before normalisation or activation.
pub fn run_layers<T: Scalar>(
    g: &mut Graph<T>,
    sess: &mut Session<'_, T>,
    layers: &[Layer],
    prefix: &str,
    mut x: Var,
    mut tap: impl FnMut(&str, Var),
) -> Result<Var, NetError> {
    for layer in layers {
        x = match layer {
            Layer::Conv2d {
                name,
                stride,
                padding,
                bias,
                ..
            } => {
                let w = sess.param(g, &format!("{prefix}{name}.weight"))?;
                let b = if *bias {
                    Some(sess.param(g, &format!("{prefix}{name}.bias"))?)
                } else {
                    None
                };
                let y = g.conv2d(x, w, b, *stride, *padding).map_err(|e| wrap(name, e))?;
                tap(name, y);
                y
            }
            Layer::ConvTranspose2d {
                name,
                stride,
                padding,
                output_padding,
                bias,
                ..
            } => {
                let w = sess.param(g, &format!("{prefix}{name}.weight"))?;
                let b = if *bias {
                    Some(sess.param(g, &format!("{prefix}{name}.bias"))?)
                } else {
                    None
                };
                g.conv_transpose2d(x, w, b, *stride, *padding, *output_padding)
                    .map_err(|e| wrap(name, e))?
            }
            Layer::BatchNorm { name, .. } => {
                let full = format!("{prefix}{name}");
                let gamma = sess.param(g, &format!("{full}.weight"))?;
                let beta = sess.param(g, &format!("{full}.bias"))?;
                sess.batch_norm(g, &full, x, gamma, beta)?
            }
            Layer::LeakyRelu { slope } => g.leaky_relu(x, T::of(*slope)),
            Layer::Sigmoid => g.sigmoid(x),
            Layer::Linear { name, bias, .. } => {
                let w = sess.param(g, &format!("{prefix}{name}.weight"))?;
                let b = if *bias {
                    Some(sess.param(g, &format!("{prefix}{name}.bias"))?)
                } else {
                    None
                };
                g.linear(x, w, b).map_err(|e| wrap(name, e))?
            }
            Layer::Flatten => g.flatten(x)?,
            Layer::Unflatten { shape } => {
                let n = g.value(x).batch();
                let mut full = vec![n];
                full.extend_from_slice(shape);
                g.reshape(x, &full)?
            }
        };
    }
    Ok(x)
}

fn wrap(layer: &str, e: TensorError) -> NetError {
    NetError::Mismatch {
        layer: layer.to_string(),
        detail: e.to_string(),
    }
}

pub(crate) fn bn_mode<'a, T: Scalar>(
    mode: Mode,
    mean: &'a [T],
    var: &'a [T],
) -> BatchNormMode<'a, T> {
    match mode {
        Mode::Train => BatchNormMode::Train,
        Mode::Eval => BatchNormMode::Eval { mean, var },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_inference_follows_conv_formula() {
        let layers = vec![
            Layer::conv("c0", 3, 6, 3, 2, 1, false),
            Layer::batch_norm("bn0", 6),
            Layer::leaky(),
            Layer::conv("c1", 6, 12, 3, 2, 1, false),
        ];
        assert_eq!(infer_shape(&layers, &[3, 32, 32]).unwrap(), vec![12, 8, 8]);
        assert_eq!(infer_shape(&layers, &[3, 28, 28]).unwrap(), vec![12, 7, 7]);
        let err = infer_shape(&layers, &[1, 28, 28]).unwrap_err();
        assert!(err.to_string().contains("c0"));
    }

    #[test]
    fn layer_specs_serialise_with_kind_tag() {
        let l = Layer::linear("fc", 4, 2, true);
        let s = serde_json::to_string(&l).unwrap();
        assert!(s.contains("\"kind\":\"linear\""));
        let back: Layer = serde_json::from_str(&s).unwrap();
        assert_eq!(back, l);
    }
}
