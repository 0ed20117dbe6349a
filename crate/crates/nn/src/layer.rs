use serde::{Deserialize, Serialize};

/// Layer kinds available to a [`crate::Network`]. Pooling and upsampling are
/// fixed at factor 2 so every multi-resolution network is a dyadic pyramid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2,
    Upsample2,
    Relu,
    Concat,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool2 => "maxpool2",
            LayerKind::Upsample2 => "upsample2",
            LayerKind::Relu => "relu",
            LayerKind::Concat => "concat",
            LayerKind::Linear { .. } => "linear",
        }
    }

    /// Shapes of the weight and bias tensors, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some((vec![out_features, in_features], vec![out_features])),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` used for weight initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((in_channels * kernel * kernel, out_channels * kernel * kernel)),
            LayerKind::Linear {
                in_features,
                out_features,
            } => Some((in_features, out_features)),
            _ => None,
        }
    }
}

/// Output spatial extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}
