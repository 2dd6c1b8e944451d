use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn same3x3(in_ch: usize, out_ch: usize) -> Self {
        ConvGeom {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
            padding: 1,
        }
    }

    pub fn pointwise(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ConvGeom {
            in_ch,
            out_ch,
            kernel: 1,
            stride,
            padding: 0,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.kernel, self.kernel]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub geom: ConvGeom,
    pub weight: String,
    pub bias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: String,
    pub beta: String,
    /// Buffer ids (not trainable parameters).
    pub running_mean: String,
    pub running_var: String,
}

impl BatchNorm {
    /// Batch norm whose blocks live under `prefix` (e.g. `s4.r2.c2.bn`).
    pub fn under(prefix: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
            running_mean: format!("{prefix}.running_mean"),
            running_var: format!("{prefix}.running_var"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: String,
    pub bias: String,
}

/// Shortcut branch of a residual block whose channel count or stride changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

/// One layer of a [`super::Network`]. Node `i` is the layer's input and node
/// `i + 1` its output; node 0 is the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv2d(Conv2d),
    MaxPool { size: usize },
    Relu,
    BatchNorm(BatchNorm),
    /// Adds the output of node `from` (optionally projected) to the current input.
    ResidualAdd {
        from: usize,
        projection: Option<Projection>,
    },
    GlobalAvgPool,
    Flatten,
    FullyConnected(Linear),
    Softmax,
}

impl LayerSpec {
    /// Parameter block ids this layer reads.
    pub fn parameter_ids(&self) -> Vec<&str> {
        match self {
            LayerSpec::Conv2d(c) => conv_ids(c),
            LayerSpec::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            LayerSpec::ResidualAdd {
                projection: Some(p),
                ..
            } => {
                let mut ids = conv_ids(&p.conv);
                ids.push(&p.bn.gamma);
                ids.push(&p.bn.beta);
                ids
            }
            LayerSpec::FullyConnected(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }

    /// Non-trainable buffer ids this layer reads.
    pub fn buffer_ids(&self) -> Vec<&str> {
        match self {
            LayerSpec::BatchNorm(bn) => vec![&bn.running_mean, &bn.running_var],
            LayerSpec::ResidualAdd {
                projection: Some(p),
                ..
            } => vec![&p.bn.running_mean, &p.bn.running_var],
            _ => Vec::new(),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d(_))
    }
}

fn conv_ids(c: &Conv2d) -> Vec<&str> {
    let mut ids = vec![c.weight.as_str()];
    if let Some(b) = &c.bias {
        ids.push(b);
    }
    ids
}
