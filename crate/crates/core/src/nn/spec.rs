//! Declarative architecture descriptions and shape inference.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Activation shape between layers (batch dimension excluded).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    /// `[channels, height, width]`
    Image([usize; 3]),
    Flat(usize),
}

impl ActShape {
    pub fn numel(&self) -> usize {
        match self {
            ActShape::Image([c, h, w]) => c * h * w,
            ActShape::Flat(n) => *n,
        }
    }

    /// Per-sample tensor shape.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            ActShape::Image(d) => d.to_vec(),
            ActShape::Flat(n) => vec![*n],
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Image([c, h, w]) => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    /// Weight layout `[in_channels, out_channels, kh, kw]`.
    ConvTranspose {
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    /// Weight layout `[in_features, out_features]`; flattens image inputs.
    Dense { in_features: usize, out_features: usize },
    MaxPool { kernel: [usize; 2], stride: [usize; 2] },
    /// `kernel: None` averages over the whole spatial extent.
    AvgPool {
        kernel: Option<[usize; 2]>,
        stride: [usize; 2],
    },
    Relu,
    Softmax,
    ZeroPad { pad: usize },
    Crop { crop: usize },
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::ConvTranspose { .. } => "conv_transpose",
            LayerKind::Dense { .. } => "dense",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::AvgPool { .. } => "avg_pool",
            LayerKind::Relu => "relu",
            LayerKind::Softmax => "softmax",
            LayerKind::ZeroPad { .. } => "zero_pad",
            LayerKind::Crop { .. } => "crop",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv { .. })
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } | LayerKind::Dense { .. }
        )
    }
}

/// One layer of an [`ArchitectureSpec`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct LayerSpec {
    /// Unique within a spec; parameter names are `<name>.weight` / `<name>.bias`.
    pub name: String,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    pub fn conv(name: &str, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(
            name,
            LayerKind::Conv {
                out_channels,
                kernel: [kernel; 2],
                stride: [stride; 2],
                padding: [padding; 2],
            },
        )
    }

    pub fn conv_transpose(name: &str, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(
            name,
            LayerKind::ConvTranspose {
                out_channels,
                kernel: [kernel; 2],
                stride: [stride; 2],
                padding: [padding; 2],
            },
        )
    }

    pub fn dense(name: &str, in_features: usize, out_features: usize) -> Self {
        Self::new(
            name,
            LayerKind::Dense {
                in_features,
                out_features,
            },
        )
    }

    pub fn max_pool(name: &str, kernel: usize, stride: usize) -> Self {
        Self::new(
            name,
            LayerKind::MaxPool {
                kernel: [kernel; 2],
                stride: [stride; 2],
            },
        )
    }

    pub fn relu(name: &str) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn softmax(name: &str) -> Self {
        Self::new(name, LayerKind::Softmax)
    }
}

/// Either `3` or `[3, 5]` in config files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum Extent {
    Square(usize),
    Rect([usize; 2]),
}

impl From<Extent> for [usize; 2] {
    fn from(e: Extent) -> Self {
        match e {
            Extent::Square(v) => [v, v],
            Extent::Rect(v) => v,
        }
    }
}

impl From<[usize; 2]> for Extent {
    fn from(v: [usize; 2]) -> Self {
        if v[0] == v[1] {
            Extent::Square(v[0])
        } else {
            Extent::Rect(v)
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<Extent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<Extent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<Extent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pad: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    crop: Option<usize>,
}

impl TryFrom<RawLayer> for LayerSpec {
    type Error = String;

    fn try_from(r: RawLayer) -> std::result::Result<Self, String> {
        let need = |v: Option<usize>, field: &str| v.ok_or_else(|| format!("`{}` layer needs `{field}`", r.kind));
        let extent = |v: Option<Extent>, field: &str| -> std::result::Result<[usize; 2], String> {
            v.map(Into::into).ok_or_else(|| format!("`{}` layer needs `{field}`", r.kind))
        };
        let or1 = |v: Option<Extent>| v.map(Into::into).unwrap_or([1, 1]);
        let or0 = |v: Option<Extent>| v.map(Into::into).unwrap_or([0, 0]);
        let kind = match r.kind.as_str() {
            "conv" => LayerKind::Conv {
                out_channels: need(r.out_channels, "out_channels")?,
                kernel: extent(r.kernel, "kernel")?,
                stride: or1(r.stride),
                padding: or0(r.padding),
            },
            "conv_transpose" => LayerKind::ConvTranspose {
                out_channels: need(r.out_channels, "out_channels")?,
                kernel: extent(r.kernel, "kernel")?,
                stride: or1(r.stride),
                padding: or0(r.padding),
            },
            "dense" => LayerKind::Dense {
                in_features: need(r.in_features, "in_features")?,
                out_features: need(r.out_features, "out_features")?,
            },
            "max_pool" => {
                let kernel = extent(r.kernel, "kernel")?;
                LayerKind::MaxPool {
                    kernel,
                    stride: r.stride.map(Into::into).unwrap_or(kernel),
                }
            }
            "avg_pool" => {
                let kernel: Option<[usize; 2]> = r.kernel.map(Into::into);
                LayerKind::AvgPool {
                    kernel,
                    stride: r.stride.map(Into::into).or(kernel).unwrap_or([1, 1]),
                }
            }
            "relu" => LayerKind::Relu,
            "softmax" => LayerKind::Softmax,
            "zero_pad" => LayerKind::ZeroPad {
                pad: need(r.pad, "pad")?,
            },
            "crop" => LayerKind::Crop {
                crop: need(r.crop, "crop")?,
            },
            other => return Err(format!("unknown layer kind `{other}`")),
        };
        Ok(LayerSpec {
            name: r.name.unwrap_or_default(),
            kind,
        })
    }
}

impl From<LayerSpec> for RawLayer {
    fn from(l: LayerSpec) -> Self {
        let mut r = RawLayer {
            kind: l.kind.tag().to_string(),
            name: (!l.name.is_empty()).then_some(l.name),
            out_channels: None,
            kernel: None,
            stride: None,
            padding: None,
            in_features: None,
            out_features: None,
            pad: None,
            crop: None,
        };
        match l.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            }
            | LayerKind::ConvTranspose {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                r.out_channels = Some(out_channels);
                r.kernel = Some(kernel.into());
                r.stride = Some(stride.into());
                r.padding = Some(padding.into());
            }
            LayerKind::Dense {
                in_features,
                out_features,
            } => {
                r.in_features = Some(in_features);
                r.out_features = Some(out_features);
            }
            LayerKind::MaxPool { kernel, stride } => {
                r.kernel = Some(kernel.into());
                r.stride = Some(stride.into());
            }
            LayerKind::AvgPool { kernel, stride } => {
                r.kernel = kernel.map(Into::into);
                r.stride = Some(stride.into());
            }
            LayerKind::ZeroPad { pad } => r.pad = Some(pad),
            LayerKind::Crop { crop } => r.crop = Some(crop),
            LayerKind::Relu | LayerKind::Softmax => {}
        }
        r
    }
}

/// A named position in the layer list: `at` layers have run when it is reached.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Boundary {
    pub name: String,
    pub at: usize,
}

/// Well-known boundary names.
pub mod marker {
    /// Latent code of the autoencoder encoder.
    pub const ENCODER_OUT: &str = "encoder_out";
    /// Reconstructed image at the decoder output.
    pub const DECODER_OUT: &str = "decoder_out";
    /// Logits, just before the final softmax.
    pub const PRE_SOFTMAX: &str = "pre_softmax";
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    /// `[channels, height, width]`
    pub input_shape: [usize; 3],
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub boundaries: Vec<Boundary>,
}

impl ArchitectureSpec {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Self {
        let mut spec = ArchitectureSpec {
            name: name.into(),
            input_shape,
            layers,
            boundaries: Vec::new(),
        };
        spec.fill_names();
        spec
    }

    pub fn with_boundary(mut self, name: &str, at: usize) -> Self {
        self.boundaries.retain(|b| b.name != name);
        self.boundaries.push(Boundary {
            name: name.to_string(),
            at,
        });
        self
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut spec: ArchitectureSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("architecture spec: {e}")))?;
        spec.fill_names();
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("architecture specs always serialize")
    }

    /// Gives unnamed layers a `<kind><index>` name.
    fn fill_names(&mut self) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if layer.name.is_empty() {
                layer.name = format!("{}{i}", layer.kind.tag());
            }
        }
    }

    /// Shape inference plus name/boundary sanity checks.
    pub fn validate(&self) -> Result<Vec<ActShape>> {
        for (i, layer) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(layer_error(i, layer, "duplicate layer name".into()));
            }
        }
        for b in &self.boundaries {
            if b.at > self.layers.len() {
                return Err(Error::Config(format!(
                    "boundary `{}` at {} beyond {} layers",
                    b.name,
                    b.at,
                    self.layers.len()
                )));
            }
        }
        self.shapes()
    }

    /// Activation shape after each layer; index 0 is the input.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape {:?} must be positive", self.input_shape)));
        }
        let mut shapes = vec![ActShape::Image(self.input_shape)];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().expect("non-empty");
            let next = layer_output(&layer.kind, cur).map_err(|reason| layer_error(i, layer, reason))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<ActShape> {
        Ok(*self.shapes()?.last().expect("non-empty"))
    }

    /// Number of layers to run to reach `name`.
    ///
    /// `pre_softmax` resolves implicitly to "all but a trailing softmax".
    pub fn boundary(&self, name: &str) -> Result<usize> {
        if let Some(b) = self.boundaries.iter().find(|b| b.name == name) {
            return Ok(b.at);
        }
        if name == marker::PRE_SOFTMAX {
            return Ok(match self.layers.last() {
                Some(l) if l.kind == LayerKind::Softmax => self.layers.len() - 1,
                _ => self.layers.len(),
            });
        }
        Err(Error::UnknownMarker(name.to_string()))
    }

    /// The first `at` layers as their own spec.
    pub fn prefix(&self, name: &str, at: usize) -> ArchitectureSpec {
        ArchitectureSpec {
            name: name.to_string(),
            input_shape: self.input_shape,
            layers: self.layers[..at].to_vec(),
            boundaries: self.boundaries.iter().filter(|b| b.at <= at).cloned().collect(),
        }
    }

    /// `self` followed by `next`; `next`'s input must match `self`'s output.
    pub fn then(&self, name: &str, next: &ArchitectureSpec) -> Result<ArchitectureSpec> {
        let out = self.output_shape()?;
        if out != ActShape::Image(next.input_shape) {
            return Err(Error::Config(format!(
                "cannot chain `{}` (output {out}) into `{}` (input {:?})",
                self.name, next.name, next.input_shape
            )));
        }
        let offset = self.layers.len();
        let mut layers = self.layers.clone();
        layers.extend(next.layers.iter().cloned());
        let mut boundaries = self.boundaries.clone();
        boundaries.extend(next.boundaries.iter().map(|b| Boundary {
            name: b.name.clone(),
            at: b.at + offset,
        }));
        let spec = ArchitectureSpec {
            name: name.to_string(),
            input_shape: self.input_shape,
            layers,
            boundaries,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn layer_error(index: usize, layer: &LayerSpec, reason: String) -> Error {
    Error::Layer {
        index,
        name: layer.name.clone(),
        reason,
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

fn layer_output(kind: &LayerKind, cur: ActShape) -> std::result::Result<ActShape, String> {
    let image = |what: &str| match cur {
        ActShape::Image(d) => Ok(d),
        ActShape::Flat(n) => Err(format!("{what} needs an image input, got flat {n}")),
    };
    match *kind {
        LayerKind::Conv {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let [_, h, w] = image("conv")?;
            let oh = out_extent(h, kernel[0], stride[0], padding[0]);
            let ow = out_extent(w, kernel[1], stride[1], padding[1]);
            match (oh, ow, out_channels) {
                (Some(oh), Some(ow), m) if m > 0 => Ok(ActShape::Image([m, oh, ow])),
                _ => Err(format!("kernel {kernel:?} stride {stride:?} padding {padding:?} does not fit {cur}")),
            }
        }
        LayerKind::ConvTranspose {
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let [_, h, w] = image("conv_transpose")?;
            let full_h = (h - 1) * stride[0] + kernel[0];
            let full_w = (w - 1) * stride[1] + kernel[1];
            if out_channels == 0 || stride.contains(&0) || full_h <= 2 * padding[0] || full_w <= 2 * padding[1] {
                return Err(format!("transposed kernel {kernel:?} padding {padding:?} empties {cur}"));
            }
            Ok(ActShape::Image([out_channels, full_h - 2 * padding[0], full_w - 2 * padding[1]]))
        }
        LayerKind::Dense {
            in_features,
            out_features,
        } => {
            if cur.numel() != in_features {
                return Err(format!("declares {in_features} inputs but receives {cur} = {}", cur.numel()));
            }
            if out_features == 0 {
                return Err("dense layer needs at least one output".into());
            }
            Ok(ActShape::Flat(out_features))
        }
        LayerKind::MaxPool { kernel, stride } => {
            let [c, h, w] = image("max_pool")?;
            if kernel[0] > h || kernel[1] > w {
                return Err(format!("pool window {kernel:?} larger than {cur}"));
            }
            Ok(ActShape::Image([
                c,
                out_extent(h, kernel[0], stride[0], 0).ok_or("bad pool stride")?,
                out_extent(w, kernel[1], stride[1], 0).ok_or("bad pool stride")?,
            ]))
        }
        LayerKind::AvgPool { kernel, stride } => {
            let [c, h, w] = image("avg_pool")?;
            let kernel = kernel.unwrap_or([h, w]);
            if kernel[0] > h || kernel[1] > w {
                return Err(format!("pool window {kernel:?} larger than {cur}"));
            }
            Ok(ActShape::Image([
                c,
                out_extent(h, kernel[0], stride[0], 0).ok_or("bad pool stride")?,
                out_extent(w, kernel[1], stride[1], 0).ok_or("bad pool stride")?,
            ]))
        }
        LayerKind::Relu => Ok(cur),
        LayerKind::Softmax => match cur {
            ActShape::Flat(_) => Ok(cur),
            ActShape::Image(_) => Err(format!("softmax needs a flat input, got {cur}")),
        },
        LayerKind::ZeroPad { pad } => {
            let [c, h, w] = image("zero_pad")?;
            Ok(ActShape::Image([c, h + 2 * pad, w + 2 * pad]))
        }
        LayerKind::Crop { crop } => {
            let [c, h, w] = image("crop")?;
            if 2 * crop >= h || 2 * crop >= w {
                return Err(format!("cannot crop {crop} from {cur}"));
            }
            Ok(ActShape::Image([c, h - 2 * crop, w - 2 * crop]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_spec() {
        let spec = ArchitectureSpec::new(
            "tiny",
            [1, 5, 5],
            vec![
                LayerSpec::conv("c1", 2, 3, 1, 0),
                LayerSpec::relu("r1"),
                LayerSpec::dense("fc", 18, 3),
                LayerSpec::softmax("sm"),
            ],
        );
        let back = ArchitectureSpec::from_toml(&spec.to_toml()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn unknown_fields_and_kinds_are_rejected() {
        let bad_field = "name='x'\ninput_shape=[1,4,4]\n[[layers]]\nkind='relu'\nbogus=1\n";
        assert!(ArchitectureSpec::from_toml(bad_field).is_err());
        let bad_kind = "name='x'\ninput_shape=[1,4,4]\n[[layers]]\nkind='lstm'\n";
        let err = ArchitectureSpec::from_toml(bad_kind).unwrap_err().to_string();
        assert!(err.contains("lstm"), "{err}");
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let spec = ArchitectureSpec::new(
            "bad",
            [1, 4, 4],
            vec![LayerSpec::conv("c1", 2, 3, 1, 0), LayerSpec::dense("fc", 10, 3)],
        );
        let err = spec.validate().unwrap_err();
        assert!(matches!(err, Error::Layer { index: 1, ref name, .. } if name == "fc"), "{err}");
    }

    #[test]
    fn unnamed_layers_get_kind_index_names() {
        let text = "name='x'\ninput_shape=[1,4,4]\n[[layers]]\nkind='relu'\n";
        let spec = ArchitectureSpec::from_toml(text).unwrap();
        assert_eq!(spec.layers[0].name, "relu0");
    }

    #[test]
    fn pre_softmax_is_implicit() {
        let spec = ArchitectureSpec::new(
            "t",
            [1, 2, 2],
            vec![LayerSpec::dense("fc", 4, 2), LayerSpec::softmax("sm")],
        );
        assert_eq!(spec.boundary(marker::PRE_SOFTMAX).unwrap(), 1);
        assert!(matches!(spec.boundary("nope"), Err(Error::UnknownMarker(_))));
    }
}
