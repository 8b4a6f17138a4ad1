//! Multiply-accumulate and parameter accounting.

use super::spec::{ActShape, ArchitectureSpec, LayerKind};
use crate::error::Result;
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub output: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Complexity {
    pub macs: u64,
    pub params: u64,
    pub layers: Vec<LayerCost>,
}

/// Conv: `out_h*out_w*out_c*(kh*kw*in_c)`. Transposed conv: every input
/// pixel scatters a full kernel, `in_h*in_w*in_c*(kh*kw*out_c)`. Dense:
/// `in*out`. Everything else is free.
pub fn count_macs_params(spec: &ArchitectureSpec) -> Result<Complexity> {
    let shapes = spec.validate()?;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let (input, output) = (shapes[i], shapes[i + 1]);
        let (macs, params) = match (&layer.kind, input, output) {
            (LayerKind::Conv { kernel, .. }, ActShape::Image([ic, _, _]), ActShape::Image([oc, oh, ow])) => {
                let taps = (kernel[0] * kernel[1] * ic) as u64;
                ((oh * ow * oc) as u64 * taps, taps * oc as u64 + oc as u64)
            }
            (
                LayerKind::ConvTranspose { kernel, .. },
                ActShape::Image([ic, ih, iw]),
                ActShape::Image([oc, _, _]),
            ) => {
                let taps = (kernel[0] * kernel[1] * oc) as u64;
                ((ih * iw * ic) as u64 * taps, taps * ic as u64 + oc as u64)
            }
            (
                LayerKind::Dense {
                    in_features,
                    out_features,
                },
                _,
                _,
            ) => {
                let w = (in_features * out_features) as u64;
                (w, w + *out_features as u64)
            }
            _ => (0, 0),
        };
        layers.push(LayerCost {
            name: layer.name.clone(),
            kind: layer.kind.tag(),
            output: output.to_string(),
            macs,
            params,
        });
    }
    Ok(Complexity {
        macs: layers.iter().map(|l| l.macs).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::LayerSpec;

    #[test]
    fn single_conv_hand_count() {
        let spec = ArchitectureSpec::new("c", [1, 5, 5], vec![LayerSpec::conv("c", 1, 3, 1, 0)]);
        let c = count_macs_params(&spec).unwrap();
        assert_eq!((c.macs, c.params), (81, 10));
    }

    #[test]
    fn dense_hand_count() {
        let spec = ArchitectureSpec::new("d", [64, 8, 8], vec![LayerSpec::dense("fc", 4096, 200)]);
        let c = count_macs_params(&spec).unwrap();
        assert_eq!((c.macs, c.params), (819_200, 819_400));
    }

    #[test]
    fn conv_transpose_hand_count() {
        // 2x2 input, 1 -> 2 channels, 3x3 kernel: 4 pixels * 9 taps * 2 outputs.
        let spec = ArchitectureSpec::new("t", [1, 2, 2], vec![LayerSpec::conv_transpose("t", 2, 3, 1, 0)]);
        let c = count_macs_params(&spec).unwrap();
        assert_eq!((c.macs, c.params), (72, 20));
    }
}
