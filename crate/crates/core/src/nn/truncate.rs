//! Building a code-bridged classifier spec from an encoder and a base CNN.

use super::spec::{marker, ActShape, ArchitectureSpec, Boundary, LayerKind, LayerSpec};
use crate::error::{Error, Result};

/// Number of layers before the first dense or average-pool layer.
pub fn stem_len(base: &ArchitectureSpec) -> usize {
    base.layers
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Dense { .. } | LayerKind::AvgPool { .. }))
        .unwrap_or(base.layers.len())
}

/// Convolutions in the base's stem: the maximum `layers_removed`.
pub fn stem_convs(base: &ArchitectureSpec) -> usize {
    base.layers[..stem_len(base)].iter().filter(|l| l.kind.is_conv()).count()
}

/// Encoder layers (up to `encoder_out` when marked) followed by `base` minus
/// its first `layers_removed` convolutions (each with the ReLU right after it).
///
/// With a non-empty encoder the latent code replaces the image, so the
/// remaining stem keeps the latent's spatial extent: max-pools are dropped
/// and convolutions become stride-1 "same" convolutions. The first dense
/// layer is resized to whatever the stem now produces.
pub fn truncate_for_cbc(
    base: &ArchitectureSpec,
    encoder: &ArchitectureSpec,
    layers_removed: usize,
) -> Result<ArchitectureSpec> {
    base.validate()?;
    let convs = stem_convs(base);
    if layers_removed > convs {
        return Err(Error::Config(format!(
            "cannot remove {layers_removed} conv layers: `{}` has {convs} before its classifier head",
            base.name
        )));
    }
    let enc_len = encoder.boundary(marker::ENCODER_OUT).unwrap_or(encoder.layers.len());
    let mut layers: Vec<LayerSpec> = encoder.layers[..enc_len].to_vec();
    let bridged = enc_len > 0;
    let stem = stem_len(base);

    let mut removed = 0;
    let mut skip_relu = false;
    for (i, layer) in base.layers.iter().enumerate() {
        let in_stem = i < stem;
        match &layer.kind {
            LayerKind::Conv { .. } if in_stem && removed < layers_removed => {
                removed += 1;
                skip_relu = true;
                continue;
            }
            LayerKind::Relu if skip_relu => {
                skip_relu = false;
                continue;
            }
            LayerKind::MaxPool { .. } if in_stem && bridged => {}
            &LayerKind::Conv {
                out_channels,
                kernel,
                ..
            } if in_stem && bridged => layers.push(LayerSpec::new(
                layer.name.clone(),
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    stride: [1, 1],
                    padding: [(kernel[0] - 1) / 2, (kernel[1] - 1) / 2],
                },
            )),
            _ => layers.push(layer.clone()),
        }
        if !matches!(layer.kind, LayerKind::Conv { .. }) {
            skip_relu = false;
        }
    }

    let mut spec = ArchitectureSpec {
        name: format!("{}-cbc{layers_removed}", base.name),
        input_shape: if bridged { encoder.input_shape } else { base.input_shape },
        layers,
        boundaries: Vec::new(),
    };
    if bridged {
        spec.boundaries.push(Boundary {
            name: marker::ENCODER_OUT.to_string(),
            at: enc_len,
        });
    }
    resize_first_dense(&mut spec)?;
    spec.validate()?;
    Ok(spec)
}

fn resize_first_dense(spec: &mut ArchitectureSpec) -> Result<()> {
    let Some(i) = spec
        .layers
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Dense { .. }))
    else {
        return Ok(());
    };
    let prefix = spec.prefix("stem", i);
    let flat = prefix.output_shape()?;
    if let LayerKind::Dense { in_features, .. } = &mut spec.layers[i].kind {
        *in_features = ActShape::numel(&flat);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nothing_removed_with_empty_encoder_is_base() {
        let base = ArchitectureSpec::new(
            "b",
            [1, 6, 6],
            vec![
                LayerSpec::conv("c1", 2, 3, 1, 0),
                LayerSpec::relu("r1"),
                LayerSpec::max_pool("p1", 2, 2),
                LayerSpec::dense("fc", 8, 3),
            ],
        );
        let enc = ArchitectureSpec::new("e", [1, 6, 6], vec![]);
        let t = truncate_for_cbc(&base, &enc, 0).unwrap();
        assert_eq!(t.layers, base.layers);
        assert_eq!(t.input_shape, base.input_shape);
    }

    #[test]
    fn too_many_removed_is_an_error() {
        let base = ArchitectureSpec::new("b", [1, 6, 6], vec![LayerSpec::conv("c1", 2, 3, 1, 0)]);
        let enc = ArchitectureSpec::new("e", [1, 6, 6], vec![]);
        assert!(truncate_for_cbc(&base, &enc, 2).is_err());
    }
}
