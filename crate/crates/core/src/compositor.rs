//! Layer algebra: an image edited by a layer is `M ⊙ A + (1 − M) ⊙ I`,
//! the same form for adding and for removing a layer.

use layergan_autograd::{Float, Tape, Var};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Appearance `A` and mask `M` produced by one add or remove operator.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub appearance: Image,
    pub mask: Mask,
}

impl LayerOutput {
    pub fn new(appearance: Image, mask: Mask) -> Result<Self> {
        if appearance.height() != mask.height() || appearance.width() != mask.width() {
            return Err(Error::Invalid(format!(
                "appearance {}x{} and mask {}x{} differ in size",
                appearance.height(),
                appearance.width(),
                mask.height(),
                mask.width()
            )));
        }
        Ok(LayerOutput { appearance, mask })
    }

    /// Operator that changes nothing (`M ≡ 0`).
    pub fn identity(height: usize, width: usize) -> Self {
        LayerOutput {
            appearance: Image::filled(height, width, [0.0; 3]),
            mask: Mask::zeros(height, width),
        }
    }
}

/// Tape handles of a layer, `appearance: [n, 3, h, w]`, `mask: [n, 1, h, w]`.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub appearance: Var,
    pub mask: Var,
}

/// `M ⊙ A + (1 − M) ⊙ I` with the mask broadcast over the colour channels.
pub fn composite(input: &Image, layer: &LayerOutput) -> Result<Image> {
    let (h, w) = (input.height(), input.width());
    if !input.same_size(&layer.appearance) || layer.mask.height() != h || layer.mask.width() != w {
        return Err(Error::Invalid(format!(
            "composite: input {h}x{w}, appearance {}x{}, mask {}x{}",
            layer.appearance.height(),
            layer.appearance.width(),
            layer.mask.height(),
            layer.mask.width()
        )));
    }
    let plane = h * w;
    let m = layer.mask.data();
    let a = layer.appearance.data();
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let mi = m[i % plane];
            mi * a[i] + (1.0 - mi) * x
        })
        .collect();
    Image::from_data(h, w, data)
}

/// Differentiable [`composite`] on batched tape values.
pub fn composite_var<T: Float>(tape: &mut Tape<T>, input: Var, layer: LayerVars) -> Result<Var> {
    let channels = tape.shape(input).get(1).copied().unwrap_or(0);
    let m = tape.expand_channels(layer.mask, channels)?;
    let ma = tape.mul(m, layer.appearance)?;
    let keep = tape.one_minus(m);
    let mi = tape.mul(keep, input)?;
    Ok(tape.add(ma, mi)?)
}

/// `Σ m1 ⊙ m2` over all pixels.
pub fn soft_intersection(m1: &Mask, m2: &Mask) -> Result<f64> {
    if !m1.same_size(m2) {
        return Err(Error::Invalid(format!(
            "soft_intersection: {}x{} vs {}x{}",
            m1.height(),
            m1.width(),
            m2.height(),
            m2.width()
        )));
    }
    Ok(m1
        .data()
        .iter()
        .zip(m2.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum())
}

/// Binary mask of pixels with `m >= tau`.
pub fn threshold_mask(m: &Mask, tau: f32) -> Mask {
    let data = m.data().iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect();
    Mask::from_data(m.height(), m.width(), data).expect("same size")
}
