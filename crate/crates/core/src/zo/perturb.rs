use crate::error::{Error, Result};
use crate::model::LayerSpec;
use crate::prng::rademacher_fill;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Apply,
    Remove,
}

/// Add (`Apply`) or subtract (`Remove`) `μ·ξ` on a layer's weights and
/// biases, where `ξ = rademacher_fill(seed, d_w)`.
///
/// No clipping is applied, so weights may transiently leave the 8-bit range
/// by `μ`; removal restores the layer bit-exactly.
pub fn perturb_weights_inplace(layer: &mut LayerSpec, seed: u32, mu: i32, dir: Direction) -> Result<()> {
    if seed == 0 {
        return Err(Error::ZeroSeed);
    }
    match (dir, layer.pending) {
        (Direction::Apply, Some(_)) => {
            return Err(Error::InvalidArgument("layer is already perturbed".into()))
        }
        (Direction::Remove, p) if p != Some((seed, mu)) => {
            return Err(Error::InvalidArgument(
                "remove requires a matching prior apply".into(),
            ))
        }
        _ => {}
    }
    let (Some(w), Some(b)) = (layer.weights.as_mut(), layer.bias.as_mut()) else {
        return Err(Error::InvalidArgument("layer has no parameters".into()));
    };
    let xi = rademacher_fill(seed, w.len() + b.len())?;
    let sign = if dir == Direction::Apply { mu } else { -mu };
    let (xw, xb) = xi.split_at(w.len());
    // Check bias headroom before touching anything.
    for (v, &x) in b.data().iter().zip(xb) {
        if v.checked_add(sign * x as i32).is_none() {
            return Err(Error::AccumulatorOverflow {
                layer: 0,
                value: *v as i128 + (sign * x as i32) as i128,
            });
        }
    }
    for (v, &x) in w.data_mut().iter_mut().zip(xw) {
        *v += sign * x as i32;
    }
    for (v, &x) in b.data_mut().iter_mut().zip(xb) {
        *v += sign * x as i32;
    }
    layer.pending = (dir == Direction::Apply).then_some((seed, mu));
    Ok(())
}
