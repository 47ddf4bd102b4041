use crate::error::{Error, Result};

/// Receptive field of one output unit of a conv stack, layers given input
/// to output as `(kernel, stride)`. Iterates `r ← s·(r−1) + k` from the
/// output back to the input, starting at `r = 1`.
pub fn compute_receptive_field(layers: &[(usize, usize)]) -> Result<usize> {
    if layers.is_empty() {
        return Err(Error::contract("receptive field of an empty layer stack"));
    }
    let mut r = 1usize;
    for &(k, s) in layers.iter().rev() {
        if k == 0 || s == 0 {
            return Err(Error::contract(format!(
                "kernel and stride must be positive, got ({k}, {s})"
            )));
        }
        r = s * (r - 1) + k;
    }
    Ok(r)
}

/// `(kernel, stride)` list of an `n`-layer patch discriminator: `n − 1`
/// stride-2 k4 convs and a stride-1 k2 head.
pub fn discriminator_layers(n: usize) -> Vec<(usize, usize)> {
    let mut layers = vec![(4, 2); n.saturating_sub(1)];
    layers.push((2, 1));
    layers
}

/// Layer count whose receptive field is `patch`, i.e. `patch = 2^(n+1) − 2`.
pub fn layers_for_patch(patch: usize) -> Result<usize> {
    (1..=6)
        .find(|&n| (1usize << (n + 1)) - 2 == patch)
        .ok_or(Error::UnsupportedPatchSize { got: patch })
}
