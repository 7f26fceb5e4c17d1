//! Central finite-difference gradient checking.
//!
//! The checker treats the forward implementation as a black box: it rebuilds
//! the graph from perturbed copies of the inputs and differences the f32 loss
//! values in f64. Coordinates are sampled with a fixed stride so runs are
//! deterministic without an RNG.

use crate::tensor::{Graph, Tensor, TensorData, TensorError};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdSummary {
    /// Largest |fd - analytic| / scale over all checked coordinates, where
    /// scale is the larger of the two gradient magnitudes in play, floored.
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst_input: usize,
    pub worst_coord: usize,
}

/// Step size the suite uses everywhere (f32 forward, f64 differencing).
pub const FD_STEP: f32 = 1e-2;

/// Checks analytic gradients of `build` against central finite differences.
///
/// `build` must construct a scalar loss from one leaf tensor per entry of
/// `inputs`, using only recorded graph ops. At most `max_coords` coordinates
/// per input are probed (evenly strided).
pub fn fd_check(
    inputs: &[TensorData],
    max_coords: usize,
    build: impl Fn(&Graph, &[Tensor]) -> Result<Tensor, TensorError>,
) -> Result<FdSummary, TensorError> {
    let eval = |data: &[TensorData]| -> Result<f32, TensorError> {
        let g = Graph::new();
        let leaves: Vec<Tensor> = data.iter().map(|d| g.leaf(d.clone())).collect();
        let loss = build(&g, &leaves)?;
        if !loss.shape().is_scalar() {
            return Err(TensorError::NonScalarLoss(loss.shape()));
        }
        Ok(loss.data()[0])
    };

    // analytic pass
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|d| g.leaf(d.clone())).collect();
    let loss = build(&g, &leaves)?;
    loss.backward()?;
    let analytic: Vec<Vec<f32>> = leaves
        .iter()
        .map(|t| t.grad().expect("leaf grad populated by backward"))
        .collect();

    let mut summary = FdSummary {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst_input: 0,
        worst_coord: 0,
    };
    let mut work = inputs.to_vec();
    for (slot, input) in inputs.iter().enumerate() {
        let n = input.values.len();
        let count = n.min(max_coords);
        let stride = n.div_ceil(count);
        // scale for the relative error: gradient magnitude of this slot
        let slot_scale = analytic[slot]
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs() as f64))
            .max(1e-4);
        for ci in 0..count {
            let i = (ci * stride) % n;
            let orig = work[slot].values[i];
            work[slot].values[i] = orig + FD_STEP;
            let lp = eval(&work)? as f64;
            work[slot].values[i] = orig - FD_STEP;
            let lm = eval(&work)? as f64;
            work[slot].values[i] = orig;
            let fd = (lp - lm) / (2.0 * FD_STEP as f64);
            let an = analytic[slot][i] as f64;
            let scale = fd.abs().max(an.abs()).max(slot_scale);
            let rel = (fd - an).abs() / scale;
            summary.coords_checked += 1;
            if rel > summary.max_rel_err {
                summary.max_rel_err = rel;
                summary.worst_input = slot;
                summary.worst_coord = i;
            }
        }
    }
    Ok(summary)
}
