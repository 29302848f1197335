//! Finite-difference verification of tape gradients.

use super::{Real, Tape, Tensor, ValId};
use crate::error::Result;

/// Compare analytic gradients against central finite differences.
///
/// `build` must deterministically reconstruct the forward graph from the
/// staged parameter ids and return a scalar loss. Returns the max over all
/// parameter coordinates of
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// The forward is re-evaluated 2x per coordinate, so keep the parameter
/// count small (this is a verification tool, not a training-time check).
/// A non-deterministic `build` makes the result meaningless.
pub fn gradcheck<T: Real, F>(params: &mut [Tensor<T>], mut build: F, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<T>, &[ValId]) -> Result<ValId>,
{
    assert!(eps > 0.0, "gradcheck eps must be positive");

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<ValId> = params
        .iter()
        .map(|p| tape.param(p))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, p)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); p.numel()])
        })
        .collect();
    drop(tape);

    let eval = |params: &[Tensor<T>], build: &mut F| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<ValId> = params
            .iter()
            .map(|p| tape.param(p))
            .collect::<Result<_>>()?;
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar(loss)?.as_f64())
    };

    let mut worst = 0.0f64;
    for pi in 0..params.len() {
        for ci in 0..params[pi].numel() {
            let orig = params[pi].data()[ci];
            params[pi].data_mut()[ci] = orig + T::from_f64(eps);
            let fp = eval(params, &mut build)?;
            params[pi].data_mut()[ci] = orig - T::from_f64(eps);
            let fm = eval(params, &mut build)?;
            params[pi].data_mut()[ci] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi][ci].as_f64();
            let denom = (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
