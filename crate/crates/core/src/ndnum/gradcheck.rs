use rand::seq::index::sample;
use rand::Rng;

use super::{no_grad, NdError, Tensor};

/// Compares reverse-mode gradients with central differences.
///
/// `f` builds a scalar from `params`. When `max_coords` is set, that many
/// coordinates are drawn uniformly (without replacement) across all
/// parameters; otherwise every coordinate is checked. Returns the maximum of
/// `|autodiff − central| / max(1, |central|)`.
pub fn finite_diff_check<F, R>(
    mut f: F,
    params: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
    rng: &mut R,
) -> Result<f64, NdError>
where
    F: FnMut(&[Tensor]) -> Result<Tensor, NdError>,
    R: Rng + ?Sized,
{
    if !(eps > 0.0) {
        return Err(NdError::InvalidStep(eps));
    }
    for p in params {
        p.zero_grad();
    }
    f(params)?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |i| (pi, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = match max_coords {
        Some(n) if n < coords.len() => sample(rng, coords.len(), n).into_iter().map(|i| coords[i]).collect(),
        _ => coords,
    };

    let mut worst = 0.0_f64;
    for (pi, i) in chosen {
        let p = &params[pi];
        let orig = p.data()[i];
        p.with_data_mut(|d| d[i] = orig + eps);
        let plus = no_grad(|| f(params))?.item();
        p.with_data_mut(|d| d[i] = orig - eps);
        let minus = no_grad(|| f(params))?.item();
        p.with_data_mut(|d| d[i] = orig);
        let central = (plus - minus) / (2.0 * eps);
        let err = (analytic[pi][i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    for p in params {
        p.zero_grad();
    }
    Ok(worst)
}
