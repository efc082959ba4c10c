//! Truncate-replicate-sample integerization.

use rand::Rng;

use super::IpfError;

/// Rounds to the nearest integer, ties to even.
pub fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

/// Integerizes weights so the counts sum to `round(Σw)`.
///
/// Each record keeps `floor(w)` copies; the remaining copies go to distinct
/// records drawn without replacement with probability proportional to the
/// fractional parts.
pub fn integerize_trs<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<u64>, IpfError> {
    check_weights(weights)?;
    let total = round_half_even(weights.iter().sum::<f64>()) as u64;
    integerize_trs_to_total(weights, total, rng)
}

/// Like [`integerize_trs`] with an explicit integer total.
pub fn integerize_trs_to_total<R: Rng + ?Sized>(
    weights: &[f64],
    total: u64,
    rng: &mut R,
) -> Result<Vec<u64>, IpfError> {
    check_weights(weights)?;
    let mut counts: Vec<u64> = weights.iter().map(|w| w.floor() as u64).collect();
    let floor_sum: u64 = counts.iter().sum();
    let fractional: Vec<(usize, f64)> = weights
        .iter()
        .map(|w| w - w.floor())
        .enumerate()
        .filter(|(_, f)| *f > 0.0)
        .collect();
    if total < floor_sum || (total - floor_sum) as usize > fractional.len() {
        return Err(IpfError::TotalOutOfReach {
            total,
            floor_sum,
            slots: fractional.len(),
        });
    }
    let shortfall = (total - floor_sum) as usize;
    if shortfall == 0 {
        return Ok(counts);
    }
    // Efraimidis-Spirakis: the `shortfall` largest keys ln(u)/f form a
    // weighted sample without replacement.
    let mut keyed: Vec<(f64, usize)> = fractional
        .iter()
        .map(|&(i, f)| {
            let u = 1.0 - rng.random::<f64>();
            (u.ln() / f, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in &keyed[..shortfall] {
        counts[i] += 1;
    }
    Ok(counts)
}

fn check_weights(weights: &[f64]) -> Result<(), IpfError> {
    match weights
        .iter()
        .enumerate()
        .find(|(_, w)| !w.is_finite() || **w < 0.0)
    {
        Some((index, &value)) => Err(IpfError::BadWeight { index, value }),
        None => Ok(()),
    }
}
