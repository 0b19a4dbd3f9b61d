use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::StatsError;

/// Redraws allowed per resample when the statistic is undefined on it;
/// bounds the total at ten attempts per requested resample.
const REDRAWS_PER_RESAMPLE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapEstimate {
    /// The statistic on the full data.
    pub estimate: f64,
    /// Sample standard deviation over resamples.
    pub stderr: f64,
    pub n_resamples: usize,
    /// Resamples drawn again because the statistic was undefined.
    pub redraws: usize,
}

/// Trial-level bootstrap: each resample draws `items.len()` items with
/// replacement. Resample `k` uses its own stream derived from `seed`, so the
/// result does not depend on thread scheduling.
pub fn bootstrap<T, F>(
    items: &[T],
    statistic: F,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapEstimate, StatsError>
where
    T: Clone + Sync + Send,
    F: Fn(&[T]) -> Result<f64, StatsError> + Sync,
{
    if n_resamples < 100 {
        return Err(StatsError::InvalidInput(format!("need at least 100 resamples, got {n_resamples}")));
    }
    if items.is_empty() {
        return Err(StatsError::InvalidInput("empty sample".into()));
    }
    let estimate = statistic(items)?;
    let n = items.len();
    let draws: Vec<Result<(f64, usize), StatsError>> = (0..n_resamples)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n),
            |buf, k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                for attempt in 0..REDRAWS_PER_RESAMPLE {
                    buf.clear();
                    buf.extend((0..n).map(|_| items[rng.random_range(0..n)].clone()));
                    if let Ok(v) = statistic(buf) {
                        return Ok((v, attempt));
                    }
                }
                Err(StatsError::Undefined(format!(
                    "statistic undefined on {REDRAWS_PER_RESAMPLE} consecutive draws of resample {k}"
                )))
            },
        )
        .collect();
    let mut values = Vec::with_capacity(n_resamples);
    let mut redraws = 0;
    for d in draws {
        let (v, r) = d?;
        values.push(v);
        redraws += r;
    }
    Ok(BootstrapEstimate { estimate, stderr: sample_std(&values), n_resamples, redraws })
}

pub(crate) fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}
