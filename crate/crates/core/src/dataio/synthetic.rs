use crate::error::{Error, Result};
use crate::numerics::{norm, streams, Matrix, Rng};

use super::FeatureSet;

/// Gaussian clusters around unit-norm class means.
///
/// Means are standard-normal draws scaled to unit length; each sample is
/// `mean + noise_sigma * N(0, I)`. Rows are grouped by class, `per_class`
/// consecutive rows each.
pub fn generate_synthetic(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<FeatureSet> {
    if num_classes < 2 {
        return Err(Error::invalid("num_classes must be >= 2"));
    }
    if per_class == 0 {
        return Err(Error::invalid("per_class must be >= 1"));
    }
    if dim == 0 {
        return Err(Error::invalid("dim must be >= 1"));
    }
    if !noise_sigma.is_finite() || noise_sigma < 0.0 {
        return Err(Error::invalid(format!(
            "noise_sigma must be finite and >= 0, got {noise_sigma}"
        )));
    }

    let mut mean_rng = Rng::new(seed, streams::SYNTH_MEANS);
    let mut noise_rng = Rng::new(seed, streams::SYNTH_NOISE);

    let mut means = Vec::with_capacity(num_classes);
    while means.len() < num_classes {
        let v: Vec<f64> = (0..dim).map(|_| mean_rng.normal()).collect();
        let n = norm(&v);
        // redraw the (measure-zero) zero vector
        if n > 1e-12 {
            means.push(v.into_iter().map(|x| x / n).collect::<Vec<_>>());
        }
    }

    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &mu in mean {
                let eps = if noise_sigma > 0.0 {
                    noise_sigma * noise_rng.normal()
                } else {
                    0.0
                };
                data.push(mu + eps);
            }
            labels.push(c as u32);
        }
    }
    FeatureSet::new(Matrix::from_vec(n, dim, data)?, labels, num_classes as u32)
}
