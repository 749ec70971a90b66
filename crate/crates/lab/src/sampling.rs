//! Drawing points from a Gaussian-mixture teacher.
//!
//! This is the only place in the workspace that produces samples of the
//! teacher distribution. It feeds evaluation references, noise-floor
//! calibration and the pretraining path, never the SFD training loop.

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use sfd_core::gmm::GmmSpec;
use sfd_core::mat2::Mat2;

use crate::error::{contract, Result};

/// Lower Cholesky factor `[l11, 0, l21, l22]` of an SPD 2×2 matrix.
pub fn cholesky(m: &Mat2) -> Mat2 {
    let l11 = m[0].sqrt();
    let l21 = m[2] / l11;
    let l22 = (m[3] - l21 * l21).sqrt();
    [l11, 0.0, l21, l22]
}

/// `n` points from class `c`, row-major `n×2`.
pub fn sample_class<R: Rng + ?Sized>(spec: &GmmSpec, c: usize, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let class = spec
        .classes
        .get(c)
        .ok_or_else(|| contract(format!("class {c} out of range")))?;
    let pick = WeightedIndex::new(class.components.iter().map(|k| k.weight))
        .map_err(|e| contract(format!("bad component weights: {e}")))?;
    let factors: Vec<Mat2> = class.components.iter().map(|k| cholesky(&k.cov)).collect();
    let mut out = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let j = pick.sample(rng);
        let (u, v): (f64, f64) = (StandardNormal.sample(rng), StandardNormal.sample(rng));
        let l = &factors[j];
        let m = class.components[j].mean;
        out.push(m[0] + l[0] * u);
        out.push(m[1] + l[2] * u + l[3] * v);
    }
    Ok(out)
}

/// `n` labelled points from the full mixture, classes drawn from the priors.
pub fn sample_labelled<R: Rng + ?Sized>(spec: &GmmSpec, n: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<usize>)> {
    let prior = WeightedIndex::new(&spec.priors).map_err(|e| contract(format!("bad priors: {e}")))?;
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = prior.sample(rng);
        points.extend(sample_class(spec, c, 1, rng)?);
        labels.push(c);
    }
    Ok((points, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sfd_core::gmm::{ClassMixture, Component};
    use sfd_core::mat2;

    #[test]
    fn cholesky_reconstructs() {
        let m = [0.5, 0.2, 0.2, 0.3];
        let l = cholesky(&m);
        let lt = [l[0], l[2], l[1], l[3]];
        let back = mat2::mul(&l, &lt);
        for (a, b) in back.iter().zip(&m) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn class_moments_match_spec() {
        let spec = GmmSpec {
            priors: vec![1.0],
            classes: vec![ClassMixture {
                components: vec![Component {
                    weight: 1.0,
                    mean: [1.0, -2.0],
                    cov: [0.5, 0.2, 0.2, 0.3],
                }],
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let x = sample_class(&spec, 0, n, &mut rng).unwrap();
        let mx = x.chunks(2).map(|p| p[0]).sum::<f64>() / n as f64;
        let my = x.chunks(2).map(|p| p[1]).sum::<f64>() / n as f64;
        let cxy = x.chunks(2).map(|p| (p[0] - mx) * (p[1] - my)).sum::<f64>() / n as f64;
        // 5 standard errors
        assert!((mx - 1.0).abs() < 5.0 * (0.5 / n as f64).sqrt());
        assert!((my + 2.0).abs() < 5.0 * (0.3 / n as f64).sqrt());
        assert!((cxy - 0.2).abs() < 5.0 * ((0.5 * 0.3 + 0.04) / n as f64).sqrt());
    }

    #[test]
    fn labelled_sampling_follows_priors() {
        let spec = GmmSpec::default_benchmark();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, labels) = sample_labelled(&spec, 40_000, &mut rng).unwrap();
        for c in 0..4 {
            let f = labels.iter().filter(|&&l| l == c).count() as f64 / 40_000.0;
            assert!((f - 0.25).abs() < 5.0 * (0.25 * 0.75 / 40_000.0f64).sqrt());
        }
        assert!(sample_class(&spec, 9, 1, &mut rng).is_err());
    }
}
