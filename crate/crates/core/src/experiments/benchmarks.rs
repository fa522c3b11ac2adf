//! Fixed reference/weight pairs used by the suites and the acceptance tests.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::reference::GaussianMixture;
use crate::weights::WeightSpec;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_vec(x.to_vec())
}

/// `p0 = N(0, 1)` tilted by `w(x) = exp(x)`; the target is `N(1, 1)`.
pub fn exp_tilt_1d() -> (GaussianMixture, WeightSpec) {
    (GaussianMixture::standard(1), WeightSpec::exp_linear(v(&[1.0])))
}

/// Two well-separated planar components observed through their first coordinate.
pub fn two_component_posterior_2d() -> (GaussianMixture, WeightSpec) {
    let p0 = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![v(&[-1.0, 0.0]), v(&[1.0, 0.0])],
        vec![DMatrix::identity(2, 2) * 0.25; 2],
    )
    .expect("valid mixture");
    let spec = WeightSpec::gaussian_likelihood(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), v(&[0.5]), 0.75, 0.0);
    (p0, spec)
}

/// Small-variance mixtures inside the unit box with floorless likelihoods, in `d ∈ {1, 2}`.
pub fn regularity(d: usize) -> Result<(GaussianMixture, WeightSpec)> {
    match d {
        1 => Ok((
            GaussianMixture::new(
                vec![0.4, 0.6],
                vec![v(&[-0.4]), v(&[0.4])],
                vec![DMatrix::from_element(1, 1, 0.02); 2],
            )?,
            WeightSpec::gaussian_likelihood(DMatrix::from_element(1, 1, 1.0), v(&[0.3]), 0.5, 0.0),
        )),
        2 => Ok((
            GaussianMixture::new(
                vec![0.5, 0.5],
                vec![v(&[-0.4, -0.3]), v(&[0.4, 0.3])],
                vec![DMatrix::identity(2, 2) * 0.02; 2],
            )?,
            WeightSpec::gaussian_likelihood(DMatrix::identity(2, 2), v(&[0.2, -0.1]), 0.5, 0.0),
        )),
        _ => Err(Error::Unsupported(format!("no regularity benchmark in dimension {d}"))),
    }
}

/// Latent two-component mixture for the subspace checks, with a likelihood on the latent coordinate.
pub fn lowdim_latent() -> (GaussianMixture, WeightSpec) {
    let latent =
        GaussianMixture::new(vec![0.5, 0.5], vec![v(&[-0.4]), v(&[0.4])], vec![DMatrix::from_element(1, 1, 0.02); 2])
            .expect("valid mixture");
    (latent, WeightSpec::gaussian_likelihood(DMatrix::from_element(1, 1, 1.0), v(&[0.3]), 0.5, 0.0))
}

/// `N(10, 9)`: far from the `N(0, 1)` initial law, so the initialization term is visible.
pub fn ablation_reference() -> GaussianMixture {
    GaussianMixture::gaussian(v(&[10.0]), DMatrix::from_element(1, 1, 9.0)).expect("valid Gaussian")
}

/// Express a weight on latent coordinates `u = Pᵀx` as a weight on `x`.
pub fn lift_weight(spec: &WeightSpec, p: &DMatrix<f64>) -> Result<WeightSpec> {
    match spec {
        WeightSpec::GaussianLikelihood { a, y, sigma_noise, floor } => Ok(WeightSpec::GaussianLikelihood {
            a: a * p.transpose(),
            y: y.clone(),
            sigma_noise: *sigma_noise,
            floor: *floor,
        }),
        WeightSpec::ExpQuadReward { q, b, c, alpha } => Ok(WeightSpec::ExpQuadReward {
            q: crate::linalg::symmetrize(&(p * q * p.transpose())),
            b: p * b,
            c: *c,
            alpha: *alpha,
        }),
        WeightSpec::Constant { c } => Ok(WeightSpec::Constant { c: *c }),
        WeightSpec::DensityRatio { .. } => {
            Err(Error::Unsupported("density ratios cannot be lifted to the ambient space".into()))
        }
    }
}

/// Training responses plus `amplitude·sin(frequency·x_1)`, a highly oscillatory nuisance.
pub fn contaminate(xt: &[DVector<f64>], responses: &[f64], frequency: f64, amplitude: f64) -> Vec<f64> {
    xt.iter().zip(responses).map(|(x, w)| w + amplitude * (frequency * x[0]).sin()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmarks_are_well_formed() {
        let (p0, spec) = exp_tilt_1d();
        let q = spec.tilted_target(&p0).unwrap();
        assert!((q.mean()[0] - 1.0).abs() < 1e-12 && (q.covariance()[(0, 0)] - 1.0).abs() < 1e-12);
        let (p0, spec) = two_component_posterior_2d();
        spec.validate(2).unwrap();
        assert_eq!(spec.tilted_target(&p0).unwrap().n_components(), 2);
        for d in [1, 2] {
            let (p0, spec) = regularity(d).unwrap();
            assert!(p0.within_unit_box() && spec.is_conjugate());
        }
        assert!(regularity(3).is_err());
    }

    #[test]
    fn lifted_weight_depends_on_projection_only() {
        let (latent, spec) = lowdim_latent();
        let e = crate::reference::SubspaceEmbedding::random(3, latent, 2).unwrap();
        let lifted = lift_weight(&spec, e.matrix()).unwrap();
        let x = v(&[0.3, -0.2, 0.9]);
        let u = e.project(&x);
        assert!((lifted.eval(&x).unwrap() - spec.eval(&u).unwrap()).abs() < 1e-14);
        let r = WeightSpec::exp_reward(DMatrix::from_element(1, 1, 2.0), v(&[0.5]), 0.1, 1.5);
        let lr = lift_weight(&r, e.matrix()).unwrap();
        assert!((lr.eval(&x).unwrap() - r.eval(&u).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn contamination_is_additive() {
        let xs = vec![v(&[0.0]), v(&[std::f64::consts::FRAC_PI_2])];
        assert_eq!(contaminate(&xs, &[1.0, 1.0], 1.0, 0.5), vec![1.0, 1.5]);
    }
}
