//! Color compensation of underexposed frames against a well-exposed
//! reference, using the closed-form linear Monge-Kantorovitch transport map
//! between the two color distributions modelled as Gaussians.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{contract, dimension, Error, Result};
use crate::imagekit::{Image, Plane};

/// Minimum number of masked-in pixels for moment estimation.
pub const MIN_MASKED_PIXELS: usize = 16;

/// Relative covariance regularization (multiplied by the mean eigenvalue).
pub const REGULARIZATION: f64 = 1e-6;

/// Absolute floor on the regularizer so flat images stay invertible.
const REGULARIZATION_FLOOR: f64 = 1e-12;

/// First and second moments of an image's color distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vector3<f64>,
    /// Unbiased covariance.
    pub cov: Matrix3<f64>,
}

/// `x -> T (x - mean_src) + mean_ref`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineColorMap {
    pub t: Matrix3<f64>,
    pub mean_src: Vector3<f64>,
    pub mean_ref: Vector3<f64>,
}

impl AffineColorMap {
    pub fn identity() -> Self {
        Self { t: Matrix3::identity(), mean_src: Vector3::zeros(), mean_ref: Vector3::zeros() }
    }

    #[inline]
    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let x = Vector3::new(rgb[0], rgb[1], rgb[2]);
        let y = self.t * (x - self.mean_src) + self.mean_ref;
        [y[0], y[1], y[2]]
    }

    /// Largest absolute deviation of the map from the identity, taken over
    /// the matrix entries and the net offset.
    pub fn distance_from_identity(&self) -> f64 {
        let dt = (self.t - Matrix3::identity()).abs().max();
        let offset = (self.mean_ref - self.t * self.mean_src).abs().max();
        dt.max(offset)
    }
}

/// Mean and unbiased covariance over the pixels where `mask > 0.5`
/// (all pixels when no mask is given).
pub fn channel_stats(img: &Image, mask: Option<&Plane>) -> Result<ChannelStats> {
    if let Some(m) = mask {
        if !m.matches(img) {
            return Err(dimension(format!("mask {}x{} does not match image {}x{}", m.width(), m.height(), img.width(), img.height())));
        }
    }
    let included = |i: usize| mask.is_none_or(|m| m.data()[i] > 0.5);

    let mut n = 0usize;
    let mut sum = Vector3::zeros();
    for (i, p) in img.pixels().enumerate() {
        if included(i) {
            n += 1;
            sum += Vector3::new(p[0], p[1], p[2]);
        }
    }
    let min = if mask.is_some() { MIN_MASKED_PIXELS } else { 2 };
    if n < min {
        return Err(Error::InsufficientData(format!("color statistics need at least {min} pixels, got {n}")));
    }
    let mean = sum / n as f64;

    let mut cov = Matrix3::zeros();
    for (i, p) in img.pixels().enumerate() {
        if included(i) {
            let d = Vector3::new(p[0], p[1], p[2]) - mean;
            cov += d * d.transpose();
        }
    }
    cov /= (n - 1) as f64;
    Ok(ChannelStats { mean, cov })
}

fn check_symmetric(m: &Matrix3<f64>) -> Result<()> {
    let scale = m.abs().max().max(1.0);
    let asym = (m - m.transpose()).abs().max();
    if asym > 1e-9 * scale {
        return Err(contract(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    Ok(())
}

/// Applies `f` to the eigenvalues of a symmetric matrix.
fn spectral_map(m: &Matrix3<f64>, f: impl Fn(f64) -> f64) -> Matrix3<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(f));
    let out = eig.eigenvectors * d * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

/// Principal square root of a symmetric positive semi-definite matrix.
/// Negative eigenvalues (round-off) are clamped to zero.
pub fn sqrtm_spd(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    check_symmetric(m)?;
    Ok(spectral_map(m, |l| l.max(0.0).sqrt()))
}

/// Adds `eps * I` with `eps = 1e-6 * trace / 3` (floored at 1e-12).
pub fn regularize(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let eps = (REGULARIZATION * cov.trace() / 3.0).max(REGULARIZATION_FLOOR);
    cov + Matrix3::identity() * eps
}

/// Closed-form transport map sending `N(src.mean, src.cov)` onto
/// `N(ref.mean, ref.cov)`:
/// `T = S^-1/2 (S^1/2 R S^1/2)^1/2 S^-1/2`.
pub fn mk_transform(src: &ChannelStats, reference: &ChannelStats) -> Result<AffineColorMap> {
    check_symmetric(&src.cov)?;
    check_symmetric(&reference.cov)?;
    let s = regularize(&src.cov);
    let r = regularize(&reference.cov);

    let s_half = spectral_map(&s, |l| l.max(0.0).sqrt());
    let s_inv_half = spectral_map(&s, |l| 1.0 / l.max(REGULARIZATION_FLOOR).sqrt());
    let middle = sqrtm_spd(&((s_half * r * s_half + (s_half * r * s_half).transpose()) * 0.5))?;
    let t = s_inv_half * middle * s_inv_half;
    let t = (t + t.transpose()) * 0.5;
    if !t.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical { message: "color transfer matrix is not finite".into(), iterations: 0 });
    }
    Ok(AffineColorMap { t, mean_src: src.mean, mean_ref: reference.mean })
}

/// Applies the map to every pixel, flooring negative results at zero.
pub fn apply_color_map(img: &Image, map: &AffineColorMap) -> Image {
    let mut out = img.clone();
    out.data_mut().par_chunks_mut(3).for_each(|p| {
        let y = map.apply([p[0], p[1], p[2]]);
        for c in 0..3 {
            p[c] = y[c].max(0.0);
        }
    });
    out
}

/// Convenience: map `img` onto the statistics of `reference`.
pub fn transfer(img: &Image, reference: &ChannelStats) -> Result<(Image, AffineColorMap)> {
    let stats = channel_stats(img, None)?;
    let map = mk_transform(&stats, reference)?;
    Ok((apply_color_map(img, &map), map))
}
