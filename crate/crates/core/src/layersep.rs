//! Static/dynamic layer separation.
//!
//! The clip is packed into a matrix with one flattened frame per row; its
//! best rank-1 approximation models the static background (up to per-frame
//! gain), and thresholded differences against it give foreground masks.

use crate::error::{contract, dimension, Error, Result};
use crate::imagekit::{luminance, Image, Plane};

/// Foreground matte with values in `[0, 1]`.
pub type Mask = Plane;

pub const MAX_POWER_ITERATIONS: usize = 500;
/// Relative Rayleigh-quotient change that counts as converged.
pub const RAYLEIGH_TOLERANCE: f64 = 1e-12;
/// Change of the unit right vector between iterations that counts as converged.
pub const VECTOR_TOLERANCE: f64 = 1e-10;

pub const DEFAULT_TAU: f64 = 0.08;
pub const DEFAULT_FEATHER: usize = 2;

/// Frames flattened row-major, channel-interleaved, one frame per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    rows: usize,
    cols: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FrameMatrix {
    /// Builds a matrix from raw rows; `width * height * 3` must equal `cols`.
    pub fn from_rows(rows: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let cols = width * height * 3;
        if rows < 2 {
            return Err(contract(format!("frame matrix needs at least 2 rows, got {rows}")));
        }
        if cols == 0 || data.len() != rows * cols {
            return Err(dimension(format!("{} values do not form {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, width, height, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn unstack(&self) -> Vec<Image> {
        (0..self.rows).map(|i| Image::from_vec(self.width, self.height, self.row(i).to_vec()).expect("shape checked")).collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn stack_frames(frames: &[Image]) -> Result<FrameMatrix> {
    if frames.len() < 2 {
        return Err(contract(format!("need at least 2 frames, got {}", frames.len())));
    }
    let first = &frames[0];
    let mut data = Vec::with_capacity(frames.len() * first.data().len());
    for f in frames {
        first.ensure_same_dims(f, "stack_frames")?;
        data.extend_from_slice(f.data());
    }
    FrameMatrix::from_rows(frames.len(), first.width(), first.height(), data)
}

/// Leading singular triple and the rank-1 background it reconstructs.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankResult {
    /// `sigma_1 * u_1[t] * v_1`, unflattened and clamped at zero.
    pub background: Vec<Image>,
    pub singular_value: f64,
    /// Unit-norm, one entry per frame; its largest-magnitude entry is positive.
    pub left_vector: Vec<f64>,
    /// Unit-norm, one entry per pixel sample.
    pub right_vector: Vec<f64>,
    pub iterations: usize,
}

impl LowRankResult {
    /// `sigma * u[t] * v` for one frame, before clamping.
    pub fn reconstruct_row(&self, t: usize) -> Vec<f64> {
        let s = self.singular_value * self.left_vector[t];
        self.right_vector.iter().map(|v| s * v).collect()
    }

    /// `A - A_1`, the dynamic part, one image per frame (may be negative).
    pub fn residual(&self, m: &FrameMatrix) -> Vec<Image> {
        let (w, h) = m.frame_dims();
        (0..m.rows())
            .map(|t| {
                let data = m.row(t).iter().zip(self.reconstruct_row(t)).map(|(a, b)| a - b).collect();
                Image::from_vec(w, h, data).expect("shape checked")
            })
            .collect()
    }

    /// `||A - sigma u v^T||_F`
    pub fn residual_norm(&self, m: &FrameMatrix) -> f64 {
        (0..m.rows()).map(|t| m.row(t).iter().zip(self.reconstruct_row(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum::<f64>().sqrt()
    }
}

/// Leading singular triple of a dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SingularTriple {
    pub sigma: f64,
    /// Unit-norm left vector (length `rows`); largest-magnitude entry positive.
    pub u: Vec<f64>,
    /// Unit-norm right vector (length `cols`).
    pub v: Vec<f64>,
    pub iterations: usize,
}

/// Row-major view used by the power iteration.
struct RowMajor<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
}

impl RowMajor<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `A v`
    fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `A^T u`
    fn mul_t_vec(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &ui) in u.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += ui * a;
            }
        }
        out
    }
}

/// Power iteration on `A^T A` for a `rows x cols` row-major matrix, started
/// from the normalized row mean. Deterministic for identical input.
pub fn leading_singular_triple(data: &[f64], rows: usize, cols: usize) -> Result<SingularTriple> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(dimension(format!("{} values do not form {rows}x{cols}", data.len())));
    }
    let a = RowMajor { data, rows, cols };
    let zero = || {
        let mut u = vec![0.0; rows];
        u[0] = 1.0;
        let mut v = vec![0.0; cols];
        v[0] = 1.0;
        SingularTriple { sigma: 0.0, u, v, iterations: 0 }
    };

    let mut v = vec![0.0; cols];
    for i in 0..rows {
        for (acc, x) in v.iter_mut().zip(a.row(i)) {
            *acc += x;
        }
    }
    if normalize(&mut v) == 0.0 {
        // Row mean vanishes (zero-mean data); start from the first non-zero row.
        match (0..rows).find(|&i| a.row(i).iter().any(|&x| x != 0.0)) {
            Some(i) => {
                v.copy_from_slice(a.row(i));
                normalize(&mut v);
            }
            None => return Ok(zero()),
        }
    }

    let mut rayleigh = 0.0;
    let mut iterations = 0;
    loop {
        iterations += 1;
        let u = a.mul_vec(&v);
        let mut next = a.mul_t_vec(&u);
        // ||A v||^2 is the Rayleigh quotient of A^T A at v.
        let q = dot(&u, &u);
        if normalize(&mut next) == 0.0 {
            return Ok(zero());
        }
        let dv = next.iter().zip(&v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let dq = (q - rayleigh).abs();
        v = next;
        rayleigh = q;
        if dq <= RAYLEIGH_TOLERANCE * q && dv <= VECTOR_TOLERANCE {
            break;
        }
        if iterations >= MAX_POWER_ITERATIONS {
            return Err(Error::Numerical {
                message: format!(
                    "rank-1 power iteration did not converge (Rayleigh change {:.3e}, vector change {dv:.3e})",
                    dq / q.max(f64::MIN_POSITIVE)
                ),
                iterations,
            });
        }
    }

    let mut u = a.mul_vec(&v);
    let sigma = normalize(&mut u);
    let pivot = u.iter().copied().fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
    if pivot < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
        v.iter_mut().for_each(|x| *x = -*x);
    }
    log::debug!("rank-1 power iteration: sigma {sigma:.6e} after {iterations} iterations");
    Ok(SingularTriple { sigma, u, v, iterations })
}

/// Best rank-1 approximation of the frame matrix; the reconstruction is the
/// per-frame background.
pub fn rank1_background(m: &FrameMatrix) -> Result<LowRankResult> {
    let triple = leading_singular_triple(&m.data, m.rows, m.cols)?;
    let (w, h) = m.frame_dims();
    let background = triple
        .u
        .iter()
        .map(|&ut| {
            let s = triple.sigma * ut;
            let data = triple.v.iter().map(|&vj| (s * vj).max(0.0)).collect();
            Image::from_vec(w, h, data).expect("shape checked")
        })
        .collect();
    Ok(LowRankResult { background, singular_value: triple.sigma, left_vector: triple.u, right_vector: triple.v, iterations: triple.iterations })
}

/// Separates a clip into per-frame backgrounds.
pub fn separate(frames: &[Image]) -> Result<(FrameMatrix, LowRankResult)> {
    let m = stack_frames(frames)?;
    let r = rank1_background(&m)?;
    Ok((m, r))
}

fn morph(src: &Plane, dilate: bool) -> Plane {
    let (w, h) = (src.width(), src.height());
    Plane::from_fn(w, h, |x, y| {
        let mut acc = if dilate { f64::NEG_INFINITY } else { f64::INFINITY };
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let v = src.get_clamped(x as isize + dx, y as isize + dy);
                acc = if dilate { acc.max(v) } else { acc.min(v) };
            }
        }
        acc
    })
    .expect("non-empty")
}

/// Separable box filter of radius `r` with replicated borders.
pub fn box_blur(src: &Plane, r: usize) -> Plane {
    if r == 0 {
        return src.clone();
    }
    let (w, h) = (src.width(), src.height());
    let r = r as isize;
    let n = (2 * r + 1) as f64;
    let horiz = Plane::from_fn(w, h, |x, y| (-r..=r).map(|d| src.get_clamped(x as isize + d, y as isize)).sum::<f64>() / n).expect("non-empty");
    Plane::from_fn(w, h, |x, y| (-r..=r).map(|d| horiz.get_clamped(x as isize, y as isize + d)).sum::<f64>() / n).expect("non-empty")
}

/// Foreground mask by background subtraction: `|Y(frame) - Y(bg)| > tau`,
/// a 3x3 opening then closing, then optional box feathering.
pub fn extract_mask(frame: &Image, background: &Image, tau: f64, feather: usize) -> Result<Mask> {
    frame.ensure_same_dims(background, "extract_mask")?;
    if !(tau > 0.0) {
        return Err(contract(format!("tau must be positive, got {tau}")));
    }
    let lf = luminance(frame);
    let lb = luminance(background);
    let raw = Plane::from_vec(
        frame.width(),
        frame.height(),
        lf.data().iter().zip(lb.data()).map(|(a, b)| if (a - b).abs() > tau { 1.0 } else { 0.0 }).collect(),
    )?;
    let opened = morph(&morph(&raw, false), true);
    let closed = morph(&morph(&opened, true), false);
    Ok(box_blur(&closed, feather).map(|v| v.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, ObjectSpec, SceneSpec};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, w: usize, h: usize, seed: u64) -> FrameMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * w * h * 3).map(|_| rng.random::<f64>()).collect();
        FrameMatrix::from_rows(rows, w, h, data).unwrap()
    }

    #[test]
    fn stacking_layout_and_round_trip() {
        let a = Image::from_vec(2, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Image::from_vec(2, 1, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let m = stack_frames(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(m.shape(), (2, 6));
        // Row = frame, order (x0: r g b), (x1: r g b).
        assert_eq!(m.row(0), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.row(1), &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(m.unstack(), vec![a, b]);
    }

    #[test]
    fn stacking_shape_and_errors() {
        let frames = vec![Image::new(5, 4).unwrap(); 7];
        assert_eq!(stack_frames(&frames).unwrap().shape(), (7, 60));
        assert!(matches!(stack_frames(&frames[..1]), Err(Error::Contract(_))));
        let mixed = vec![Image::new(5, 4).unwrap(), Image::new(4, 5).unwrap()];
        assert!(matches!(stack_frames(&mixed), Err(Error::Dimension(_))));
    }

    #[test]
    fn identical_frames_are_rank_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = Image::from_fn(9, 7, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
        let frames = vec![f.clone(); 5];
        let (m, r) = separate(&frames).unwrap();
        assert!(r.residual_norm(&m) <= 1e-9);
        for bg in &r.background {
            for (a, b) in bg.data().iter().zip(f.data()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    fn dense_check(data: &[f64], rows: usize, cols: usize) {
        let t = leading_singular_triple(data, rows, cols).unwrap();
        let dense = DMatrix::from_row_slice(rows, cols, data);
        let svd = dense.svd(true, true);
        let (imax, _) = svd.singular_values.argmax();
        let sigma = svd.singular_values[imax];
        let u = svd.u.as_ref().unwrap().column(imax).into_owned();
        let v = svd.v_t.as_ref().unwrap().row(imax).transpose().into_owned();
        assert!((t.sigma - sigma).abs() <= 1e-6 * sigma);
        let sign = if u.iter().zip(&t.u).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for i in 0..rows {
            assert!((t.u[i] - sign * u[i]).abs() <= 1e-6);
        }
        for j in 0..cols {
            assert!((t.v[j] - sign * v[j]).abs() <= 1e-6);
        }
    }

    #[test]
    fn matches_dense_svd() {
        for (rows, cols, seed) in [(6usize, 20usize, 3u64), (6, 20, 4), (10, 300, 5)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random()).collect();
            dense_check(&data, rows, cols);
        }
    }

    #[test]
    fn gaussian_matrices_converge() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..6 * 20).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
            dense_check(&data, 6, 20);
        }
    }

    #[test]
    fn residual_is_spectral_tail() {
        let m = random_matrix(6, 5, 4, 9);
        let r = rank1_background(&m).unwrap();
        let svd = DMatrix::from_row_slice(m.rows(), m.cols(), m.data()).svd(false, false);
        let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tail = s[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((r.residual_norm(&m) - tail).abs() <= 1e-6 * m.frobenius_norm());
    }

    #[test]
    fn sign_convention_and_determinism() {
        let m = random_matrix(6, 4, 3, 8);
        let a = rank1_background(&m).unwrap();
        let b = rank1_background(&m).unwrap();
        assert_eq!(a, b);
        let pivot = a.left_vector.iter().copied().fold(0.0f64, |p, x| if x.abs() > p.abs() { x } else { p });
        assert!(pivot > 0.0);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm(&a.left_vector) - 1.0).abs() < 1e-12);
        assert!((norm(&a.right_vector) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_gives_zero_background() {
        let frames = vec![Image::new(3, 3).unwrap(); 3];
        let (_, r) = separate(&frames).unwrap();
        assert_eq!(r.singular_value, 0.0);
        assert!(r.background.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    fn square_scene() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 48,
            object: ObjectSpec { width: 8.0, height: 8.0, color: [1.0, 1.0, 1.0], start: [4.0, 20.0], texture: 0.0 },
            velocity: [5.0, 0.0],
            frames: 10,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn recovers_clean_background() {
        let spec = square_scene();
        let scene = generate(&spec, 0).unwrap();
        let (_, r) = separate(&scene.frames).unwrap();
        let never: Vec<usize> = (0..spec.width * spec.height).filter(|&i| scene.coverage.iter().all(|c| c.data()[i] == 0.0)).collect();
        for bg in &r.background {
            let mae: f64 = never
                .iter()
                .map(|&i| (0..3).map(|c| (bg.data()[i * 3 + c] - scene.background.data()[i * 3 + c]).abs()).sum::<f64>() / 3.0)
                .sum::<f64>()
                / never.len() as f64;
            assert!(mae <= 0.05, "mae {mae}");
        }
    }

    #[test]
    fn mask_examples() {
        let spec = SceneSpec {
            background_range: [0.2, 0.3],
            object: ObjectSpec { width: 12.0, height: 12.0, color: [0.8, 0.8, 0.8], start: [10.0, 10.0], texture: 0.0 },
            velocity: [4.0, 0.0],
            ..square_scene()
        };
        let scene = generate(&spec, 0).unwrap();
        let frame = &scene.frames[3];
        let bg = &scene.background;

        let empty = extract_mask(frame, frame, 0.1, 2).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));
        let max_diff = luminance(frame).data().iter().zip(luminance(bg).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let none = extract_mask(frame, bg, max_diff + 1e-9, 0).unwrap();
        assert!(none.data().iter().all(|&v| v == 0.0));

        let mask = extract_mask(frame, bg, 0.1, 0).unwrap();
        let truth = &scene.masks[3];
        let inter = mask.data().iter().zip(truth.data()).filter(|(a, b)| **a > 0.5 && **b > 0.5).count();
        let union = mask.data().iter().zip(truth.data()).filter(|(a, b)| **a > 0.5 || **b > 0.5).count();
        assert!(inter as f64 / union as f64 >= 0.9);
        let feathered = extract_mask(frame, bg, 0.1, 2).unwrap();
        assert!(feathered.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(feathered.data().iter().any(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn opening_removes_speckle() {
        let bg = Image::filled(9, 9, [0.2; 3]).unwrap();
        let mut frame = bg.clone();
        frame.set_pixel(4, 4, [1.0; 3]);
        assert!(extract_mask(&frame, &bg, 0.1, 0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn mask_invariant_to_common_offset(seed in 0u64..500, offset in 0.0f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frame = Image::from_fn(12, 10, |_, _| { let v: f64 = rng.random(); [v, v, v] }).unwrap();
            let bg = Image::from_fn(12, 10, |_, _| { let v: f64 = rng.random(); [v, v, v] }).unwrap();
            let a = extract_mask(&frame, &bg, 0.3, 1).unwrap();
            let b = extract_mask(&frame.map(|v| v + offset), &bg.map(|v| v + offset), 0.3, 1).unwrap();
            // Offsets can flip pixels sitting exactly on the threshold through rounding only.
            let flips = a.data().iter().zip(b.data()).filter(|(x, y)| (**x - **y).abs() > 1e-9).count();
            proptest::prop_assert!(flips <= 2);
        }
    }
}
