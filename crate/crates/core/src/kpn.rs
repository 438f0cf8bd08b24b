//! Per-pixel kernel application.
//!
//! A [`KernelTensor`] holds one `k x k` filter per output pixel, stored as
//! `k * k` planes. Plane `a * k + b` is the weight for the neighbor at
//! row offset `a - k/2` and column offset `b - k/2`; reads outside the
//! image replicate the edge pixel.

use crate::error::{Error, Result};
use crate::image::ImagePlane;
use crate::pyramid::{decompose, reconstruct, reconstruct_adjoint, LaplacianPyramid};

#[derive(Clone, Debug, PartialEq)]
pub struct KernelTensor {
    k: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl KernelTensor {
    pub fn new(k: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::shape(format!("kernel size must be odd, got {k}")));
        }
        if data.len() != k * k * height * width {
            return Err(Error::shape(format!(
                "kernel tensor has {} values, expected {}x{height}x{width}",
                data.len(),
                k * k
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("kernel tensor contains non-finite values".into()));
        }
        Ok(Self { k, height, width, data })
    }

    pub fn zeros(k: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(k, height, width, vec![0.0; k * k * height * width])
    }

    /// Every pixel gets the same `k x k` kernel (row-major).
    pub fn uniform(k: usize, height: usize, width: usize, kernel: &[f64]) -> Result<Self> {
        if kernel.len() != k * k {
            return Err(Error::shape("kernel length must be k*k"));
        }
        let plane = height * width;
        let mut data = Vec::with_capacity(kernel.len() * plane);
        for &v in kernel {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self::new(k, height, width, data)
    }

    /// Identity filter: 1 at the window center.
    pub fn delta(k: usize, height: usize, width: usize) -> Result<Self> {
        let mut kernel = vec![0.0; k * k];
        kernel[(k / 2) * k + k / 2] = 1.0;
        Self::uniform(k, height, width, &kernel)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, ch: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[ch * n..(ch + 1) * n]
    }

    /// Weight of tap `(a, b)` at pixel `(row, col)`.
    pub fn weight(&self, row: usize, col: usize, a: usize, b: usize) -> f64 {
        self.data[((a * self.k + b) * self.height + row) * self.width + col]
    }

    /// Scales each pixel's kernel to sum to one. Kernels whose sum is
    /// within `1e-8` of zero are left untouched.
    pub fn normalized(&self) -> Self {
        let n = self.height * self.width;
        let taps = self.k * self.k;
        let mut out = self.clone();
        for p in 0..n {
            let sum: f64 = (0..taps).map(|t| self.data[t * n + p]).sum();
            if sum.abs() > 1e-8 {
                for t in 0..taps {
                    out.data[t * n + p] /= sum;
                }
            }
        }
        out
    }
}

/// Clamped source indices for a window offset, one per output position.
fn shifted_indices(len: usize, offset: isize) -> Vec<usize> {
    (0..len).map(|i| (i as isize + offset).clamp(0, len as isize - 1) as usize).collect()
}

fn check_dims(img: &ImagePlane, t: &KernelTensor) -> Result<()> {
    if img.dims() != t.dims() {
        return Err(Error::shape(format!(
            "kernel tensor {:?} does not match image {:?}",
            t.dims(),
            img.dims()
        )));
    }
    Ok(())
}

/// `out(i, j) = <K(i, j), window of img around (i, j)>`.
pub fn apply_kernels(img: &ImagePlane, t: &KernelTensor) -> Result<ImagePlane> {
    check_dims(img, t)?;
    let (h, w) = img.dims();
    let k = t.k;
    let half = (k / 2) as isize;
    let mut out = vec![0.0; h * w];
    for b in 0..k {
        let cols = shifted_indices(w, b as isize - half);
        for a in 0..k {
            let rows = shifted_indices(h, a as isize - half);
            let plane = t.channel(a * k + b);
            for (r, &sr) in rows.iter().enumerate() {
                let src = img.row(sr);
                let wts = &plane[r * w..(r + 1) * w];
                let dst = &mut out[r * w..(r + 1) * w];
                for ((o, &wt), &sc) in dst.iter_mut().zip(wts).zip(&cols) {
                    *o += wt * src[sc];
                }
            }
        }
    }
    ImagePlane::new(h, w, out)
}

/// Gradients of `<upstream, apply_kernels(img, t)>` with respect to the
/// kernel tensor and the image.
pub fn apply_kernels_grad(
    img: &ImagePlane,
    t: &KernelTensor,
    upstream: &ImagePlane,
) -> Result<(KernelTensor, ImagePlane)> {
    check_dims(img, t)?;
    img.ensure_same_dims(upstream, "apply_kernels_grad")?;
    let (h, w) = img.dims();
    let k = t.k;
    let half = (k / 2) as isize;
    let mut grad_t = vec![0.0; k * k * h * w];
    let mut grad_img = vec![0.0; h * w];
    for b in 0..k {
        let cols = shifted_indices(w, b as isize - half);
        for a in 0..k {
            let rows = shifted_indices(h, a as isize - half);
            let ch = a * k + b;
            let plane = t.channel(ch);
            let gt = &mut grad_t[ch * h * w..(ch + 1) * h * w];
            for (r, &sr) in rows.iter().enumerate() {
                let src = img.row(sr);
                let up = upstream.row(r);
                for c in 0..w {
                    let sc = cols[c];
                    gt[r * w + c] = up[c] * src[sc];
                    grad_img[sr * w + sc] += plane[r * w + c] * up[c];
                }
            }
        }
    }
    Ok((KernelTensor::new(k, h, w, grad_t)?, ImagePlane::new(h, w, grad_img)?))
}

/// Filters each pyramid level with its kernel tensor and reconstructs.
pub fn apply_lp_kpn(
    pyr: &LaplacianPyramid,
    t0: &KernelTensor,
    t1: &KernelTensor,
    t2: &KernelTensor,
) -> Result<ImagePlane> {
    if t0.k != t1.k || t1.k != t2.k {
        return Err(Error::shape("all kernel tensors must share the same k"));
    }
    let filtered = LaplacianPyramid::new(
        apply_kernels(&pyr.s0, t0)?,
        apply_kernels(&pyr.s1, t1)?,
        apply_kernels(&pyr.s2, t2)?,
    )?;
    reconstruct(&filtered)
}

/// Kernel-tensor gradients of `<upstream, apply_lp_kpn(pyr, t0, t1, t2)>`.
pub fn apply_lp_kpn_grad(
    pyr: &LaplacianPyramid,
    tensors: [&KernelTensor; 3],
    upstream: &ImagePlane,
) -> Result<[KernelTensor; 3]> {
    let level_grads = reconstruct_adjoint(upstream)?;
    let (g0, _) = apply_kernels_grad(&pyr.s0, tensors[0], &level_grads.s0)?;
    let (g1, _) = apply_kernels_grad(&pyr.s1, tensors[1], &level_grads.s1)?;
    let (g2, _) = apply_kernels_grad(&pyr.s2, tensors[2], &level_grads.s2)?;
    Ok([g0, g1, g2])
}

/// Measures, by brute force, the full-resolution bounding box `(rows, cols)`
/// of output pixels that respond to a unit impulse at one input pixel when
/// only pyramid level `level` is filtered (all-ones `k x k` kernels) and the
/// other levels are zeroed.
pub fn influence_footprint(k: usize, level: usize) -> Result<(usize, usize)> {
    if k.is_multiple_of(2) {
        return Err(Error::shape("kernel size must be odd"));
    }
    if level > 2 {
        return Err(Error::shape("level must be 0, 1 or 2"));
    }
    let n = (16 * k + 64).next_multiple_of(8);
    let mut impulse = ImagePlane::zeros(n, n);
    impulse.set(n / 2, n / 2, 1.0);
    let pyr = decompose(&impulse)?;
    let dims = LaplacianPyramid::level_dims(n, n);
    let mut levels: Vec<ImagePlane> = dims.iter().map(|&(h, w)| ImagePlane::zeros(h, w)).collect();
    let (h, w) = dims[level];
    levels[level] = apply_kernels(pyr.levels()[level], &KernelTensor::uniform(k, h, w, &vec![1.0; k * k])?)?;
    let s2 = levels.pop().expect("three levels");
    let s1 = levels.pop().expect("three levels");
    let s0 = levels.pop().expect("three levels");
    let out = reconstruct(&LaplacianPyramid::new(s0, s1, s2)?)?;

    let (mut r_min, mut r_max, mut c_min, mut c_max) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..n {
        for c in 0..n {
            if out.get(r, c).abs() > 1e-12 {
                r_min = r_min.min(r);
                r_max = r_max.max(r);
                c_min = c_min.min(c);
                c_max = c_max.max(c);
            }
        }
    }
    if r_min == usize::MAX {
        return Ok((0, 0));
    }
    Ok((r_max - r_min + 1, c_max - c_min + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{gauss_down, gauss_up};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
        ImagePlane::from_fn(h, w, |_, _| rng.gen_range(-50.0..200.0))
    }

    fn random_tensor(k: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> KernelTensor {
        KernelTensor::new(k, h, w, (0..k * k * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn brute_force(img: &ImagePlane, t: &KernelTensor) -> ImagePlane {
        let k = t.k();
        let c = (k / 2) as isize;
        ImagePlane::from_fn(img.height(), img.width(), |i, j| {
            let mut acc = 0.0;
            for a in 0..k {
                for b in 0..k {
                    acc += t.weight(i, j, a, b) * img.get_clamped(i as isize + a as isize - c, j as isize + b as isize - c);
                }
            }
            acc
        })
    }

    #[test]
    fn delta_is_identity_including_borders() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_plane(6, 9, &mut rng);
        for k in [1, 3, 5] {
            assert_eq!(apply_kernels(&img, &KernelTensor::delta(k, 6, 9).unwrap()).unwrap(), img);
        }
    }

    #[test]
    fn box_kernel_on_constant() {
        let img = ImagePlane::filled(5, 5, 3.25);
        let t = KernelTensor::uniform(3, 5, 5, &[1.0 / 9.0; 9]).unwrap();
        assert!(apply_kernels(&img, &t).unwrap().data().iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn matches_brute_force_9x9() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_plane(9, 9, &mut rng);
        let t = random_tensor(3, 9, 9, &mut rng);
        assert!(apply_kernels(&img, &t).unwrap().max_abs_diff(&brute_force(&img, &t)) <= 1e-12);
    }

    #[test]
    fn shape_errors() {
        let img = ImagePlane::zeros(4, 4);
        assert!(matches!(apply_kernels(&img, &KernelTensor::zeros(3, 4, 5).unwrap()), Err(Error::Shape(_))));
        assert!(KernelTensor::zeros(2, 4, 4).is_err());
        assert!(KernelTensor::new(3, 2, 2, vec![0.0; 35]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_plane(5, 6, &mut rng);
        let t = random_tensor(3, 5, 6, &mut rng);
        let (gt, gi) = apply_kernels_grad(&img, &t, &ImagePlane::zeros(5, 6)).unwrap();
        assert!(gt.data().iter().all(|&v| v == 0.0));
        assert!(gi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn k1_gradient_is_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_plane(4, 5, &mut rng);
        let t = random_tensor(1, 4, 5, &mut rng);
        let up = random_plane(4, 5, &mut rng);
        let (gt, gi) = apply_kernels_grad(&img, &t, &up).unwrap();
        for p in 0..20 {
            assert_eq!(gt.data()[p], up.data()[p] * img.data()[p]);
            assert_eq!(gi.data()[p], t.data()[p] * up.data()[p]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_plane(7, 7, &mut rng);
        let t = random_tensor(3, 7, 7, &mut rng);
        let up = random_plane(7, 7, &mut rng);
        let loss = |img: &ImagePlane, t: &KernelTensor| -> f64 {
            apply_kernels(img, t).unwrap().data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let (gt, gi) = apply_kernels_grad(&img, &t, &up).unwrap();
        let step = 1e-4;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for i in 0..t.data().len() {
            let mut tp = t.clone();
            tp.data_mut()[i] += step;
            let mut tm = t.clone();
            tm.data_mut()[i] -= step;
            let fd = (loss(&img, &tp) - loss(&img, &tm)) / (2.0 * step);
            assert!(rel(gt.data()[i], fd) < 1e-5, "tensor entry {i}");
        }
        for i in 0..img.len() {
            let mut ip = img.clone();
            ip.data_mut()[i] += step;
            let mut im = img.clone();
            im.data_mut()[i] -= step;
            let fd = (loss(&ip, &t) - loss(&im, &t)) / (2.0 * step);
            assert!(rel(gi.data()[i], fd) < 1e-5, "image entry {i}");
        }
    }

    #[test]
    fn lp_kpn_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_plane(12, 10, &mut rng);
        let pyr = decompose(&img).unwrap();
        let [d0, d1, d2] = LaplacianPyramid::level_dims(12, 10);
        let delta = |d: (usize, usize)| KernelTensor::delta(5, d.0, d.1).unwrap();
        let out = apply_lp_kpn(&pyr, &delta(d0), &delta(d1), &delta(d2)).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-9);

        let zero = |d: (usize, usize)| KernelTensor::zeros(3, d.0, d.1).unwrap();
        let out = apply_lp_kpn(&pyr, &zero(d0), &zero(d1), &zero(d2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lp_kpn_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_plane(9, 13, &mut rng);
        let pyr = decompose(&img).unwrap();
        let dims = LaplacianPyramid::level_dims(9, 13);
        let ts: Vec<_> = dims.iter().map(|&(h, w)| random_tensor(3, h, w, &mut rng)).collect();
        let got = apply_lp_kpn(&pyr, &ts[0], &ts[1], &ts[2]).unwrap();

        let f0 = brute_force(&pyr.s0, &ts[0]);
        let f1 = brute_force(&pyr.s1, &ts[1]);
        let f2 = brute_force(&pyr.s2, &ts[2]);
        let g1 = f1.zip_map(&gauss_up(&f2, dims[1].0, dims[1].1).unwrap(), |a, b| a + b).unwrap();
        let want = f0.zip_map(&gauss_up(&g1, 9, 13).unwrap(), |a, b| a + b).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn lp_kpn_mixed_k_rejected() {
        let pyr = decompose(&ImagePlane::zeros(8, 8)).unwrap();
        let r = apply_lp_kpn(
            &pyr,
            &KernelTensor::zeros(3, 8, 8).unwrap(),
            &KernelTensor::zeros(5, 4, 4).unwrap(),
            &KernelTensor::zeros(3, 2, 2).unwrap(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn normalization_opt_in() {
        let t = KernelTensor::uniform(3, 2, 2, &[2.0; 9]).unwrap().normalized();
        assert!(t.data().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-15));
        let z = KernelTensor::zeros(3, 2, 2).unwrap();
        assert_eq!(z.normalized(), z);
    }

    #[test]
    fn footprints() {
        let (h0, w0) = influence_footprint(5, 0).unwrap();
        let (h2, w2) = influence_footprint(5, 2).unwrap();
        assert!(h0 >= 5 && w0 >= 5);
        assert!(h2 >= 17 && w2 >= 17);
        assert!(h2 > h0 && w2 > w0);

        // k = 1 leaves only the down-down-up-up path of the pyramid.
        let n = 16 + 64;
        let mut impulse = ImagePlane::zeros(n, n);
        impulse.set(n / 2, n / 2, 1.0);
        let g1 = gauss_down(&impulse).unwrap();
        let g2 = gauss_down(&g1).unwrap();
        let up = gauss_up(&gauss_up(&g2, g1.height(), g1.width()).unwrap(), n, n).unwrap();
        let rows = (0..n).filter(|&r| (0..n).any(|c| up.get(r, c).abs() > 1e-12)).count();
        assert_eq!(influence_footprint(1, 2).unwrap(), (rows, rows));
    }
}
