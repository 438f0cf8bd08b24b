//! Three-level Laplacian pyramid with exact reconstruction.
//!
//! Decimation uses the separable binomial filter `[1, 4, 6, 4, 1] / 16`
//! and keeps even samples, so an `n` sample axis becomes `ceil(n / 2)`.
//! Expansion is the matching interpolator: zero insertion followed by the
//! same filter with gain 2, which works out to the fixed taps
//! `(1/8, 3/4, 1/8)` on even outputs and `(1/2, 1/2)` on odd outputs.
//! Both operators extend the signal they read by edge replication, so
//! constants pass through unchanged at every level.
//!
//! The residual construction makes the round trip exact regardless of the
//! filter; the only error is floating-point round-off.

use crate::error::{Error, Result};
use crate::image::ImagePlane;

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Sparse 1-D linear map: `out[i] = sum of w * in[j]` over `taps[i]`.
struct AxisMap {
    n_in: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    fn down(n_in: usize) -> Self {
        let n_out = n_in.div_ceil(2);
        let last = n_in as isize - 1;
        let taps = (0..n_out)
            .map(|m| {
                BINOMIAL
                    .iter()
                    .enumerate()
                    .map(|(t, &w)| (((2 * m + t) as isize - 2).clamp(0, last) as usize, w))
                    .collect()
            })
            .collect();
        Self { n_in, taps }
    }

    fn up(n_in: usize, n_out: usize) -> Self {
        let last = n_in as isize - 1;
        let at = |j: isize| j.clamp(0, last) as usize;
        let taps = (0..n_out)
            .map(|i| {
                let m = (i / 2) as isize;
                if i % 2 == 0 {
                    vec![(at(m - 1), 0.125), (at(m), 0.75), (at(m + 1), 0.125)]
                } else {
                    vec![(at(m), 0.5), (at(m + 1), 0.5)]
                }
            })
            .collect();
        Self { n_in, taps }
    }

    fn n_out(&self) -> usize {
        self.taps.len()
    }
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

/// Applies `map` along the horizontal (`Cols`) or vertical (`Rows`) axis.
fn apply_axis(img: &ImagePlane, map: &AxisMap, axis: Axis) -> ImagePlane {
    let (h, w) = img.dims();
    match axis {
        Axis::Cols => {
            let n_out = map.n_out();
            let mut out = vec![0.0; h * n_out];
            for r in 0..h {
                let src = img.row(r);
                let dst = &mut out[r * n_out..(r + 1) * n_out];
                for (o, taps) in dst.iter_mut().zip(&map.taps) {
                    *o = taps.iter().map(|&(j, wt)| wt * src[j]).sum();
                }
            }
            ImagePlane::new(h, n_out, out).expect("finite input")
        }
        Axis::Rows => {
            let n_out = map.n_out();
            let mut out = vec![0.0; n_out * w];
            for (i, taps) in map.taps.iter().enumerate() {
                let dst = &mut out[i * w..(i + 1) * w];
                for &(j, wt) in taps {
                    for (o, s) in dst.iter_mut().zip(img.row(j)) {
                        *o += wt * s;
                    }
                }
            }
            ImagePlane::new(n_out, w, out).expect("finite input")
        }
    }
}

/// Transpose of [`apply_axis`]: scatters `grad` back onto `map.n_in` samples.
fn apply_axis_adjoint(grad: &ImagePlane, map: &AxisMap, axis: Axis) -> ImagePlane {
    let (h, w) = grad.dims();
    let n_in = map.n_in;
    match axis {
        Axis::Cols => {
            let mut out = vec![0.0; h * n_in];
            for r in 0..h {
                let g = grad.row(r);
                let dst = &mut out[r * n_in..(r + 1) * n_in];
                for (gi, taps) in g.iter().zip(&map.taps) {
                    for &(j, wt) in taps {
                        dst[j] += wt * gi;
                    }
                }
            }
            ImagePlane::new(h, n_in, out).expect("finite input")
        }
        Axis::Rows => {
            let mut out = vec![0.0; n_in * w];
            for (i, taps) in map.taps.iter().enumerate() {
                let g = grad.row(i);
                for &(j, wt) in taps {
                    for (o, gi) in out[j * w..(j + 1) * w].iter_mut().zip(g) {
                        *o += wt * gi;
                    }
                }
            }
            ImagePlane::new(n_in, w, out).expect("finite input")
        }
    }
}

fn ceil_half(d: (usize, usize)) -> (usize, usize) {
    (d.0.div_ceil(2), d.1.div_ceil(2))
}

/// Blur with the 5-tap binomial filter, then keep every other sample.
pub fn gauss_down(img: &ImagePlane) -> Result<ImagePlane> {
    let (h, w) = img.dims();
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("gauss_down needs at least 2x2, got {h}x{w}")));
    }
    let tmp = apply_axis(img, &AxisMap::down(w), Axis::Cols);
    Ok(apply_axis(&tmp, &AxisMap::down(h), Axis::Rows))
}

/// Expands `img` to `(out_h, out_w)`, which must ceil-halve to `img.dims()`.
pub fn gauss_up(img: &ImagePlane, out_h: usize, out_w: usize) -> Result<ImagePlane> {
    check_up_dims(img.dims(), out_h, out_w)?;
    let (h, w) = img.dims();
    let tmp = apply_axis(img, &AxisMap::up(w, out_w), Axis::Cols);
    Ok(apply_axis(&tmp, &AxisMap::up(h, out_h), Axis::Rows))
}

/// Adjoint of [`gauss_up`]: maps a fine-grid gradient to the coarse grid.
pub fn gauss_up_adjoint(grad: &ImagePlane, coarse_h: usize, coarse_w: usize) -> Result<ImagePlane> {
    check_up_dims((coarse_h, coarse_w), grad.height(), grad.width())?;
    let (h, w) = grad.dims();
    let tmp = apply_axis_adjoint(grad, &AxisMap::up(coarse_h, h), Axis::Rows);
    Ok(apply_axis_adjoint(&tmp, &AxisMap::up(coarse_w, w), Axis::Cols))
}

/// Adjoint of [`gauss_down`] for an image of size `(fine_h, fine_w)`.
pub fn gauss_down_adjoint(grad: &ImagePlane, fine_h: usize, fine_w: usize) -> Result<ImagePlane> {
    if ceil_half((fine_h, fine_w)) != grad.dims() {
        return Err(Error::shape("gauss_down_adjoint: gradient does not match the decimated size"));
    }
    let tmp = apply_axis_adjoint(grad, &AxisMap::down(fine_h), Axis::Rows);
    Ok(apply_axis_adjoint(&tmp, &AxisMap::down(fine_w), Axis::Cols))
}

fn check_up_dims(coarse: (usize, usize), out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 || ceil_half((out_h, out_w)) != coarse {
        return Err(Error::shape(format!(
            "cannot expand {}x{} to {out_h}x{out_w}",
            coarse.0, coarse.1
        )));
    }
    Ok(())
}

/// Gaussian pyramid `[img, down(img), down(down(img)), ...]`, stopping
/// early once a level would drop below `min_side` pixels.
pub fn gaussian_pyramid(img: &ImagePlane, levels: usize, min_side: usize) -> Result<Vec<ImagePlane>> {
    let mut out = vec![img.clone()];
    while out.len() < levels {
        let last = out.last().expect("non-empty");
        let (h, w) = ceil_half(last.dims());
        if h < min_side.max(1) || w < min_side.max(1) || last.height() < 2 || last.width() < 2 {
            break;
        }
        let next = gauss_down(last)?;
        out.push(next);
    }
    Ok(out)
}

/// Band-pass residuals `s0`, `s1` and the low-pass base `s2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid {
    pub s0: ImagePlane,
    pub s1: ImagePlane,
    pub s2: ImagePlane,
}

impl LaplacianPyramid {
    /// Checks the ceil-halving dimension chain.
    pub fn new(s0: ImagePlane, s1: ImagePlane, s2: ImagePlane) -> Result<Self> {
        let pyr = Self { s0, s1, s2 };
        pyr.validate()?;
        Ok(pyr)
    }

    pub fn validate(&self) -> Result<()> {
        if ceil_half(self.s0.dims()) != self.s1.dims() || ceil_half(self.s1.dims()) != self.s2.dims() {
            return Err(Error::shape(format!(
                "pyramid dims {:?}, {:?}, {:?} do not form a halving chain",
                self.s0.dims(),
                self.s1.dims(),
                self.s2.dims()
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> [&ImagePlane; 3] {
        [&self.s0, &self.s1, &self.s2]
    }

    /// Level dimensions for a full-resolution image of `(h, w)`.
    pub fn level_dims(h: usize, w: usize) -> [(usize, usize); 3] {
        let d1 = ceil_half((h, w));
        [(h, w), d1, ceil_half(d1)]
    }
}

pub fn decompose(img: &ImagePlane) -> Result<LaplacianPyramid> {
    let (h, w) = img.dims();
    if h < 4 || w < 4 {
        return Err(Error::shape(format!("decompose needs at least 4x4, got {h}x{w}")));
    }
    let g1 = gauss_down(img)?;
    let g2 = gauss_down(&g1)?;
    let s0 = img.zip_map(&gauss_up(&g1, h, w)?, |a, b| a - b)?;
    let s1 = g1.zip_map(&gauss_up(&g2, g1.height(), g1.width())?, |a, b| a - b)?;
    Ok(LaplacianPyramid { s0, s1, s2: g2 })
}

pub fn reconstruct(pyr: &LaplacianPyramid) -> Result<ImagePlane> {
    pyr.validate()?;
    let (h1, w1) = pyr.s1.dims();
    let (h0, w0) = pyr.s0.dims();
    let g1 = pyr.s1.zip_map(&gauss_up(&pyr.s2, h1, w1)?, |a, b| a + b)?;
    pyr.s0.zip_map(&gauss_up(&g1, h0, w0)?, |a, b| a + b)
}

/// Gradient of a scalar loss with respect to each pyramid level, given its
/// gradient with respect to the reconstructed image.
pub fn reconstruct_adjoint(grad: &ImagePlane) -> Result<LaplacianPyramid> {
    let [_, (h1, w1), (h2, w2)] = LaplacianPyramid::level_dims(grad.height(), grad.width());
    let g1 = gauss_up_adjoint(grad, h1, w1)?;
    let g2 = gauss_up_adjoint(&g1, h2, w2)?;
    Ok(LaplacianPyramid { s0: grad.clone(), s1: g1, s2: g2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(h: usize, w: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
        ImagePlane::from_fn(h, w, |_, _| rng.gen_range(0.0..255.0))
    }

    /// Direct 2-D convolution with the outer-product binomial kernel and
    /// replicate borders, then decimation.
    fn dense_down(img: &ImagePlane) -> ImagePlane {
        let (h, w) = img.dims();
        ImagePlane::from_fn(h.div_ceil(2), w.div_ceil(2), |r, c| {
            let mut acc = 0.0;
            for (a, wa) in BINOMIAL.iter().enumerate() {
                for (b, wb) in BINOMIAL.iter().enumerate() {
                    acc += wa * wb * img.get_clamped((2 * r + a) as isize - 2, (2 * c + b) as isize - 2);
                }
            }
            acc
        })
    }

    /// Zero insertion on a replicate-extended coarse grid, then the gain-2
    /// filter, evaluated by brute force.
    fn dense_up(img: &ImagePlane, out_h: usize, out_w: usize) -> ImagePlane {
        let z = |r: isize, c: isize| -> f64 {
            if r.rem_euclid(2) != 0 || c.rem_euclid(2) != 0 {
                0.0
            } else {
                img.get_clamped(r.div_euclid(2), c.div_euclid(2))
            }
        };
        ImagePlane::from_fn(out_h, out_w, |r, c| {
            let mut acc = 0.0;
            for (a, wa) in BINOMIAL.iter().enumerate() {
                for (b, wb) in BINOMIAL.iter().enumerate() {
                    acc += 4.0 * wa * wb * z(r as isize + a as isize - 2, c as isize + b as isize - 2);
                }
            }
            acc
        })
    }

    #[test]
    fn constants_pass_through() {
        let c = ImagePlane::filled(7, 10, 42.5);
        let d = gauss_down(&c).unwrap();
        assert_eq!(d.dims(), (4, 5));
        assert!(d.data().iter().all(|&v| (v - 42.5).abs() < 1e-12));
        let u = gauss_up(&d, 7, 10).unwrap();
        assert!(u.data().iter().all(|&v| (v - 42.5).abs() < 1e-12));
    }

    #[test]
    fn single_bright_pixel_2x2() {
        let mut img = ImagePlane::zeros(2, 2);
        img.set(0, 0, 1.0);
        let d = gauss_down(&img).unwrap();
        assert_eq!(d.dims(), (1, 1));
        // Replicated taps at -2, -1, 0 all read the bright pixel: 11/16 per axis.
        assert!((d.get(0, 0) - 121.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(matches!(gauss_down(&ImagePlane::zeros(1, 5)), Err(Error::Shape(_))));
        assert!(matches!(decompose(&ImagePlane::zeros(3, 8)), Err(Error::Shape(_))));
        assert!(matches!(gauss_up(&ImagePlane::zeros(2, 2), 5, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn down_matches_dense_oracle() {
        let ramp = ImagePlane::from_fn(8, 8, |r, c| (3 * r + c) as f64);
        assert!(gauss_down(&ramp).unwrap().max_abs_diff(&dense_down(&ramp)) < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (h, w) in [(5, 9), (2, 2), (13, 6)] {
            let img = random_plane(h, w, &mut rng);
            assert!(gauss_down(&img).unwrap().max_abs_diff(&dense_down(&img)) < 1e-10);
        }
    }

    #[test]
    fn up_matches_dense_oracle() {
        let mut impulse = ImagePlane::zeros(5, 5);
        impulse.set(2, 2, 1.0);
        let up = gauss_up(&impulse, 9, 10).unwrap();
        assert!(up.max_abs_diff(&dense_up(&impulse, 9, 10)) < 1e-15);
        // Separable tent: 3/4 * 3/4 at the impulse, 1/2 * 3/4 next to it.
        assert!((up.get(4, 4) - 0.5625).abs() < 1e-15);
        assert!((up.get(4, 5) - 0.375).abs() < 1e-15);
        assert!((up.get(5, 5) - 0.25).abs() < 1e-15);
        assert!((up.get(4, 6) - 0.09375).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (h, w) in [(3, 4), (1, 1), (6, 2)] {
            let img = random_plane(h, w, &mut rng);
            for (oh, ow) in [(2 * h, 2 * w), (2 * h - 1, 2 * w - 1)] {
                assert!(gauss_up(&img, oh, ow).unwrap().max_abs_diff(&dense_up(&img, oh, ow)) < 1e-10);
            }
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (h, w) in [(7usize, 9usize), (8, 8), (5, 12)] {
            let coarse = random_plane(h.div_ceil(2), w.div_ceil(2), &mut rng);
            let fine = random_plane(h, w, &mut rng);
            let dot = |a: &ImagePlane, b: &ImagePlane| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();

            let lhs = dot(&gauss_up(&coarse, h, w).unwrap(), &fine);
            let rhs = dot(&coarse, &gauss_up_adjoint(&fine, coarse.height(), coarse.width()).unwrap());
            assert!((lhs - rhs).abs() < 1e-6 * lhs.abs());

            let lhs = dot(&gauss_down(&fine).unwrap(), &coarse);
            let rhs = dot(&fine, &gauss_down_adjoint(&coarse, h, w).unwrap());
            assert!((lhs - rhs).abs() < 1e-6 * lhs.abs());
        }
    }

    #[test]
    fn constant_image_decomposes_to_base_only() {
        let pyr = decompose(&ImagePlane::filled(12, 9, 17.0)).unwrap();
        assert!(pyr.s0.data().iter().all(|v| v.abs() < 1e-12));
        assert!(pyr.s1.data().iter().all(|v| v.abs() < 1e-12));
        assert!(pyr.s2.data().iter().all(|v| (v - 17.0).abs() < 1e-12));
        assert_eq!(pyr.s1.dims(), (6, 5));
        assert_eq!(pyr.s2.dims(), (3, 3));
    }

    #[test]
    fn zero_residuals_reconstruct_constant() {
        let pyr = LaplacianPyramid::new(ImagePlane::zeros(10, 10), ImagePlane::zeros(5, 5), ImagePlane::filled(3, 3, 9.0))
            .unwrap();
        assert!(reconstruct(&pyr).unwrap().data().iter().all(|v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn roundtrip_16x16() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_plane(16, 16, &mut rng);
        assert!(reconstruct(&decompose(&img).unwrap()).unwrap().max_abs_diff(&img) <= 1e-9);
    }

    #[test]
    fn bad_chain_is_rejected() {
        let err = LaplacianPyramid::new(ImagePlane::zeros(8, 8), ImagePlane::zeros(3, 4), ImagePlane::zeros(2, 2));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn reconstruct_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut ChaCha8Rng| {
            LaplacianPyramid::new(random_plane(11, 14, rng), random_plane(6, 7, rng), random_plane(3, 4, rng)).unwrap()
        };
        let p = mk(&mut rng);
        let q = mk(&mut rng);
        let (a, b) = (1.7, -0.4);
        let mix = |x: &ImagePlane, y: &ImagePlane| x.zip_map(y, |u, v| a * u + b * v).unwrap();
        let combined = LaplacianPyramid::new(mix(&p.s0, &q.s0), mix(&p.s1, &q.s1), mix(&p.s2, &q.s2)).unwrap();
        let lhs = reconstruct(&combined).unwrap();
        let rhs = mix(&reconstruct(&p).unwrap(), &reconstruct(&q).unwrap());
        assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn natural_patch_energy_diagnostic() {
        let img = ImagePlane::from_fn(192, 192, |r, c| {
            128.0 + 60.0 * ((r as f64) / 9.0).sin() * ((c as f64) / 13.0).cos() + (r as f64 - c as f64) * 0.2
        });
        let pyr = decompose(&img).unwrap();
        let mean_abs = |p: &ImagePlane| p.data().iter().map(|v| v.abs()).sum::<f64>() / p.len() as f64;
        eprintln!("mean |s0| = {:.4}, mean |s1| = {:.4}", mean_abs(&pyr.s0), mean_abs(&pyr.s1));
        assert!(reconstruct(&pyr).unwrap().max_abs_diff(&img) <= 1e-9);
    }
}
