//! Thin-lens magnification.
//!
//! With `1/f = 1/u + 1/v` and magnification `M = v/u`, an object of size
//! `h1` at distance `u` images to `h2 = f h1 / (u - f)`. For `u >> f` this
//! is close to `(f/u) h1`, i.e. image size grows linearly with focal length,
//! which is why the ratio of two focal lengths is a good first guess for the
//! scale between a zoom pair.

use crate::error::{Error, Result};

/// Lens and object geometry, all lengths in millimeters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LensConfig {
    pub focal_length: f64,
    pub object_distance: f64,
    pub object_size: f64,
}

impl LensConfig {
    pub fn new(focal_length: f64, object_distance: f64, object_size: f64) -> Result<Self> {
        let cfg = Self { focal_length, object_distance, object_size };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.focal_length, self.object_distance, self.object_size].iter().all(|v| v.is_finite());
        if !finite || self.focal_length <= 0.0 {
            return Err(Error::config("focal length must be positive and finite"));
        }
        if self.object_distance <= self.focal_length {
            return Err(Error::config("object distance must exceed focal length for a real image"));
        }
        if self.object_size < 0.0 {
            return Err(Error::config("object size must be non-negative"));
        }
        Ok(())
    }

    /// Image distance `v = f u / (u - f)`.
    pub fn image_distance(&self) -> f64 {
        self.focal_length * self.object_distance / (self.object_distance - self.focal_length)
    }

    /// Magnification `M = v / u`.
    pub fn magnification(&self) -> f64 {
        self.image_distance() / self.object_distance
    }
}

/// Exact and far-field image sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSize {
    pub exact: f64,
    pub approx: f64,
}

pub fn image_size(cfg: &LensConfig) -> Result<ImageSize> {
    cfg.validate()?;
    let f = cfg.focal_length;
    let u = cfg.object_distance;
    Ok(ImageSize { exact: f * cfg.object_size / (u - f), approx: f / u * cfg.object_size })
}

/// Scale of the long-focal frame relative to the short-focal one.
pub fn initial_scale(f_hr: f64, f_lr: f64) -> Result<f64> {
    if !(f_hr > 0.0 && f_lr > 0.0) || !f_hr.is_finite() || !f_lr.is_finite() {
        return Err(Error::config("focal lengths must be positive"));
    }
    Ok(f_hr / f_lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn telephoto_example() {
        let s = image_size(&LensConfig::new(105.0, 3000.0, 1000.0).unwrap()).unwrap();
        assert!((s.exact - 105.0 * 1000.0 / 2895.0).abs() < 1e-12);
        assert!((s.exact - 36.269).abs() < 1e-3);
        assert!((s.approx - 35.0).abs() < 1e-12);
    }

    #[test]
    fn unit_magnification_at_twice_focal() {
        let cfg = LensConfig::new(50.0, 100.0, 7.0).unwrap();
        assert!((image_size(&cfg).unwrap().exact - 7.0).abs() < 1e-12);
        assert!((cfg.image_distance() - 100.0).abs() < 1e-12);
        assert!((cfg.magnification() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_object() {
        let cfg = LensConfig::new(50.0, 400.0, 0.0).unwrap();
        assert_eq!(image_size(&cfg).unwrap().exact, 0.0);
    }

    #[test]
    fn invalid_configs() {
        assert!(LensConfig::new(50.0, 50.0, 1.0).is_err());
        assert!(LensConfig::new(50.0, 20.0, 1.0).is_err());
        assert!(LensConfig::new(0.0, 20.0, 1.0).is_err());
        assert!(initial_scale(0.0, 35.0).is_err());
        assert!(initial_scale(105.0, -1.0).is_err());
    }

    #[test]
    fn focal_ratios() {
        assert_eq!(initial_scale(105.0, 35.0).unwrap(), 3.0);
        assert!((initial_scale(105.0, 50.0).unwrap() - 2.1).abs() < 1e-12);
        assert_eq!(initial_scale(28.0, 28.0).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn far_field_approximation(f in 1.0f64..200.0, ratio in 101.0f64..1e4, h1 in 0.1f64..1e4) {
            let s = image_size(&LensConfig::new(f, f * ratio, h1).unwrap()).unwrap();
            prop_assert!((s.exact - s.approx).abs() / s.exact < 0.01);
        }

        #[test]
        fn ratio_reciprocity(a in 1.0f64..500.0, b in 1.0f64..500.0) {
            let p = initial_scale(a, b).unwrap() * initial_scale(b, a).unwrap();
            prop_assert!((p - 1.0).abs() < 1e-12);
        }
    }
}
