use lpkpn::image::{crop_center, ImagePlane};
use lpkpn::registration::{
    corner_errors, register, register_any_p, warp_crop, AffineTransform, LuminanceParams, RegistrationConfig,
};
use lpkpn::synth::{checker_and_ramp_corpus, registration_case, DegradationSpec, RegistrationCase};

fn scene() -> ImagePlane {
    checker_and_ramp_corpus(3, 384, 5).swap_remove(2)
}

fn example_case(outliers: f64) -> (RegistrationCase, f64) {
    let zoom = 2.05;
    let tau = AffineTransform::similarity(zoom, 0.3f64.to_radians(), 1.7, 0.0);
    let lum = LuminanceParams { alpha: 1.3, beta: -12.0 };
    let hr = scene();
    let spec = DegradationSpec { outlier_fraction: outliers, ..DegradationSpec::clean(tau, lum, hr.dims(), 3) };
    (registration_case(&hr, &spec, 2.0).unwrap(), zoom)
}

fn max_corner_error(est: &AffineTransform, case: &RegistrationCase) -> f64 {
    let (h, w) = case.target.dims();
    corner_errors(est, &case.truth, h, w).unwrap().into_iter().fold(0.0, f64::max)
}

#[test]
fn recovers_known_similarity_and_luminance() {
    let (case, zoom) = example_case(0.0);
    let r = register(&case.lr, &case.target, &AffineTransform::from_zoom(zoom), &RegistrationConfig::default()).unwrap();
    let err = max_corner_error(&r.tau, &case);
    assert!(err < 0.1, "corner error {err}");
    assert!((r.lum.alpha - 1.3).abs() < 0.013, "alpha {}", r.lum.alpha);
    assert!((r.lum.beta + 12.0).abs() < 0.5, "beta {}", r.lum.beta);
    assert_eq!(r.aligned.dims(), case.target.dims());
}

#[test]
fn l1_tolerates_outliers_that_break_l2() {
    let (case, zoom) = example_case(0.05);
    let tau0 = AffineTransform::from_zoom(zoom);
    let l1 = register(&case.lr, &case.target, &tau0, &RegistrationConfig::default()).unwrap();
    let l2 = register_any_p(&case.lr, &case.target, &tau0, &RegistrationConfig { p: 2.0, ..Default::default() }).unwrap();
    let (e1, e2) = (max_corner_error(&l1.tau, &case), max_corner_error(&l2.tau, &case));
    assert!(e1 < 0.2, "p=1 corner error {e1}");
    assert!(e2 > 0.2, "p=2 corner error {e2}");
}

#[test]
fn identity_pair_is_a_fixed_point() {
    let img = crop_center(&scene(), 128, 128).unwrap();
    let r = register(&img, &img, &AffineTransform::IDENTITY, &RegistrationConfig::default()).unwrap();
    let d: f64 = r.tau.params().iter().zip(AffineTransform::IDENTITY.params()).map(|(a, b)| (a - b).powi(2)).sum();
    assert!(d.sqrt() < 1e-6);
    assert!((r.lum.alpha - 1.0).abs() < 1e-9 && r.lum.beta.abs() < 1e-6);
}

/// A pair that the bilinear forward model explains exactly.
fn exact_case() -> (RegistrationCase, f64) {
    let (mut case, zoom) = example_case(0.0);
    let (h, w) = case.target.dims();
    let lum = case.lum;
    case.target = warp_crop(&case.lr, &case.truth, h, w).unwrap().map(|v| lum.alpha * v + lum.beta);
    (case, zoom)
}

#[test]
fn exact_pair_converges_within_five_outer_iterations() {
    let (case, zoom) = exact_case();
    let cfg = RegistrationConfig { max_outer_iters: 5, ..Default::default() };
    let r = register(&case.lr, &case.target, &AffineTransform::from_zoom(zoom), &cfg).unwrap();
    assert!(r.outer_iters_used <= 5);
    let err = max_corner_error(&r.tau, &case);
    assert!(err < 1e-3, "corner error {err}");
}

#[test]
fn residual_history_never_increases() {
    let (case, zoom) = example_case(0.02);
    let r = register(&case.lr, &case.target, &AffineTransform::from_zoom(zoom), &RegistrationConfig::default()).unwrap();
    for pair in r.residual_history.windows(2).skip(1) {
        assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "{:?}", r.residual_history);
    }
}

#[test]
fn common_intensity_gain_leaves_transform_unchanged() {
    let (case, zoom) = example_case(0.0);
    let tau0 = AffineTransform::from_zoom(zoom);
    let cfg = RegistrationConfig::default();
    let base = register(&case.lr, &case.target, &tau0, &cfg).unwrap();
    let c = 0.5;
    let scaled = register(&case.lr.map(|v| c * v), &case.target.map(|v| c * v), &tau0, &cfg).unwrap();
    for (a, b) in base.tau.params().iter().zip(scaled.tau.params()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
    assert!((base.lum.beta * c - scaled.lum.beta).abs() < 1e-6);
}
