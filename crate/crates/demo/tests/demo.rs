use upgan_demo::{fidelity_loss, ggd_density_curve, ggd_std, Degradation, Phantom};

#[test]
fn density_curve_is_symmetric_and_normalized() {
    let (span, n) = (6.0, 2001);
    let ys = ggd_density_curve(0.7, 1.5, span, n).unwrap();
    for i in 0..n / 2 {
        assert!((ys[i] - ys[n - 1 - i]).abs() < 1e-12);
    }
    let dx = 2.0 * span / (n - 1) as f64;
    let area: f64 = ys.iter().sum::<f64>() * dx;
    assert!((area - 1.0).abs() < 1e-3, "area {area}");
}

#[test]
fn gaussian_std_and_loss_at_zero() {
    assert_eq!(ggd_std(1.0, 2.0).unwrap(), std::f64::consts::FRAC_1_SQRT_2);
    // Laplace with unit scale at zero residual: -ln(1) + lnΓ(1) = 0.
    assert!(fidelity_loss(0.0, 1.0, 1.0).unwrap().abs() < 1e-14);
}

#[test]
fn full_kspace_leaves_the_phantom_unchanged() {
    let mut p = Phantom::new(3, 10, 32).unwrap();
    p.degrade(Degradation::Undersample, 1.0, 0).unwrap();
    assert!(p.degraded_mae() < 1e-12);
    assert_eq!(p.clean_rgba().len(), 32 * 32 * 4);
    p.degrade(Degradation::Motion, 0.0, 5).unwrap();
    assert!(p.degraded_mae() < 1e-12);
}

#[test]
fn heavier_undersampling_increases_error() {
    let mut p = Phantom::new(1, 10, 64).unwrap();
    p.degrade(Degradation::Undersample, 0.3, 0).unwrap();
    let mild = p.degraded_mae();
    p.degrade(Degradation::Undersample, 0.05, 0).unwrap();
    assert!(p.degraded_mae() > mild);
}

#[test]
fn attention_sums_to_one_and_tracks_error() {
    let mut p = Phantom::new(2, 10, 64).unwrap();
    p.degrade(Degradation::Motion, 1.0, 7).unwrap();
    let att = p.attention(0.01, 5.0, 1.5).unwrap();
    assert!((att.sum() - 1.0).abs() < 1e-9);
    // With gain, the worst decile draws more than its uniform 10% share.
    assert!(p.attention_on_worst_decile(0.01, 5.0, 1.5).unwrap() > 0.1);
    assert!((p.attention_on_worst_decile(0.01, 0.0, 1.5).unwrap() - 0.1).abs() < 0.01);
    assert_eq!(p.attention_rgba(0.01, 5.0, 1.5).unwrap().len(), 64 * 64 * 4);
}
