//! Module-level checks against independent reference computations.

mod common;

use casgan_core::cycles::{compose, run_backward, run_forward};
use casgan_core::losses::{loss_cycle_lat, total_loss, LossReport};
use casgan_core::metrics::{fid, mmd, sqrtm_psd, Bandwidth, FeatureSet};
use casgan_core::nets::MaskPair;
use casgan_core::Tensor;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal_rows<R: Rng>(r: &mut R, n: usize, mean: &[f64], std: &[f64]) -> FeatureSet {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            mean.iter()
                .zip(std)
                .map(|(m, s)| {
                    let z: f64 = StandardNormal.sample(r);
                    m + s * z
                })
                .collect()
        })
        .collect();
    FeatureSet::from_rows(&rows).unwrap()
}

/// Direct double sum over ordered pairs.
fn mmd_nested(x: &FeatureSet, y: &FeatureSet, sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum();
        (-d / (2.0 * sigma * sigma)).exp()
    };
    let (n, m) = (x.n(), y.n());
    let mut sxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sxx += k(x.row(i), x.row(j));
            }
        }
    }
    let mut syy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                syy += k(y.row(i), y.row(j));
            }
        }
    }
    let mut sxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            sxy += k(x.row(i), y.row(j));
        }
    }
    sxx / (n * (n - 1)) as f64 + syy / (m * (m - 1)) as f64 - 2.0 * sxy / (n * m) as f64
}

#[test]
fn mmd_matches_nested_loops() {
    let mut r = common::rng(11);
    for sigma in [0.5, 1.0, 3.0] {
        let x = normal_rows(&mut r, 50, &[0.0; 8], &[1.0; 8]);
        let y = normal_rows(&mut r, 50, &[0.3; 8], &[1.2; 8]);
        let got = mmd(&x, &y, Bandwidth::Fixed(sigma)).unwrap();
        let want = mmd_nested(&x, &y, sigma);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn mmd_of_identical_points_is_zero() {
    let x = FeatureSet::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    assert_eq!(mmd(&x, &x.clone(), Bandwidth::Auto).unwrap(), 0.0);
}

#[test]
fn fid_self_distance_vanishes() {
    let mut r = common::rng(12);
    let x = normal_rows(&mut r, 200, &[0.5; 16], &[2.0; 16]);
    assert!(fid(&x, &x).unwrap().abs() <= 1e-6);
}

#[test]
fn sqrtm_residuals_on_random_spd() {
    let mut r = common::rng(13);
    for t in 0..20 {
        let d = 2 + (t * 3) % 63;
        let b = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(d, d) * 1e-3;
        let s = sqrtm_psd(&a).unwrap();
        let res = (&s * &s - &a).norm() / a.norm();
        assert!(res <= 1e-10, "d={d} residual {res}");
    }
}

#[test]
fn fid_matches_gaussian_closed_form() {
    // diagonal covariances share an eigenbasis: the trace term reduces to
    // sum (sqrt(a) - sqrt(b))^2
    let m1 = [0.0, 1.0, -1.0, 0.5];
    let m2 = [1.0, 1.0, 0.0, -0.5];
    let s1 = [1.0, 2.0, 0.5, 1.5];
    let s2 = [2.0, 1.0, 1.0, 0.5];
    let closed: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        + s1.iter().zip(&s2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut r = common::rng(14);
    let x = normal_rows(&mut r, 10_000, &m1, &s1);
    let y = normal_rows(&mut r, 10_000, &m2, &s2);
    let got = fid(&x, &y).unwrap();
    assert!((got - closed).abs() / closed <= 0.05, "{got} vs {closed}");
}

#[test]
fn metrics_grow_with_mean_gap() {
    let d = 8;
    let mut r = common::rng(15);
    let base = normal_rows(&mut r, 100, &vec![0.0; d], &vec![1.0; d]);
    let mut prev = (-1.0, -1.0);
    for gap in [0.0, 1.0, 2.0, 4.0] {
        let mut r = common::rng(16);
        let other = normal_rows(&mut r, 100, &vec![gap; d], &vec![1.0; d]);
        let f = fid(&base, &other).unwrap();
        let m = mmd(&base, &other, Bandwidth::Fixed(4.0)).unwrap();
        assert!(f > prev.0 && m > prev.1, "gap {gap}: fid {f} mmd {m} after {prev:?}");
        prev = (f, m);
    }
}

#[test]
fn cycle_lat_single_offset_pair() {
    let cfg = common::micro_config();
    let b = common::bundle(&cfg, 3);
    let mut f = run_forward(&b, &common::image(&cfg, 1)).unwrap();
    let mut w = run_backward(&b, &common::image(&cfg, 2)).unwrap();
    f.z_yg_bg = f.z_x_bg.clone();
    f.z_yg_vess = f.z_x_vess.clone();
    w.z_xg_bg = w.z_y_bg.clone();
    w.z_xg_vess = w.z_y_vess.clone();
    assert_eq!(loss_cycle_lat(&f, &w).unwrap(), 0.0);
    let shifted = f.z_x_vess.map(|v| v + 1.0);
    f.z_yg_vess = shifted;
    let got = loss_cycle_lat(&f, &w).unwrap();
    assert!((got - 1.0).abs() < 1e-12, "{got}");

    // brute force over all four pairs with random latents
    let mut r = common::rng(9);
    let mut rand_like = |t: &Tensor| Tensor::uniform(t.shape(), -2.0, 2.0, &mut r);
    f.z_yg_bg = rand_like(&f.z_yg_bg);
    f.z_yg_vess = rand_like(&f.z_yg_vess);
    w.z_xg_bg = rand_like(&w.z_xg_bg);
    w.z_xg_vess = rand_like(&w.z_xg_vess);
    let mean_abs = |a: &Tensor, b: &Tensor| {
        a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64
    };
    let want = mean_abs(&f.z_yg_bg, &f.z_x_bg)
        + mean_abs(&f.z_yg_vess, &f.z_x_vess)
        + mean_abs(&w.z_xg_bg, &w.z_y_bg)
        + mean_abs(&w.z_xg_vess, &w.z_y_vess);
    assert!((loss_cycle_lat(&f, &w).unwrap() - want).abs() < 1e-12);
}

#[test]
fn compose_identities() {
    let mut r = common::rng(4);
    let x = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut r);
    let c = Tensor::uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut r);
    let zeros = MaskPair {
        attention: Tensor::zeros(&[1, 1, 8, 8]),
        context: c.clone(),
    };
    assert_eq!(compose(&x, &zeros).unwrap(), x);
    let ones = MaskPair {
        attention: Tensor::full(&[1, 1, 8, 8], 1.0),
        context: c.clone(),
    };
    assert_eq!(compose(&x, &ones).unwrap(), c);
    let scalar = compose(
        &Tensor::full(&[1, 1, 1, 1], 0.2),
        &MaskPair {
            attention: Tensor::full(&[1, 1, 1, 1], 0.5),
            context: Tensor::full(&[1, 1, 1, 1], -0.4),
        },
    )
    .unwrap();
    let v = scalar.data()[0];
    assert!(common::ulps(v, -0.1) <= 1, "{v}");
}

#[test]
fn total_of_unit_parts_is_fifteen() {
    let r = LossReport {
        pred: 1.0,
        gan_angio: 1.0,
        gan_bg: 1.0,
        gan_sem: 1.0,
        cycle_img: 1.0,
        cycle_lat: 1.0,
        recon: 1.0,
        ..Default::default()
    };
    assert_eq!(total_loss(&r, [0.5, 10.0, 1.0, 1.0, 0.5]).unwrap(), 15.0);
}

#[test]
fn gradients_match_finite_differences() {
    let (samples, _) = common::kink_free_gradients(20, 1e-4, 21);
    assert_eq!(samples.len(), 20);
    for g in &samples {
        let e = common::rel_err(g.finite_diff, g.analytic, 1e-6);
        assert!(e <= 1e-3, "{}: fd {} analytic {} rel {e}", g.name, g.finite_diff, g.analytic);
    }
}

#[test]
fn kinked_stencils_are_detected() {
    // at this step the same draws include switch crossings, and those are
    // the only disagreements
    for g in common::gradient_check(20, 1e-4, 21) {
        if common::rel_err(g.finite_diff, g.analytic, 1e-6) > 1e-3 {
            assert!(g.crosses_kink, "{} disagrees without a kink", g.name);
        }
    }
}
