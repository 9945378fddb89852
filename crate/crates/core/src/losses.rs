//! Every term of the translation objective, on plain tensors and as graph
//! nodes. All reductions are means over elements and batch.

use serde::{Deserialize, Serialize};

use crate::config::AdvLossForm;
use crate::cycles::{BackwardBundle, ForwardBundle};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Scalar loss terms of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pred: f64,
    pub gan_angio: f64,
    pub gan_bg: f64,
    pub gan_sem: f64,
    pub cycle_img: f64,
    pub cycle_lat: f64,
    pub recon: f64,
    pub total: f64,
    pub d_angio: f64,
    pub d_bg: f64,
    pub d_sem: f64,
}

impl LossReport {
    /// Named generator-side terms in their summation order.
    pub fn parts(&self) -> [(&'static str, f64); 7] {
        [
            ("gan_angio", self.gan_angio),
            ("gan_bg", self.gan_bg),
            ("gan_sem", self.gan_sem),
            ("cycle_img", self.cycle_img),
            ("cycle_lat", self.cycle_lat),
            ("pred", self.pred),
            ("recon", self.recon),
        ]
    }

    /// Every field, including the total and the discriminator scalars.
    pub fn named(&self) -> [(&'static str, f64); 11] {
        [
            ("pred", self.pred),
            ("gan_angio", self.gan_angio),
            ("gan_bg", self.gan_bg),
            ("gan_sem", self.gan_sem),
            ("cycle_img", self.cycle_img),
            ("cycle_lat", self.cycle_lat),
            ("recon", self.recon),
            ("total", self.total),
            ("d_angio", self.d_angio),
            ("d_bg", self.d_bg),
            ("d_sem", self.d_sem),
        ]
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.named()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Weights of the generator terms in [`LossReport::parts`] order.
pub fn part_weights(lambdas: [f64; 5]) -> [f64; 7] {
    let [l1, l2, l3, l4, l5] = lambdas;
    [1.0, 1.0, l1, l2, l3, l4, l5]
}

/// `gan_angio + gan_bg + l1 gan_sem + l2 cycle_img + l3 cycle_lat + l4 pred + l5 recon`.
pub fn total_loss(parts: &LossReport, lambdas: [f64; 5]) -> Result<f64> {
    let mut total = 0.0;
    for ((name, v), w) in parts.parts().into_iter().zip(part_weights(lambdas)) {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name.into() });
        }
        total += w * v;
    }
    Ok(total)
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.len() as f64)
}

fn finite_scores(s: &Tensor) -> Result<()> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: "scores".into(),
        })
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn mean_map(t: &Tensor, f: impl Fn(f64) -> f64) -> f64 {
    t.data().iter().map(|&v| f(v)).sum::<f64>() / t.len() as f64
}

/// Mean squared error between predicted and target vessel latents.
pub fn loss_pred(z_pred: &Tensor, z_target: &Tensor) -> Result<f64> {
    mse(z_pred, z_target)
}

/// Generator-side adversarial loss on scores of generated data.
pub fn loss_gan_g(scores_fake: &Tensor, form: AdvLossForm) -> Result<f64> {
    finite_scores(scores_fake)?;
    Ok(match form {
        AdvLossForm::LeastSquares => mean_map(scores_fake, |s| (s - 1.0) * (s - 1.0)),
        AdvLossForm::VanillaLog => mean_map(scores_fake, |s| softplus(-s)),
    })
}

/// Discriminator-side adversarial loss.
pub fn loss_gan_d(scores_real: &Tensor, scores_fake: &Tensor, form: AdvLossForm) -> Result<f64> {
    finite_scores(scores_real)?;
    finite_scores(scores_fake)?;
    Ok(match form {
        AdvLossForm::LeastSquares => {
            0.5 * (mean_map(scores_real, |s| (s - 1.0) * (s - 1.0)) + mean_map(scores_fake, |s| s * s))
        }
        AdvLossForm::VanillaLog => {
            mean_map(scores_real, |s| softplus(-s)) + mean_map(scores_fake, softplus)
        }
    })
}

pub fn loss_cycle_img(x_c: &Tensor, x: &Tensor, y_c: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(x_c.mean_abs_diff(x)? + y_c.mean_abs_diff(y)?)
}

pub fn loss_cycle_lat(fwd: &ForwardBundle, bwd: &BackwardBundle) -> Result<f64> {
    Ok(fwd.z_yg_bg.mean_abs_diff(&fwd.z_x_bg)?
        + fwd.z_yg_vess.mean_abs_diff(&fwd.z_x_vess)?
        + bwd.z_xg_bg.mean_abs_diff(&bwd.z_y_bg)?
        + bwd.z_xg_vess.mean_abs_diff(&bwd.z_y_vess)?)
}

pub fn loss_recon(x_r: &Tensor, x: &Tensor, y_r: &Tensor, y: &Tensor) -> Result<f64> {
    loss_cycle_img(x_r, x, y_r, y)
}

/// Graph form of [`loss_gan_g`].
pub fn gan_g_var(g: &mut Graph, scores: Var, form: AdvLossForm) -> Var {
    match form {
        AdvLossForm::LeastSquares => g.mean_sq_to(scores, 1.0),
        AdvLossForm::VanillaLog => g.mean_softplus(scores, -1.0),
    }
}

/// Graph form of [`loss_gan_d`].
pub fn gan_d_var(g: &mut Graph, real: Var, fake: Var, form: AdvLossForm) -> Var {
    match form {
        AdvLossForm::LeastSquares => {
            let r = g.mean_sq_to(real, 1.0);
            let f = g.mean_sq_to(fake, 0.0);
            g.weighted_sum(&[(r, 0.5), (f, 0.5)])
        }
        AdvLossForm::VanillaLog => {
            let r = g.mean_softplus(real, -1.0);
            let f = g.mean_softplus(fake, 1.0);
            g.weighted_sum(&[(r, 1.0), (f, 1.0)])
        }
    }
}

/// Sum of two mean-absolute-error terms.
pub fn l1_pair_var(g: &mut Graph, a: Var, a_ref: Var, b: Var, b_ref: Var) -> Var {
    let p = g.mean_abs_diff(a, a_ref);
    let q = g.mean_abs_diff(b, b_ref);
    g.weighted_sum(&[(p, 1.0), (q, 1.0)])
}

/// Generator-side terms as graph nodes, in [`LossReport::parts`] order.
#[derive(Debug, Clone, Copy)]
pub struct GenTerms {
    pub gan_angio: Var,
    pub gan_bg: Var,
    pub gan_sem: Var,
    pub cycle_img: Var,
    pub cycle_lat: Var,
    pub pred: Var,
    pub recon: Var,
}

impl GenTerms {
    pub fn vars(&self) -> [Var; 7] {
        [
            self.gan_angio,
            self.gan_bg,
            self.gan_sem,
            self.cycle_img,
            self.cycle_lat,
            self.pred,
            self.recon,
        ]
    }

    pub fn total(&self, g: &mut Graph, lambdas: [f64; 5]) -> Var {
        let terms: Vec<(Var, f64)> = self.vars().into_iter().zip(part_weights(lambdas)).collect();
        g.weighted_sum(&terms)
    }

    /// Reads the term values into a report; `total` is recomputed from them.
    pub fn report(&self, g: &Graph, lambdas: [f64; 5]) -> Result<LossReport> {
        let mut r = LossReport {
            gan_angio: g.item(self.gan_angio),
            gan_bg: g.item(self.gan_bg),
            gan_sem: g.item(self.gan_sem),
            cycle_img: g.item(self.cycle_img),
            cycle_lat: g.item(self.cycle_lat),
            pred: g.item(self.pred),
            recon: g.item(self.recon),
            ..LossReport::default()
        };
        r.total = total_loss(&r, lambdas)?;
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    const DEFAULT_LAMBDAS: [f64; 5] = [0.5, 10.0, 1.0, 1.0, 0.5];

    #[test]
    fn pred_examples() {
        let a = t(&[0.3, -1.0, 2.0]);
        assert_eq!(loss_pred(&a, &a).unwrap(), 0.0);
        assert_eq!(loss_pred(&a, &a.map(|v| v + 1.0)).unwrap(), 1.0);
        assert_eq!(loss_pred(&t(&[0.0, 2.0]), &t(&[1.0, 0.0])).unwrap(), 2.5);
        assert!(loss_pred(&t(&[0.0]), &t(&[0.0, 1.0])).is_err());
    }

    #[test]
    fn gan_examples() {
        let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
        let zeros = Tensor::zeros(&[1, 1, 3, 3]);
        let ls = AdvLossForm::LeastSquares;
        let vl = AdvLossForm::VanillaLog;
        assert_eq!(loss_gan_g(&ones, ls).unwrap(), 0.0);
        assert_eq!(loss_gan_g(&zeros, ls).unwrap(), 1.0);
        assert!((loss_gan_g(&zeros, vl).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(loss_gan_d(&ones, &zeros, ls).unwrap(), 0.0);
        assert!((loss_gan_d(&zeros, &zeros, vl).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(loss_gan_d(&zeros, &ones, ls).unwrap(), 1.0);
        let nan = t(&[f64::NAN]);
        assert!(matches!(loss_gan_g(&nan, ls), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cycle_and_recon_examples() {
        let x = t(&[0.1, -0.2, 0.5, 0.9]);
        let y = t(&[-0.3, 0.4, 0.0, 0.2]);
        assert_eq!(loss_cycle_img(&x, &x, &y, &y).unwrap(), 0.0);
        let x5 = x.map(|v| v + 0.5);
        assert!((loss_cycle_img(&x5, &x, &y, &y).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(
            loss_cycle_img(&t(&[1.0, -1.0]), &t(&[0.0, 0.0]), &y, &y).unwrap(),
            1.0
        );
        let y2 = y.map(|v| v + 0.2);
        assert!((loss_recon(&x, &x, &y2, &y).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn recon_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng))
            .collect();
        let mut sx = 0.0;
        let mut sy = 0.0;
        for i in 0..16 {
            sx += (imgs[0].data()[i] - imgs[1].data()[i]).abs();
            sy += (imgs[2].data()[i] - imgs[3].data()[i]).abs();
        }
        let oracle = sx / 16.0 + sy / 16.0;
        let got = loss_recon(&imgs[0], &imgs[1], &imgs[2], &imgs[3]).unwrap();
        assert!((got - oracle).abs() < 1e-14);
    }

    #[test]
    fn total_examples() {
        let all = |v: f64| LossReport {
            pred: v,
            gan_angio: v,
            gan_bg: v,
            gan_sem: v,
            cycle_img: v,
            cycle_lat: v,
            recon: v,
            ..LossReport::default()
        };
        assert_eq!(total_loss(&all(1.0), DEFAULT_LAMBDAS).unwrap(), 15.0);
        assert_eq!(total_loss(&all(0.0), DEFAULT_LAMBDAS).unwrap(), 0.0);
        let only = LossReport {
            cycle_img: 2.0,
            ..LossReport::default()
        };
        assert_eq!(total_loss(&only, DEFAULT_LAMBDAS).unwrap(), 20.0);
        let bad = LossReport {
            gan_sem: f64::NAN,
            ..LossReport::default()
        };
        match total_loss(&bad, DEFAULT_LAMBDAS) {
            Err(Error::NonFinite { term }) => assert_eq!(term, "gan_sem"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn graph_forms_agree_with_tensor_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for form in [AdvLossForm::LeastSquares, AdvLossForm::VanillaLog] {
            let real = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
            let fake = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
            let mut g = Graph::new();
            let r = g.constant(real.clone());
            let f = g.constant(fake.clone());
            let gg = gan_g_var(&mut g, f, form);
            let dd = gan_d_var(&mut g, r, f, form);
            assert!((g.item(gg) - loss_gan_g(&fake, form).unwrap()).abs() < 1e-14);
            assert!((g.item(dd) - loss_gan_d(&real, &fake, form).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn least_squares_antagonism() {
        let ls = AdvLossForm::LeastSquares;
        let real = Tensor::full(&[4], 0.7);
        let mut prev: Option<(f64, f64)> = None;
        for i in 0..=20 {
            let s = -1.0 + 0.1 * i as f64;
            let fake = Tensor::full(&[4], s);
            let g = loss_gan_g(&fake, ls).unwrap();
            let d_fake = loss_gan_d(&real, &fake, ls).unwrap() - loss_gan_d(&real, &Tensor::zeros(&[4]), ls).unwrap();
            if let Some((pg, pd)) = prev {
                assert!(g < pg);
                if s > 0.0 {
                    assert!(d_fake > pd);
                }
            }
            prev = Some((g, d_fake));
        }
    }

    proptest! {
        #[test]
        fn total_identity_within_4_ulps(v in prop::array::uniform7(0.0f64..10.0), l in prop::array::uniform5(0.0f64..20.0)) {
            let r = LossReport {
                gan_angio: v[0], gan_bg: v[1], gan_sem: v[2], cycle_img: v[3],
                cycle_lat: v[4], pred: v[5], recon: v[6], ..LossReport::default()
            };
            let total = total_loss(&r, l).unwrap();
            let oracle = v[0] + v[1] + l[0] * v[2] + l[1] * v[3] + l[2] * v[4] + l[3] * v[5] + l[4] * v[6];
            prop_assert!((total - oracle).abs() <= 4.0 * f64::EPSILON * oracle.abs().max(f64::MIN_POSITIVE));
        }

        #[test]
        fn terms_are_non_negative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[9], 2.0, &mut rng);
            let b = Tensor::randn(&[9], 2.0, &mut rng);
            prop_assert!(loss_pred(&a, &b).unwrap() >= 0.0);
            prop_assert!(loss_gan_g(&a, AdvLossForm::LeastSquares).unwrap() >= 0.0);
            prop_assert!(loss_gan_d(&a, &b, AdvLossForm::LeastSquares).unwrap() >= 0.0);
            prop_assert!(loss_cycle_img(&a, &b, &b, &a).unwrap() >= 0.0);
        }

        #[test]
        fn pred_scales_quadratically(seed in 0u64..500, alpha in -4.0f64..4.0) {
            // powers of two keep the scaling exact
            let alpha = 2f64.powi(alpha.round() as i32);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[12], 1.0, &mut rng);
            let b = Tensor::randn(&[12], 1.0, &mut rng);
            let base = loss_pred(&a, &b).unwrap();
            let scaled = loss_pred(&a.map(|v| alpha * v), &b.map(|v| alpha * v)).unwrap();
            prop_assert_eq!(scaled, alpha * alpha * base);
        }
    }
}
