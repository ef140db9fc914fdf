use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_surv::bounds::{crown_ibp_bounds, ibp_bounds, worst_case_hazard, PerturbationSet};
use robust_surv::nn::Network;
use robust_surv::objectives::{
    certified_upper_loss, combined_loss, fgsm_perturb, noise_perturb, pgd_perturb, sawar_loss, Batch, LossParams,
    StepRule,
};
use robust_surv::selftest::random_net;
use robust_surv::survival::{hazard, SurvRecord};

struct Case {
    net: Network,
    batch: Batch,
    rng: ChaCha8Rng,
}

fn case(seed: u64, dim: usize, width: usize, n: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = random_net(&[dim, width, width, 1], &mut rng);
    let records: Vec<SurvRecord> = (0..n)
        .map(|_| {
            SurvRecord::new(
                (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
                rng.gen_range(0.05..4.0),
                rng.gen_bool(0.5),
            )
            .unwrap()
        })
        .collect();
    Case {
        net,
        batch: Batch::from_records(&records).unwrap(),
        rng,
    }
}

/// Exact containment in the floating-point box `[x - eps, x + eps]`.
fn in_ball(a: &Batch, b: &Batch, eps: f64) -> bool {
    (0..a.len()).all(|i| a.row(i).iter().zip(b.row(i)).all(|(x, y)| *y >= x - eps && *y <= x + eps))
        && a.times() == b.times()
        && a.events() == b.events()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bounds_contain_sampled_outputs(seed in any::<u64>(), dim in 1usize..5, width in 1usize..7, eps in 0.0f64..1.0) {
        let Case { net, batch, mut rng } = case(seed, dim, width, 1);
        let center = batch.row(0).to_vec();
        let set = PerturbationSet::new(&center, eps).unwrap();
        let (ibp, _) = ibp_bounds(&net, &set).unwrap();
        let crown = crown_ibp_bounds(&net, &set).unwrap();
        prop_assert!(crown.width() <= ibp.width() + 1e-9);
        let worst = worst_case_hazard(&net, &set).unwrap().value;
        for _ in 0..200 {
            let x: Vec<f64> = center.iter().map(|c| c + rng.gen_range(-1.0..=1.0) * eps).collect();
            let g = net.forward(&x).unwrap();
            prop_assert!(ibp.contains(g, 1e-9) && crown.contains(g, 1e-9));
            prop_assert!(hazard(g) <= worst * (1.0 + 1e-12));
        }
    }

    #[test]
    fn ibp_grows_with_radius(seed in any::<u64>(), dim in 1usize..4, e1 in 0.0f64..0.5, e2 in 0.0f64..0.5) {
        let Case { net, batch, .. } = case(seed, dim, 5, 1);
        let (small, large) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let (a, _) = ibp_bounds(&net, &PerturbationSet::new(batch.row(0), small).unwrap()).unwrap();
        let (b, _) = ibp_bounds(&net, &PerturbationSet::new(batch.row(0), large).unwrap()).unwrap();
        prop_assert!(b.lb <= a.lb + 1e-12 && a.ub <= b.ub + 1e-12);
    }

    #[test]
    fn certified_loss_dominates_perturbed_loss(seed in any::<u64>(), n in 2usize..6, eps in 0.0f64..0.6) {
        let Case { net, batch, mut rng } = case(seed, 3, 6, n);
        let params = LossParams::for_batch_size(n);
        // the relaxation is exact where the net is affine over the ball, so a
        // corner can reach the bound up to rounding
        let bound = certified_upper_loss(&net, &batch, eps, params).unwrap().value;
        let bound = bound + 1e-12 * bound.abs().max(1.0);
        prop_assert!(bound >= combined_loss(&net, &batch, params).unwrap());
        for _ in 0..50 {
            let mut b = batch.clone();
            for i in 0..n {
                for v in b.row_mut(i) {
                    *v += rng.gen_range(-1.0..=1.0) * eps;
                }
            }
            prop_assert!(combined_loss(&net, &b, params).unwrap() <= bound);
        }
        let adv = pgd_perturb(&net, &batch, eps, 10, params, StepRule::Sign).unwrap().batch;
        prop_assert!(combined_loss(&net, &adv, params).unwrap() <= bound);
    }

    #[test]
    fn sawar_interpolates_clean_and_certified(seed in any::<u64>(), kappa in 0.0f64..=1.0, eps in 0.0f64..0.5) {
        let Case { net, batch, .. } = case(seed, 2, 4, 4);
        let params = LossParams::for_batch_size(4);
        let clean = combined_loss(&net, &batch, params).unwrap();
        let l = sawar_loss(&net, &batch, eps, kappa, params).unwrap();
        prop_assert!(l.total >= clean - 1e-9 * clean.abs().max(1.0));
        prop_assert_eq!(sawar_loss(&net, &batch, 0.0, kappa, params).unwrap().total, clean);
    }

    #[test]
    fn perturbations_stay_in_ball(seed in any::<u64>(), eps in 0.0f64..1.0, steps in 1usize..8) {
        let Case { net, batch, .. } = case(seed, 3, 5, 5);
        let params = LossParams::for_batch_size(5);
        for rule in [StepRule::Raw, StepRule::Sign] {
            prop_assert!(in_ball(&batch, &fgsm_perturb(&net, &batch, eps, params, rule).unwrap().batch, eps));
            prop_assert!(in_ball(&batch, &pgd_perturb(&net, &batch, eps, steps, params, rule).unwrap().batch, eps));
        }
        prop_assert!(in_ball(&batch, &noise_perturb(&batch, eps, seed).unwrap(), eps));
    }
}
