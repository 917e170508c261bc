mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use zlss::model::{
    backward, calibrated_labels, forward_backbone, infer_gzs, project_probs, score_image, sgd_step, ClassGrid, Gradients,
    OptimizerState, SgdConfig,
};
use zlss::LabelMask;

use common::{max_gradient_error, random_instance, reference_loss};

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..40 {
        let inst = random_instance(&mut rng);
        let err = max_gradient_error(&inst, 1e-5);
        assert!(err < 1e-4, "case {case}: relative error {err:e}");
    }
}

#[test]
fn fused_loss_matches_reference_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..40 {
        let inst = random_instance(&mut rng);
        let (loss, _) = backward(&inst.image, &inst.params, &inst.table, &inst.objective, &inst.y, &inst.ybar).unwrap();
        let reference = reference_loss(&inst, &inst.params);
        assert!((loss.total() - reference).abs() <= 1e-10 * reference.abs().max(1.0));
    }
}

#[test]
fn unlabeled_pixels_contribute_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let inst = random_instance(&mut rng);
        let (h, w) = inst.image.size();
        let zeros = LabelMask::zeros(h, w);
        let (loss, grads) = backward(&inst.image, &inst.params, &inst.table, &inst.objective, &zeros, &zeros).unwrap();
        assert_eq!(loss.total(), 0.0);
        assert!(grads.is_zero());
    }
}

#[test]
fn duplicating_an_image_doubles_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let inst = random_instance(&mut rng);
    let (_, g) = backward(&inst.image, &inst.params, &inst.table, &inst.objective, &inst.y, &inst.ybar).unwrap();
    let mut twice: Gradients = g.clone();
    twice.add_assign(&g);
    for (a, b) in twice.iter().zip(g.iter()) {
        assert_eq!(a, 2.0 * b);
    }
}

#[test]
fn perturbing_unlabeled_pixels_leaves_gradients_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    for _ in 0..50 {
        let inst = random_instance(&mut rng);
        if inst.params.window() != 1 {
            continue;
        }
        let (_, before) = backward(&inst.image, &inst.params, &inst.table, &inst.objective, &inst.y, &inst.ybar).unwrap();
        let mut image = inst.image.clone();
        let (h, w) = image.size();
        for n in 0..h {
            for m in 0..w {
                if inst.y.get(n, m) == 0 && inst.ybar.get(n, m) == 0 {
                    image.pixel_mut(n, m).iter_mut().for_each(|v| *v += 3.0);
                }
            }
        }
        let (_, after) = backward(&image, &inst.params, &inst.table, &inst.objective, &inst.y, &inst.ybar).unwrap();
        assert_eq!(before, after);
        checked += 1;
    }
    assert!(checked > 10);
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let inst = random_instance(&mut rng);
        let mut params = inst.params.clone();
        let config = SgdConfig {
            base_lr: 0.05,
            max_iter: 25,
            ..Default::default()
        };
        let mut state = OptimizerState::new(config, &params).unwrap();
        while !state.is_finished() {
            let (_, g) = backward(&inst.image, &params, &inst.table, &inst.objective, &inst.y, &inst.ybar).unwrap();
            sgd_step(&mut params, &g, &mut state).unwrap();
        }
        (params, state)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_sum_to_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        let feat = forward_backbone(&inst.image, &inst.params).unwrap();
        let probs = project_probs(&feat, &inst.table, &inst.objective.pseudo_ids).unwrap();
        let (h, w) = probs.size();
        for n in 0..h {
            for m in 0..w {
                let p = probs.pixel(n, m);
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn shifting_every_logit_keeps_the_prediction(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instance(&mut rng);
        let scores = score_image(&inst.image, &inst.params, &inst.table, inst.space.all()).unwrap();
        let shifted = ClassGrid::new(
            scores.ids().to_vec(),
            scores.height(),
            scores.width(),
            scores.as_slice().iter().map(|v| v + shift).collect(),
        )
        .unwrap();
        let a = calibrated_labels(&scores, &inst.space, 0.0).unwrap();
        let b = calibrated_labels(&shifted, &inst.space, 0.0).unwrap();
        prop_assert_eq!(&a, &b);
        let direct = infer_gzs(&inst.image, &inst.params, &inst.table, &inst.space, 0.0).unwrap();
        prop_assert_eq!(a, direct);
    }
}
