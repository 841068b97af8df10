use grokking_core::diagnostics::{detect_transition_series, f_ll, f_ll_inv};
use grokking_core::rng::seeded;
use grokking_core::{HomogeneousModel, ParamVector};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn models() -> Vec<HomogeneousModel> {
    vec![
        HomogeneousModel::two_layer_relu(5, 7).unwrap(),
        HomogeneousModel::diagonal(6).unwrap(),
        HomogeneousModel::factorization(4).unwrap(),
    ]
}

fn random_theta(model: &HomogeneousModel, seed: u64) -> ParamVector {
    let mut rng = seeded(seed);
    let data = (0..model.param_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
    model.params(data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_are_two_homogeneous(seed in 0u64..10_000, c in 0.05f64..20.0) {
        for model in models() {
            let theta = random_theta(&model, seed);
            let x = model.random_input(&mut seeded(seed ^ 0xabc));
            let f = model.forward(&theta, &x).unwrap();
            let fc = model.forward(&theta.scaled(c), &x).unwrap();
            for (a, b) in f.iter().zip(&fc) {
                prop_assert!((b - c * c * a).abs() <= 1e-9 * (1.0 + (c * c * a).abs()));
            }
        }
    }

    #[test]
    fn gradients_match_directional_differences(seed in 0u64..10_000) {
        for model in models() {
            let theta = random_theta(&model, seed);
            let dir = random_theta(&model, seed + 1);
            let x = model.random_input(&mut seeded(seed ^ 0x55));
            let g = model.grad(&theta, &x, 0).unwrap();
            let eps = 1e-6;
            let plus = model.params(theta.data.iter().zip(&dir.data).map(|(a, d)| a + eps * d).collect()).unwrap();
            let minus = model.params(theta.data.iter().zip(&dir.data).map(|(a, d)| a - eps * d).collect()).unwrap();
            let fd = (model.forward(&plus, &x).unwrap()[0] - model.forward(&minus, &x).unwrap()[0]) / (2.0 * eps);
            let analytic = g.dot(&dir);
            prop_assert!((fd - analytic).abs() <= 1e-5 * (1.0 + analytic.abs()), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn f_ll_inverse_round_trips(log_x in 0.0f64..13.8) {
        let x = log_x.exp();
        let back = f_ll_inv(f_ll(x).unwrap()).unwrap();
        prop_assert!((back - x).abs() <= 1e-10 * x);
    }

    #[test]
    fn step_series_transition_sits_at_the_jump(jump in 1usize..40) {
        let series: Vec<(f64, f64)> = (0..50).map(|i| (1.0 + i as f64, if i < jump { 0.5 } else { 1.0 })).collect();
        let tr = detect_transition_series(&series, 0.55, 0.95).unwrap();
        prop_assert_eq!(tr.t_star, 1.0 + jump as f64);
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    for model in models() {
        let x = model.random_input(&mut seeded(1));
        assert!(model.forward(&model.zeros(), &x).unwrap().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn unit_init_has_zero_output_and_scales_with_alpha() {
    for model in models() {
        let a = model.make_init(1.0, 0.0, 3).unwrap();
        let b = model.make_init(8.0, 0.0, 3).unwrap();
        assert!((b.norm() - 8.0 * a.norm()).abs() < 1e-12 * b.norm());
        let x = model.random_input(&mut seeded(2));
        assert!(model.forward(&b, &x).unwrap().iter().all(|v| v.abs() < 1e-9));
    }
}
