mod common;

use common::{finite_difference, max_relative_error, random_case, reference_total};
use predbias::contrastive::loss_and_gradient;
use predbias::{EncoderParams, TrainConfig};

#[test]
fn reference_and_library_totals_agree() {
    let config = TrainConfig::default();
    for seed in 0..5 {
        let case = random_case(seed, 8, 6, 3);
        let params = EncoderParams::new(case.weight.clone()).unwrap();
        let eval = loss_and_gradient(&params, case.base.view(), &case.predicates, &case.confusion, &config).unwrap();
        let oracle = reference_total(&case.weight, &case.base, &case.predicates, &case.confusion, &config);
        assert!(
            (eval.breakdown.total - oracle).abs() < 1e-10 * oracle.abs().max(1.0),
            "{} vs {oracle}",
            eval.breakdown.total
        );
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let config = TrainConfig::default();
    for seed in 100..105 {
        let case = random_case(seed, 8, 6, 3);
        let params = EncoderParams::new(case.weight.clone()).unwrap();
        let eval = loss_and_gradient(&params, case.base.view(), &case.predicates, &case.confusion, &config).unwrap();
        let numeric = finite_difference(&case.weight, 1e-5, |w| {
            reference_total(w, &case.base, &case.predicates, &case.confusion, &config)
        });
        let err = max_relative_error(&eval.gradient, &numeric, 1e-6);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}
