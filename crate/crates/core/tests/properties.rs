mod support;

use support::props::ALL;

fn run(name: &str) {
    ALL.iter().find(|(n, _)| *n == name).expect("registered property").1()
}

macro_rules! properties {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                run(stringify!($name));
            }
        )*

        #[test]
        fn every_property_has_a_test() {
            let listed = [$(stringify!($name)),*];
            assert_eq!(listed.len(), ALL.len());
        }
    };
}

properties!(
    h1_scales_every_reading_by_one_alpha,
    h2_factors_stay_within_bounds,
    h3_zeroes_exactly_the_interval,
    h4_is_constant_at_the_mean,
    h5_scales_the_mean_within_bounds,
    h6_is_an_involution_preserving_values,
    clip_is_idempotent_and_nonnegative,
    fgsm_changes_each_coordinate_by_zero_or_epsilon,
    fgv_changes_each_coordinate_by_epsilon_times_gradient,
    ssf_step_has_infinity_norm_size,
    ssf_iterates_move_at_most_size_per_step,
    deepfool_leaves_normal_inputs_untouched,
    deepfool_success_means_classified_normal,
    attack_outputs_are_feasible_and_deterministic,
    fgsm_moves_coordinates_by_epsilon_or_to_zero,
    softmax_rows_are_distributions,
    unit_temperature_is_the_plain_softmax,
    recall_and_bypass_sum_to_one,
    classifier_metric_identities,
    split_is_a_disjoint_partition,
    polluted_counts_follow_the_fraction,
    va1_is_linear_in_alpha,
    va2_mean_l1_matches_uniform_expectation,
);
