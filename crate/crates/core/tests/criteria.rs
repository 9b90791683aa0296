mod common;

use voxvote::harness::FeatureMode;

#[test]
fn voting_matches_dense_on_seeded_cases() {
    let c = common::voting_equals_dense(30);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn finite_differences_agree_for_both_stacks() {
    let c = common::gradients(5);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn metrics_match_brute_force_oracles() {
    let c = common::metric_oracles();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn fpfh_is_rigid_invariant() {
    let c = common::fpfh_rigid_invariance();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let c = common::determinism();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn dataset_adapter_and_external_features_round_trip() {
    let c = common::external_inputs();
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn small_pipeline_separates_defects_with_3d_features() {
    let out = voxvote::harness::run_pipeline(
        &common::small_config(FeatureMode::F3d),
        &common::small_suite(),
    )
    .unwrap();
    assert!(
        out.report.mean_i_roc.unwrap() >= 0.8,
        "{}",
        out.report.to_json()
    );
}
