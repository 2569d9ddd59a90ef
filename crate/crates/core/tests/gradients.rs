mod common;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut failures = Vec::new();
    let cases = common::primitive_cases();
    for (name, inputs, op) in cases {
        let report = common::check_op(inputs, name.len() as u64, op);
        if !(report.max_rel_err < 1e-4) {
            failures.push(format!("{name}: {report:?}"));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn whole_model_matches_finite_differences() {
    let report = common::end_to_end_check();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
    assert!(report.checked > 2000);
}
