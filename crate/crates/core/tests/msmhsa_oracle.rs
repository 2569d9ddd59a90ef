mod common;

#[test]
fn matches_brute_force_attention() {
    let cases = common::oracle_cases();
    assert!(cases.len() >= 20);
    for c in cases {
        assert!(
            c.max_abs_diff < 1e-6,
            "T={} scales={:?}: {}",
            c.frames,
            c.scales,
            c.max_abs_diff
        );
    }
}
