use nri_core::gradsuite::{run_suite, PRIMITIVES};

#[test]
fn every_check_passes() {
    let results = run_suite(None).unwrap();
    for r in &results {
        println!(
            "{:<34} {:>10.3e}  worst {} {:?} of {}",
            r.name, r.max_rel_error, r.worst, r.worst_values, r.checked
        );
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "{failed:?}");
}

#[test]
fn corrupted_rule_is_caught() {
    let results = run_suite(Some("tanh")).unwrap();
    assert!(results.iter().any(|r| r.name == "tanh" && !r.passed()));
    assert!(results.iter().any(|r| r.name == "linear" && r.passed()));
    assert!(PRIMITIVES.contains(&"tanh"));
}
