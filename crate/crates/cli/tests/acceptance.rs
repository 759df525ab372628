use bsdelab::suite::{self, SuiteParams};

/// The full battery: criteria 1 to 8, then the reproducibility check
/// across two runs on one thread and one run on four.
#[test]
fn acceptance() {
    let report = suite::run_full(&SuiteParams::default(), &[1, 4]).expect("suite runs");
    for c in &report.criteria {
        println!("{}", c.line());
    }
    assert_eq!(report.criteria.len(), 9);
    let failed: Vec<u32> = report.criteria.iter().filter(|c| !(c.pass && c.within_runtime())).map(|c| c.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
