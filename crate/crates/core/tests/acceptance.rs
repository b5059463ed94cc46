//! Full acceptance suite, one line per criterion.

use trajlab::acceptance::{run_suite, SuiteConfig};

#[test]
fn acceptance_criteria() {
    let cfg = SuiteConfig::default();
    let report = run_suite(&cfg, &[], |o| println!("{}", o.line())).unwrap();
    println!("total {:.1} s", report.total_secs);
    assert!(
        report.all_passed(),
        "failed criteria: {:?}",
        report.failed()
    );
}
