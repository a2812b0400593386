use fsayolo::gradcheck::{loss_suite, module_suite};

#[test]
fn network_blocks_match_finite_differences() {
    let reports = module_suite(11).unwrap();
    for r in &reports {
        println!("{r}");
    }
    assert!(reports.iter().all(|r| r.passed()));
}

#[test]
fn loss_terms_match_finite_differences() {
    let reports = loss_suite(12).unwrap();
    for r in &reports {
        println!("{r}");
    }
    assert!(reports.iter().all(|r| r.passed() && r.checked > 0));
}
