use fsayolo_tensor::gradcheck::op_suite;

#[test]
fn every_op_matches_central_differences() {
    for seed in [0, 1] {
        let reports = op_suite(seed).unwrap();
        assert!(reports.len() > 25);
        for r in &reports {
            println!("{r}");
        }
        let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
        assert!(failed.is_empty(), "failed: {failed:#?}");
    }
}
