use zsbc_core::gradcheck::{self, GradcheckOptions, OPS};

#[test]
fn all_registered_ops_pass_once_each() {
    for seed in [0, 17] {
        let report = gradcheck::run_all(&GradcheckOptions {
            seed,
            ..Default::default()
        })
        .unwrap();
        let names: Vec<&str> = report.iter().map(|o| o.op.as_str()).collect();
        assert_eq!(names, OPS);
        for o in &report {
            assert!(o.passed, "{} max error {:e}", o.op, o.max_error);
            assert!(o.checked > o.skipped);
        }
    }
}

#[test]
fn injected_gradient_error_is_caught() {
    let opts = GradcheckOptions {
        corrupt: Some("end_to_end".into()),
        ..Default::default()
    };
    let report = gradcheck::run_all(&opts).unwrap();
    let failed: Vec<&str> = report
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.op.as_str())
        .collect();
    assert_eq!(failed, ["end_to_end"]);
}
