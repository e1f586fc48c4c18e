use rakekit_demo::{race, rake, rake_table, sensitivity};

const TABLE: &str =
    "a,b,value,weights\n1,1,2,1\n1,2,1,1\n2,1,0,0\n2,2,5,1\n1,0,3,inf\n2,0,5,inf\n0,1,2,inf\n0,2,6,inf\n";

const FULL: &str =
    "a,b,value,weights\n1,1,1.1,1\n1,2,2.3,1\n2,1,2.9,1\n2,2,4.2,1\n1,0,3,inf\n2,0,7,inf\n0,1,4,inf\n0,2,6,inf\n";

#[test]
fn rake_recovers_the_missing_cell() {
    let r = rake(TABLE, "a,b", "entropic", 0.0, 1.0).unwrap();
    assert_eq!(r.shape, vec![2, 2]);
    let raked: Vec<f64> = r.cells.iter().map(|c| c.raked).collect();
    for (got, want) in raked.iter().zip([2.0, 1.0, 0.0, 5.0]) {
        assert!((got - want).abs() < 1e-8, "{raked:?}");
    }
    assert_eq!(r.cells[2].input, None);
    assert_eq!(r.cells[0].label, "1:1");
}

#[test]
fn rake_meets_margins_for_every_loss() {
    for loss in ["chi2", "entropic", "logistic"] {
        let r = rake(FULL, "a,b", loss, 0.5, 5.0).unwrap();
        let b: Vec<f64> = r.cells.iter().map(|c| c.raked).collect();
        assert!((b[0] + b[1] - 3.0).abs() < 1e-8 && (b[1] + b[3] - 6.0).abs() < 1e-8, "{loss}: {b:?}");
    }
}

#[test]
fn bad_input_is_an_error_string() {
    assert!(rake(FULL, "a,b", "quadratic", 0.0, 1.0).is_err());
    assert!(rake(FULL, "", "chi2", 0.0, 1.0).is_err());
    assert!(rake("a,b\n1,2\n", "a,b", "chi2", 0.0, 1.0).is_err());
    assert!(race(1, 5, 1.0, 0).is_err());
    assert!(sensitivity(FULL, "a,b", "chi2", 0.0, 1.0, 1.0, 4).is_err());
    assert!(sensitivity(TABLE, "a,b", "chi2", 0.0, 1.0, 1.0, 0).is_err());
}

#[test]
fn race_reaches_tolerance_with_both_solvers() {
    let r = race(12, 8, 1.0, 3).unwrap();
    for trace in [&r.ipf, &r.newton] {
        assert!(!trace.is_empty());
        assert!(trace.last().unwrap().max_violation < 1e-8);
        assert!(trace.windows(2).all(|w| w[0].matvecs <= w[1].matvecs));
    }
}

#[test]
fn sensitivity_respects_the_margins() {
    let r = sensitivity(FULL, "a,b", "entropic", 0.0, 1.0, 0.04, 0).unwrap();
    // cell 0 shares a row with cell 1 and a column with cell 2
    let inf = &r.influence;
    assert!(inf[0] > 0.0 && inf[1] < 0.0 && inf[2] < 0.0 && inf[3] > 0.0, "{inf:?}");
    // with both margins of a 2x2 table fixed, one cell determines the rest
    assert!(r.sd.iter().all(|&s| (s - r.sd[0]).abs() < 1e-10), "{:?}", r.sd);
    assert!(r.sd[0] < r.input_sd);
}

#[test]
fn exports_return_json() {
    let text = rake_table(FULL, "a,b", "chi2", 0.0, 1.0).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["path"], "chi2_closed_form");
    assert_eq!(v["cells"].as_array().unwrap().len(), 4);
}

#[test]
fn logistic_sensitivity_uses_the_given_bounds() {
    let r = sensitivity(FULL, "a,b", "logistic", 0.5, 5.0, 0.04, 3).unwrap();
    assert!(r.sd.iter().all(|s| s.is_finite()));
    assert!(sensitivity(FULL, "a,b", "logistic", 0.0, 1.0, 0.04, 3).is_err());
}
