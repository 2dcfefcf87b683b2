use ifgmi_core::gradcheck::{primitive_suite, run_case};

#[test]
fn every_primitive_matches_central_differences() {
    let mut failures = Vec::new();
    for case in primitive_suite() {
        let worst = run_case(&case, 20, 1e-4, 11).unwrap();
        if !(worst < 1e-5) {
            failures.push(format!("{}: {:.3e}", case.name, worst));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn oracle_detects_a_wrong_gradient() {
    use ifgmi_core::gradcheck::{numeric, relative_error};
    use ifgmi_core::Tensor;
    // d/dx sum(x^3) = 3x^2; compare the oracle against a deliberately wrong 2x^2
    let x = Tensor::<f64>::from_fn(&[4], |i| 0.5 + i as f64);
    let n = numeric(&[x.clone()], 1e-4, &|_: &_, v: &[_]| {
        let v: &[ifgmi_core::Var<f64>] = v;
        Ok(v[0].square().mul(v[0])?.sum())
    })
    .unwrap();
    let right = x.map(|v| 3.0 * v * v);
    let wrong = x.map(|v| 2.0 * v * v);
    assert!(relative_error(&right, &n[0]) < 1e-8);
    assert!(relative_error(&wrong, &n[0]) > 0.1);
}
