mod common;

use common::{check, grad_cases, FD_POINTS, FD_REL_TOL};

#[test]
fn every_operation_matches_central_differences() {
    let mut failures = Vec::new();
    for (i, case) in grad_cases().iter().enumerate() {
        let r = check(case, 100 + i as u64);
        println!("{:<24} points {:>3}  worst rel err {:.2e}", r.name, r.points, r.worst);
        assert!(r.points >= FD_POINTS.min(10), "{}: only {} points", r.name, r.points);
        if r.worst >= FD_REL_TOL {
            failures.push(format!("{}: rel err {:.3e}", r.name, r.worst));
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn gradient_cases_are_distinct() {
    let cases = grad_cases();
    let mut names: Vec<&str> = cases.iter().map(|c| c.name).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), cases.len());
}

#[test]
fn harness_flags_a_blocked_gradient() {
    let mut r = common::rng(3);
    let case = common::GradCase {
        name: "stop_gradient",
        inputs: vec![common::uniform(&mut r, &[2, 3], -1.0, 1.0)],
        build: Box::new(|t, v| Ok(t.stop_gradient(v[0]))),
    };
    assert!(check(&case, 1).worst > 0.5);
}
