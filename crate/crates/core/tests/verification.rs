use grformer::verification::{run_suite, Mutation, Suite};

#[test]
fn all_suites_pass() {
    let start = std::time::Instant::now();
    let reports = run_suite(Suite::All, 0, None).unwrap();
    for r in &reports {
        println!("{r}");
    }
    println!("elapsed {:?}", start.elapsed());
    assert!(reports.iter().all(|r| r.pass));
}

#[test]
fn residual_mutation_is_caught_by_gradcheck_only() {
    let qk = run_suite(Suite::QkEquivalence, 1, Some(Mutation::GrlResidual)).unwrap();
    assert!(qk.iter().all(|r| r.pass));
    let grad = run_suite(Suite::Gradcheck, 1, Some(Mutation::GrlResidual)).unwrap();
    let failing: Vec<_> = grad.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    assert_eq!(failing, ["gradcheck grl"]);
}
