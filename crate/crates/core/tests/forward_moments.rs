//! Empirical moments of the forward process against `(alpha_t x0, sigma_t^2)`.

#[path = "support/moments.rs"]
mod moments;

#[test]
fn perturbation_matches_marginal_moments() {
    let rep = moments::marginals();
    assert!(rep.failures.is_empty(), "{:#?}", rep.failures);
    assert_eq!(rep.checks, 30);
}

#[test]
fn discrete_chain_composes_to_the_marginal() {
    let rep = moments::discrete_chain();
    assert!(rep.failures.is_empty(), "{:#?}", rep.failures);
}
