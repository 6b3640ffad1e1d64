mod common;

#[test]
fn factorized_matches_enumeration() {
    for seed in 0..300 {
        common::elbo_oracle_case(seed).unwrap();
    }
}
