//! Library results against straightforward loop implementations.

mod common;

use common::oracle;

#[test]
fn relation_matrix() {
    oracle::check_relation_matrix().unwrap();
}

#[test]
fn mutual_pair_loss() {
    oracle::check_mutual_pair_loss().unwrap();
}

#[test]
fn mutual_loss() {
    oracle::check_mutual_loss().unwrap();
}

#[test]
fn total_loss() {
    oracle::check_total_loss().unwrap();
}

#[test]
fn recall_at_k() {
    oracle::check_recall_at_k().unwrap();
}

#[test]
fn all_pairs_sampling() {
    oracle::check_all_pairs().unwrap();
}
