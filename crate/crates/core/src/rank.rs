use std::cmp::Ordering;

use crate::scalar::Scalar;

/// Descending by score, ascending by key on ties. Scores must be finite.
pub fn by_score_then_key<K: Ord, T: Scalar>(a: &(K, T), b: &(K, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// The `k` best entries under [`by_score_then_key`], sorted.
pub fn top_k<K: Ord, T: Scalar>(mut entries: Vec<(K, T)>, k: usize) -> Vec<(K, T)> {
    if k == 0 {
        return Vec::new();
    }
    if entries.len() > k {
        entries.select_nth_unstable_by(k - 1, by_score_then_key);
        entries.truncate(k);
    }
    entries.sort_by(by_score_then_key);
    entries
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_by_key() {
        let v = vec![("b", 1.0), ("a", 1.0), ("c", 2.0), ("d", 0.5)];
        assert_eq!(top_k(v.clone(), 2), vec![("c", 2.0), ("a", 1.0)]);
        assert_eq!(top_k(v, 10).len(), 4);
    }
}
