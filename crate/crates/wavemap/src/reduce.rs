// Deterministic pairwise summation. The split points depend only on the
// length of the input, so the result is identical whatever the thread count.

use crate::Scalar;

const LEAF: usize = 256;

pub fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    if xs.len() <= LEAF {
        let mut s = T::zero();
        for x in xs {
            s = s + *x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    let (l, r) = xs.split_at(mid);
    if xs.len() > 1 << 14 {
        let (a, b) = rayon::join(|| pairwise_sum(l), || pairwise_sum(r));
        a + b
    } else {
        pairwise_sum(l) + pairwise_sum(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_on_integers() {
        let xs: Vec<f64> = (0..100_000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 4_999_950_000.0);
    }
}
