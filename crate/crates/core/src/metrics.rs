//! Sequence-level evaluation metrics over content tokens (EOS stripped).

use crate::vocab::{Token, TokenSeq};

pub fn levenshtein(a: &[Token], b: &[Token]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ta) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &tb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ta != tb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalized by the longer of the two sequences, so the
/// result lies in `[0, 1]`.
pub fn token_error_rate(reference: &TokenSeq, hypothesis: &TokenSeq) -> f64 {
    let (r, h) = (reference.content(), hypothesis.content());
    let denom = r.len().max(h.len());
    if denom == 0 {
        return 0.0;
    }
    levenshtein(r, h) as f64 / denom as f64
}

/// Corpus-level accumulator: total edits over total normalizer.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorTally {
    pub edits: usize,
    pub length: usize,
    pub exact: usize,
    pub count: usize,
}

impl ErrorTally {
    pub fn add(&mut self, reference: &TokenSeq, hypothesis: &TokenSeq) {
        let (r, h) = (reference.content(), hypothesis.content());
        self.edits += levenshtein(r, h);
        self.length += r.len().max(h.len());
        self.exact += usize::from(r == h);
        self.count += 1;
    }

    pub fn token_error_rate(&self) -> f64 {
        if self.length == 0 {
            0.0
        } else {
            self.edits as f64 / self.length as f64
        }
    }

    pub fn exact_match(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.exact as f64 / self.count as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_distances() {
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein(&[], &[1, 2]), 2);
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(levenshtein(&[1, 2, 3], &[3, 2, 1]), 2);
    }

    #[test]
    fn error_rate_ignores_eos() {
        let r = TokenSeq::terminated(&[1, 2, 3, 4]);
        let h = TokenSeq::new(vec![1, 2, 5, 4]);
        assert_eq!(token_error_rate(&r, &h), 0.25);
        let mut t = ErrorTally::default();
        t.add(&r, &h);
        t.add(&r, &r);
        assert_eq!(t.token_error_rate(), 1.0 / 8.0);
        assert_eq!(t.exact_match(), 0.5);
    }

    proptest! {
        #[test]
        fn metric_axioms(a in proptest::collection::vec(1u32..5, 0..7), b in proptest::collection::vec(1u32..5, 0..7), c in proptest::collection::vec(1u32..5, 0..7)) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
            prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
            let ter = token_error_rate(&TokenSeq::new(a), &TokenSeq::new(b));
            prop_assert!((0.0..=1.0).contains(&ter));
        }
    }
}
