//! Word-level edit distance, WER and the query-similarity score.

use crate::corpus::NBestRecord;
use crate::error::{Error, Result};

/// Minimal-alignment edit counts of a hypothesis against a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditStats {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl EditStats {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Word error rate. An empty reference gives 0 for an empty hypothesis
    /// and 1 otherwise.
    pub fn wer(&self) -> f64 {
        if self.ref_len == 0 {
            if self.errors() == 0 {
                0.0
            } else {
                1.0
            }
        } else {
            self.errors() as f64 / self.ref_len as f64
        }
    }
}

/// Levenshtein alignment with unit costs. Among minimal alignments the
/// backtrace prefers match/substitution, then deletion, then insertion.
pub fn edit_stats<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditStats {
    let n = reference.len();
    let m = hyp.len();
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for (j, cell) in d.iter_mut().take(w).enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut stats = EditStats { ref_len: n, ..EditStats::default() };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                if !same {
                    stats.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            stats.deletions += 1;
            i -= 1;
        } else {
            stats.insertions += 1;
            j -= 1;
        }
    }
    stats
}

/// Uncapped word error rate of `hyp` against `reference`.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    edit_stats(hyp, reference).wer()
}

/// `(1 - min(wer, 1))^2`, in `[0, 1]`.
pub fn similarity_from_wer(wer: f64) -> f64 {
    let capped = wer.clamp(0.0, 1.0);
    (1.0 - capped) * (1.0 - capped)
}

pub fn query_similarity<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    similarity_from_wer(wer(hyp, reference))
}

/// Accumulates errors and reference words across a corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WerAccumulator {
    pub errors: usize,
    pub ref_words: usize,
    pub sentences: usize,
}

impl WerAccumulator {
    pub fn add(&mut self, stats: &EditStats) {
        self.errors += stats.errors();
        self.ref_words += stats.ref_len;
        self.sentences += 1;
    }

    pub fn merge(&mut self, other: &WerAccumulator) {
        self.errors += other.errors;
        self.ref_words += other.ref_words;
        self.sentences += other.sentences;
    }

    pub fn wer(&self) -> f64 {
        if self.ref_words == 0 {
            if self.errors == 0 {
                0.0
            } else {
                1.0
            }
        } else {
            self.errors as f64 / self.ref_words as f64
        }
    }
}

/// Total errors over total reference words.
pub fn corpus_wer<T: PartialEq, H: AsRef<[T]>, R: AsRef<[T]>>(pairs: &[(H, R)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("corpus_wer needs at least one pair".into()));
    }
    let mut acc = WerAccumulator::default();
    for (h, r) in pairs {
        acc.add(&edit_stats(h.as_ref(), r.as_ref()));
    }
    Ok(acc.wer())
}

/// Edit stats of the lowest-error hypothesis in one record.
pub fn oracle_stats(record: &NBestRecord) -> EditStats {
    record.hypotheses.iter().map(|h| edit_stats(&h.words, &record.reference)).min_by_key(|s| s.errors()).unwrap_or(
        EditStats { deletions: record.reference.len(), ref_len: record.reference.len(), ..EditStats::default() },
    )
}

/// Corpus-level oracle WER: best hypothesis per record, pooled.
pub fn oracle_wer(records: &[NBestRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("oracle_wer needs at least one record".into()));
    }
    let mut acc = WerAccumulator::default();
    for r in records {
        acc.add(&oracle_stats(r));
    }
    Ok(acc.wer())
}

/// Corpus WER of the hypothesis at `pick(record)` in each record.
pub fn selection_wer<F>(records: &[NBestRecord], mut pick: F) -> Result<f64>
where
    F: FnMut(&NBestRecord) -> usize,
{
    if records.is_empty() {
        return Err(Error::Input("selection_wer needs at least one record".into()));
    }
    let mut acc = WerAccumulator::default();
    for r in records {
        let i = pick(r);
        let hyp = r
            .hypotheses
            .get(i)
            .ok_or_else(|| Error::Input(format!("selected index {i} out of range in {}", r.query_id)))?;
        acc.add(&edit_stats(&hyp.words, &r.reference));
    }
    Ok(acc.wer())
}

/// Splits on whitespace into owned words.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        words(s)
    }

    /// Exhaustive recursive edit distance, no memoisation.
    fn brute_distance(a: &[u8], b: &[u8]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = brute_distance(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = brute_distance(&a[1..], b) + 1;
        let ins = brute_distance(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn identical_has_no_errors() {
        let s = edit_stats(&w("play yesterday by the beatles"), &w("play yesterday by the beatles"));
        assert_eq!(s.errors(), 0);
        assert_eq!(s.ref_len, 5);
    }

    #[test]
    fn single_substitution() {
        let s = edit_stats(&w("a x c"), &w("a b c"));
        assert_eq!((s.substitutions, s.insertions, s.deletions), (1, 0, 0));
        assert!((wer(&w("a x c"), &w("a b c")) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn uncapped_wer_above_one() {
        let s = edit_stats(&w("x y z"), &w("a"));
        assert_eq!((s.substitutions, s.insertions, s.deletions), (1, 2, 0));
        assert_eq!(s.wer(), 3.0);
    }

    #[test]
    fn empty_reference_convention() {
        let empty: Vec<String> = vec![];
        assert_eq!(wer(&empty, &empty), 0.0);
        assert_eq!(wer(&w("a"), &empty), 1.0);
        assert_eq!(wer(&empty, &w("a b")), 1.0);
    }

    #[test]
    fn similarity_values() {
        assert_eq!(similarity_from_wer(0.0), 1.0);
        assert_eq!(similarity_from_wer(0.5), 0.25);
        assert_eq!(similarity_from_wer(2.0), 0.0);
        assert_eq!(query_similarity(&w("x y z"), &w("a")), 0.0);
    }

    #[test]
    fn corpus_wer_pools_counts() {
        let pairs = vec![(w("a x c"), w("a b c")), (w("d"), w("d"))];
        assert!((corpus_wer(&pairs).unwrap() - 0.25).abs() < 1e-15);
        let single = vec![(w("a x c"), w("a b c"))];
        assert!((corpus_wer(&single).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let none: Vec<(Vec<String>, Vec<String>)> = vec![];
        assert!(corpus_wer(&none).is_err());
    }

    proptest! {
        #[test]
        fn dp_matches_brute_force(a in prop::collection::vec(0u8..3, 0..=8), b in prop::collection::vec(0u8..3, 0..=8)) {
            let s = edit_stats(&a, &b);
            prop_assert_eq!(s.errors(), brute_distance(&b, &a));
            prop_assert_eq!(s.ref_len, b.len());
            // S + D covers every reference word, S + I every hypothesis word.
            prop_assert!(s.substitutions + s.deletions <= b.len());
            prop_assert_eq!(b.len() - s.deletions + s.insertions, a.len());
        }

        #[test]
        fn substitution_only_is_symmetric(a in prop::collection::vec(0u8..3, 1..=8), seed in 0u64..1000) {
            let b: Vec<u8> = a.iter().enumerate().map(|(i, x)| if (seed >> (i % 10)) & 1 == 1 { (x + 1) % 3 } else { *x }).collect();
            prop_assert_eq!(edit_stats(&a, &b).errors(), edit_stats(&b, &a).errors());
        }

        #[test]
        fn triangle_inequality(a in prop::collection::vec(0u8..3, 0..=8), b in prop::collection::vec(0u8..3, 0..=8), c in prop::collection::vec(0u8..3, 0..=8)) {
            let ab = edit_stats(&a, &b).errors();
            let bc = edit_stats(&b, &c).errors();
            let ac = edit_stats(&a, &c).errors();
            prop_assert!(ac <= ab + bc);
        }

        #[test]
        fn similarity_monotone_in_wer(x in 0.0f64..3.0, y in 0.0f64..3.0) {
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(similarity_from_wer(lo) >= similarity_from_wer(hi));
            prop_assert!((0.0..=1.0).contains(&similarity_from_wer(x)));
        }
    }
}
