//! Evaluation metrics: pronoun recovery P/R/F and discourse arc/relation
//! micro-averaged F.
//!
//! Pronoun recovery follows the usual convention that "None" is not a
//! positive: a true positive is a token whose predicted and gold label agree
//! and are not "None". Discourse scoring is attachment accuracy pooled over
//! all dependents; a relation counts only when the head also matches, and
//! root arcs carry the forced pseudo-relation Root on both sides, so
//! relation F can never exceed arc F.

use crate::corpus::NONE_LABEL;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DprCounts {
    pub true_positive: usize,
    pub predicted_non_none: usize,
    pub gold_non_none: usize,
}

impl DprCounts {
    pub fn merge(&mut self, other: DprCounts) {
        self.true_positive += other.true_positive;
        self.predicted_non_none += other.predicted_non_none;
        self.gold_non_none += other.gold_non_none;
    }

    /// (precision, recall, F); 0/0 ratios collapse to 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let p = ratio(self.true_positive, self.predicted_non_none);
        let r = ratio(self.true_positive, self.gold_non_none);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CdpCounts {
    pub arcs_correct: usize,
    pub rels_correct: usize,
    pub total_dependents: usize,
}

impl CdpCounts {
    pub fn merge(&mut self, other: CdpCounts) {
        self.arcs_correct += other.arcs_correct;
        self.rels_correct += other.rels_correct;
        self.total_dependents += other.total_dependents;
    }

    /// (arc F, relation F). With exactly one predicted and one gold head per
    /// dependent, micro precision, recall, and F all equal accuracy.
    pub fn arc_rel_f(&self) -> (f64, f64) {
        if self.total_dependents == 0 {
            return (0.0, 0.0);
        }
        let n = self.total_dependents as f64;
        (self.arcs_correct as f64 / n, self.rels_correct as f64 / n)
    }
}

/// Count one aligned label sequence (any string type).
pub fn dpr_counts<S: AsRef<str>, G: AsRef<str>>(pred: &[S], gold: &[G]) -> Result<DprCounts> {
    if pred.len() != gold.len() {
        return Err(Error::config(format!(
            "dpr metrics: {} predictions vs {} gold labels",
            pred.len(),
            gold.len()
        )));
    }
    let mut counts = DprCounts::default();
    for (p, g) in pred.iter().zip(gold) {
        let (p, g) = (p.as_ref(), g.as_ref());
        if p != NONE_LABEL {
            counts.predicted_non_none += 1;
        }
        if g != NONE_LABEL {
            counts.gold_non_none += 1;
            if p == g {
                counts.true_positive += 1;
            }
        }
    }
    Ok(counts)
}

/// Count one snippet's dependents. Heads are utterance indices (0 = root);
/// relations are label strings, Root expected exactly on root arcs.
pub fn cdp_counts<S: AsRef<str>, G: AsRef<str>>(
    pred_heads: &[usize],
    pred_rels: &[S],
    gold_heads: &[usize],
    gold_rels: &[G],
) -> Result<CdpCounts> {
    if pred_heads.len() != gold_heads.len()
        || pred_rels.len() != pred_heads.len()
        || gold_rels.len() != gold_heads.len()
    {
        return Err(Error::config("cdp metrics: misaligned prediction/gold lengths"));
    }
    let mut counts = CdpCounts {
        total_dependents: gold_heads.len(),
        ..Default::default()
    };
    for j in 0..gold_heads.len() {
        if pred_heads[j] == gold_heads[j] {
            counts.arcs_correct += 1;
            if pred_rels[j].as_ref() == gold_rels[j].as_ref() {
                counts.rels_correct += 1;
            }
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_none_on_both_sides_scores_zero() {
        let c = dpr_counts(&["None", "None"], &["None", "None"]).unwrap();
        assert_eq!(c.prf(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_labeling_scores_one() {
        let c = dpr_counts(&["A", "None", "B"], &["A", "None", "B"]).unwrap();
        assert_eq!(c.prf(), (1.0, 1.0, 1.0));
    }

    #[test]
    fn hand_counted_dpr_example() {
        // gold = {A, None, B}, pred = {A, B, B}: tp 2, P 2/3, R 1, F 0.8.
        let c = dpr_counts(&["A", "B", "B"], &["A", "None", "B"]).unwrap();
        assert_eq!(c.true_positive, 2);
        assert_eq!(c.predicted_non_none, 3);
        assert_eq!(c.gold_non_none, 2);
        let (p, r, f) = c.prf();
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r, 1.0);
        assert!((f - 0.8).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        assert!(dpr_counts(&["A"], &["A", "B"]).is_err());
    }

    #[test]
    fn identical_graphs_score_one() {
        let c = cdp_counts(&[0, 1], &["Root", "Question"], &[0, 1], &["Root", "Question"]).unwrap();
        assert_eq!(c.arc_rel_f(), (1.0, 1.0));
    }

    #[test]
    fn correct_heads_wrong_relations() {
        let c = cdp_counts(
            &[0, 1, 1],
            &["Root", "Question", "Answer"],
            &[0, 1, 1],
            &["Root", "Answer", "Question"],
        )
        .unwrap();
        let (arc, rel) = c.arc_rel_f();
        assert_eq!(arc, 1.0);
        // The root arc still matches its forced pseudo-relation.
        assert!((rel - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hand_counted_cdp_example() {
        // 4 dependents, 3 correct heads, 2 of them with correct relations.
        let gold_heads = [0usize, 1, 2, 0];
        let gold_rels = ["Root", "Question", "Answer", "Root"];
        let pred_heads = [0usize, 1, 1, 0];
        let pred_rels = ["Root", "Feedback", "Answer", "Root"];
        let c = cdp_counts(&pred_heads, &pred_rels, &gold_heads, &gold_rels).unwrap();
        assert_eq!(c.total_dependents, 4);
        assert_eq!(c.arcs_correct, 3);
        assert_eq!(c.rels_correct, 2);
        let (arc, rel) = c.arc_rel_f();
        assert_eq!(arc, 0.75);
        assert_eq!(rel, 0.5);
    }

    #[test]
    fn rel_f_never_exceeds_arc_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rels = ["Root", "Question", "Answer", "Feedback"];
        for _ in 0..500 {
            let m = rng.gen_range(1..9usize);
            let mut counts = CdpCounts::default();
            for j in 1..=m {
                let gold_head = rng.gen_range(0..j);
                let pred_head = rng.gen_range(0..j);
                let gold_rel = if gold_head == 0 { "Root" } else { rels[rng.gen_range(1..4)] };
                let pred_rel = if pred_head == 0 { "Root" } else { rels[rng.gen_range(1..4)] };
                counts
                    .merge(cdp_counts(&[pred_head], &[pred_rel], &[gold_head], &[gold_rel]).unwrap());
            }
            let (arc, rel) = counts.arc_rel_f();
            assert!(rel <= arc + 1e-15);
            assert!(counts.rels_correct <= counts.arcs_correct);
            assert!(counts.arcs_correct <= counts.total_dependents);
        }
    }

    #[test]
    fn counts_are_order_invariant() {
        let a = dpr_counts(&["A", "None"], &["A", "B"]).unwrap();
        let b = dpr_counts(&["None", "A"], &["B", "A"]).unwrap();
        let mut m1 = DprCounts::default();
        m1.merge(a);
        m1.merge(b);
        let mut m2 = DprCounts::default();
        m2.merge(b);
        m2.merge(a);
        assert_eq!(m1, m2);
    }

    #[test]
    fn f_is_the_harmonic_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let gold_non_none = rng.gen_range(1..30usize);
            let predicted_non_none = rng.gen_range(1..30usize);
            let tp = rng.gen_range(0..=gold_non_none.min(predicted_non_none));
            let c = DprCounts {
                true_positive: tp,
                predicted_non_none,
                gold_non_none,
            };
            let (p, r, f) = c.prf();
            if p + r > 0.0 {
                assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
                assert!(f <= p.max(r) + 1e-12);
                assert!(f >= 0.0 && f <= 1.0);
            }
        }
    }
}
