//! Task metrics. Undefined correlations are reported as 0 with a flag.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    Accuracy,
    Matthews,
    Pearson,
    SpanF1,
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "accuracy" | "acc" => Ok(MetricKind::Accuracy),
            "matthews" | "mcc" => Ok(MetricKind::Matthews),
            "pearson" => Ok(MetricKind::Pearson),
            "span_f1" | "f1" => Ok(MetricKind::SpanF1),
            other => Err(format!("unknown metric `{other}`")),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Matthews => "matthews",
            MetricKind::Pearson => "pearson",
            MetricKind::SpanF1 => "span_f1",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    /// Set when the metric was undefined and `value` is a stand-in 0.
    pub degenerate: bool,
}

impl Score {
    fn ok(value: f64) -> Self {
        Score {
            value,
            degenerate: false,
        }
    }

    fn degenerate() -> Self {
        Score {
            value: 0.0,
            degenerate: true,
        }
    }
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(invalid!("{a} predictions for {b} gold labels"));
    }
    if a == 0 {
        return Err(invalid!("metric over an empty set"));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<Score> {
    same_len(pred.len(), gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(Score::ok(hits as f64 / pred.len() as f64))
}

/// Matthews correlation, multiclass form (equal to the binary
/// `(TP·TN − FP·FN)/√(…)` for two classes).
pub fn matthews(pred: &[usize], gold: &[usize]) -> Result<Score> {
    same_len(pred.len(), gold.len())?;
    let k = pred.iter().chain(gold).max().unwrap() + 1;
    let mut conf = vec![0f64; k * k];
    for (&p, &g) in pred.iter().zip(gold) {
        conf[g * k + p] += 1.0;
    }
    let n = pred.len() as f64;
    let correct: f64 = (0..k).map(|i| conf[i * k + i]).sum();
    let p_tot: Vec<f64> = (0..k).map(|j| (0..k).map(|i| conf[i * k + j]).sum()).collect();
    let g_tot: Vec<f64> = (0..k).map(|i| (0..k).map(|j| conf[i * k + j]).sum()).collect();
    let pg: f64 = p_tot.iter().zip(&g_tot).map(|(a, b)| a * b).sum();
    let pp: f64 = p_tot.iter().map(|a| a * a).sum();
    let gg: f64 = g_tot.iter().map(|a| a * a).sum();
    let denom = ((n * n - pp) * (n * n - gg)).sqrt();
    if denom == 0.0 {
        return Ok(Score::degenerate());
    }
    Ok(Score::ok(((correct * n - pg) / denom).clamp(-1.0, 1.0)))
}

pub fn pearson(pred: &[f64], gold: &[f64]) -> Result<Score> {
    same_len(pred.len(), gold.len())?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mg = gold.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gold) {
        sxy += (p - mp) * (g - mg);
        sxx += (p - mp) * (p - mp);
        syy += (g - mg) * (g - mg);
    }
    let denom = (sxx * syy).sqrt();
    if denom == 0.0 || !denom.is_finite() {
        return Ok(Score::degenerate());
    }
    Ok(Score::ok((sxy / denom).clamp(-1.0, 1.0)))
}

/// `(start, end, type)` spans of a BIO sequence, end inclusive. An `I-` tag
/// that does not continue a span of the same type starts a new one.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> BTreeSet<(usize, usize, String)> {
    let mut out = BTreeSet::new();
    let mut open: Option<(usize, String)> = None;
    for (i, t) in tags.iter().enumerate() {
        let t = t.as_ref();
        let (kind, ty) = match t.split_once('-') {
            Some((k, ty)) if k == "B" || k == "I" => (k, ty),
            _ => ("O", ""),
        };
        let continues = kind == "I" && open.as_ref().is_some_and(|(_, o)| o == ty);
        if !continues {
            if let Some((s, ty)) = open.take() {
                out.insert((s, i - 1, ty));
            }
            if kind != "O" {
                open = Some((i, ty.to_string()));
            }
        }
    }
    if let Some((s, ty)) = open {
        out.insert((s, tags.len() - 1, ty));
    }
    out
}

/// Exact-span F1 over sentences of BIO tags.
pub fn span_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<Score> {
    same_len(pred.len(), gold.len())?;
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(invalid!("tag sequences of length {} and {}", p.len(), g.len()));
        }
        let (ps, gs) = (bio_spans(p), bio_spans(g));
        tp += ps.intersection(&gs).count();
        np += ps.len();
        ng += gs.len();
    }
    if np == 0 && ng == 0 {
        return Ok(Score::degenerate());
    }
    if tp == 0 {
        return Ok(Score::ok(0.0));
    }
    let prec = tp as f64 / np as f64;
    let rec = tp as f64 / ng as f64;
    Ok(Score::ok(2.0 * prec * rec / (prec + rec)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn binary(tp: usize, fp: usize, fn_: usize, tn: usize) -> (Vec<usize>, Vec<usize>) {
        let mut p = Vec::new();
        let mut g = Vec::new();
        for (pv, gv, n) in [(1, 1, tp), (1, 0, fp), (0, 1, fn_), (0, 0, tn)] {
            p.extend(std::iter::repeat(pv).take(n));
            g.extend(std::iter::repeat(gv).take(n));
        }
        (p, g)
    }

    #[test]
    fn matthews_worked_example() {
        let (p, g) = binary(3, 1, 2, 4);
        let want = (3.0 * 4.0 - 1.0 * 2.0) / (4.0f64 * 5.0 * 6.0 * 5.0).sqrt();
        let got = matthews(&p, &g).unwrap();
        assert!((got.value - want).abs() < 1e-9);
        assert!((got.value - 0.408).abs() < 1e-3);
        let perfect = matthews(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap();
        assert_eq!(perfect.value, 1.0);
    }

    #[test]
    fn matthews_degenerate() {
        let s = matthews(&[1, 1, 1], &[1, 0, 1]).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn pearson_cases() {
        let s = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12);
        let s = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((s.value + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[0.0, 2.0]).unwrap().degenerate);
        assert!(pearson(&[1.0], &[0.0, 2.0]).is_err());
    }

    #[test]
    fn span_f1_worked_example() {
        let gold = vec![vec!["O", "B-PER", "I-PER", "O", "O"]];
        let pred = vec![vec!["O", "B-PER", "I-PER", "O", "B-LOC"]];
        let s = span_f1(&pred, &gold).unwrap();
        assert!((s.value - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn bio_decoding() {
        let spans = bio_spans(&["B-A", "I-A", "I-B", "O", "I-A"]);
        let want: BTreeSet<_> = [(0, 1, "A".into()), (2, 2, "B".into()), (4, 4, "A".into())].into();
        assert_eq!(spans, want);
    }

    #[test]
    fn accuracy_simple() {
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 1, 1, 0]).unwrap().value, 0.5);
        assert!(accuracy(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_permutation_invariant(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 2..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let split = |v: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { v.iter().copied().unzip() };
            let (p1, g1) = split(&pairs);
            let (p2, g2) = split(&shuffled);
            prop_assert_eq!(accuracy(&p1, &g1).unwrap(), accuracy(&p2, &g2).unwrap());
            let (a, b) = (matthews(&p1, &g1).unwrap(), matthews(&p2, &g2).unwrap());
            prop_assert!((a.value - b.value).abs() < 1e-12 && a.degenerate == b.degenerate);
            prop_assert!((-1.0..=1.0).contains(&a.value));
        }
    }
}
