//! Metrics against worked examples and brute-force oracles.

use std::collections::BTreeSet;

use knit::train::metrics::{accuracy, matthews, pearson, span_f1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

const TOL: f64 = 1e-9;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOL
}

/// MCC from the binary confusion counts.
fn mcc_binary(p: &[usize], g: &[usize]) -> Option<f64> {
    let mut c = [[0f64; 2]; 2];
    for (&p, &g) in p.iter().zip(g) {
        c[g][p] += 1.0;
    }
    let (tn, fp, fn_, tp) = (c[0][0], c[0][1], c[1][0], c[1][1]);
    let d = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    (d != 0.0).then(|| (tp * tn - fp * fn_) / d)
}

/// Multiclass MCC as the correlation of one-hot indicator matrices.
fn mcc_onehot(p: &[usize], g: &[usize], k: usize) -> Option<f64> {
    let n = p.len() as f64;
    let onehot = |v: &[usize]| -> Vec<Vec<f64>> {
        v.iter().map(|&c| (0..k).map(|j| f64::from(u8::from(j == c))).collect()).collect()
    };
    let (x, y) = (onehot(p), onehot(g));
    let mean = |m: &Vec<Vec<f64>>, j: usize| m.iter().map(|r| r[j]).sum::<f64>() / n;
    let cov = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        (0..k)
            .map(|j| {
                let (ma, mb) = (mean(a, j), mean(b, j));
                a.iter().zip(b).map(|(ra, rb)| (ra[j] - ma) * (rb[j] - mb)).sum::<f64>()
            })
            .sum()
    };
    let d = (cov(&x, &x) * cov(&y, &y)).sqrt();
    (d != 0.0).then(|| cov(&x, &y) / d)
}

/// Pearson through raw sums.
fn pearson_sums(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let syy: f64 = y.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

/// Every maximal `B`/`I` run, found by checking all `(i, j)` pairs.
fn spans_brute(tags: &[&str]) -> BTreeSet<(usize, usize, String)> {
    let ty = |t: &str| t.get(2..).unwrap_or("").to_string();
    let starts = |i: usize| {
        let t = tags[i];
        t.starts_with("B-")
            || (t.starts_with("I-") && (i == 0 || tags[i - 1] == "O" || ty(tags[i - 1]) != ty(t)))
    };
    let mut out = BTreeSet::new();
    for i in 0..tags.len() {
        if !starts(i) {
            continue;
        }
        for j in i..tags.len() {
            let inside = (i + 1..=j).all(|k| tags[k].starts_with("I-") && ty(tags[k]) == ty(tags[i]));
            let closed = j + 1 == tags.len()
                || !(tags[j + 1].starts_with("I-") && ty(tags[j + 1]) == ty(tags[i]));
            if inside && closed {
                out.insert((i, j, ty(tags[i])));
            }
        }
    }
    out
}

fn f1_brute(pred: &[Vec<&str>], gold: &[Vec<&str>]) -> (f64, bool) {
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let (ps, gs) = (spans_brute(p), spans_brute(g));
        tp += ps.iter().filter(|s| gs.contains(*s)).count();
        np += ps.len();
        ng += gs.len();
    }
    if np + ng == 0 {
        return (0.0, true);
    }
    if tp == 0 {
        return (0.0, false);
    }
    let (p, r) = (tp as f64 / np as f64, tp as f64 / ng as f64);
    (2.0 * p * r / (p + r), false)
}

fn worked_examples() -> Result<(), String> {
    // TP 3, FP 1, FN 2, TN 4.
    let p = [1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
    let g = [1, 1, 1, 0, 1, 1, 0, 0, 0, 0];
    let want = (3.0 * 4.0 - 1.0 * 2.0) / (4.0f64 * 5.0 * 6.0 * 5.0).sqrt();
    let got = matthews(&p, &g).map_err(|e| e.to_string())?.value;
    ensure!(close(got, want), "matthews {got} != {want}");
    let acc = accuracy(&p, &g).map_err(|e| e.to_string())?.value;
    ensure!(close(acc, 0.7), "accuracy {acc} != 0.7");

    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let y = [2.0, 4.0, 5.0, 4.0, 5.0];
    let want = 6.0 / (10.0f64 * 6.0).sqrt();
    let got = pearson(&x, &y).map_err(|e| e.to_string())?.value;
    ensure!(close(got, want), "pearson {got} != {want}");

    let gold = vec![vec!["B-PER", "I-PER", "O", "B-LOC"]];
    let pred = vec![vec!["B-PER", "I-PER", "O", "B-ORG"]];
    let got = span_f1(&pred, &gold).map_err(|e| e.to_string())?.value;
    ensure!(close(got, 0.5), "span_f1 {got} != 0.5");

    let none = vec![vec!["O", "O"]];
    let s = span_f1(&none, &none).map_err(|e| e.to_string())?;
    ensure!(s.degenerate && s.value == 0.0, "all-O span_f1 should be flagged degenerate");
    let s = matthews(&[1, 1, 1], &[0, 1, 0]).map_err(|e| e.to_string())?;
    ensure!(s.degenerate && s.value == 0.0, "constant prediction MCC should be flagged degenerate");
    Ok(())
}

pub fn metrics() -> Outcome {
    worked_examples()?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tags = ["O", "B-A", "I-A", "B-B", "I-B"];
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let n = rng.gen_range(2..40);
        let k = rng.gen_range(2..5);
        let p: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let g: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();

        let got = matthews(&p, &g).map_err(|e| e.to_string())?;
        let want = mcc_onehot(&p, &g, k);
        ensure!(got.degenerate == want.is_none(), "trial {trial}: MCC degeneracy flag disagrees");
        let want = want.unwrap_or(0.0);
        worst = worst.max((got.value - want).abs());
        ensure!(close(got.value, want), "trial {trial}: MCC {} vs oracle {want}", got.value);
        if k == 2 {
            let b = mcc_binary(&p, &g).unwrap_or(0.0);
            ensure!(close(got.value, b), "trial {trial}: binary MCC {} vs counts {b}", got.value);
        }

        let hits = p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64 / n as f64;
        let acc = accuracy(&p, &g).map_err(|e| e.to_string())?.value;
        ensure!(close(acc, hits), "trial {trial}: accuracy {acc} vs {hits}");

        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0)).collect();
        let r = pearson(&x, &y).map_err(|e| e.to_string())?.value;
        let want = pearson_sums(&x, &y);
        worst = worst.max((r - want).abs());
        ensure!(close(r, want), "trial {trial}: pearson {r} vs {want}");

        let sents = rng.gen_range(1..4);
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for _ in 0..sents {
            let len = rng.gen_range(1..8);
            let o = rng.gen_bool(0.2);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<&str> {
                (0..len).map(|_| if o { "O" } else { tags[rng.gen_range(0..tags.len())] }).collect()
            };
            gold.push(draw(&mut rng));
            pred.push(draw(&mut rng));
        }
        let got = span_f1(&pred, &gold).map_err(|e| e.to_string())?;
        let (want, degenerate) = f1_brute(&pred, &gold);
        ensure!(got.degenerate == degenerate, "trial {trial}: span_f1 degeneracy flag disagrees");
        ensure!(close(got.value, want), "trial {trial}: span_f1 {} vs {want}", got.value);
    }
    Ok(format!("worked examples exact, 1000 random pairs agree (max |diff| {worst:.1e})"))
}
