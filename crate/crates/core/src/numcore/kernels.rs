//! Dense kernels on row-major slices. Reductions run in a fixed order so
//! results are reproducible bit for bit.

use super::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
pub fn matmul_at_acc<S: Scalar>(a: &[S], g: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let grow = &g[r * n..(r + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[kk * n..(kk + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

/// Transpose of a `rows x cols` matrix.
pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c[m,n] += g[m,k] * b[n,k]^T`
pub fn matmul_bt_acc<S: Scalar>(g: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_acc(g, &bt, c, m, k, n);
}

/// Row-wise softmax of `logits + additive mask`, with masked entries forced
/// to exactly zero. `visible` is a row-major `rows x cols` pattern; `None`
/// means every entry is visible. Returns the index of the first row with no
/// visible entry, if any.
pub fn masked_softmax_rows<S: Scalar>(
    logits: &[S],
    visible: Option<&[bool]>,
    out: &mut [S],
    rows: usize,
    cols: usize,
) -> Result<(), usize> {
    for r in 0..rows {
        let lrow = &logits[r * cols..(r + 1) * cols];
        let orow = &mut out[r * cols..(r + 1) * cols];
        let vrow = visible.map(|v| &v[r * cols..(r + 1) * cols]);
        let mut max = S::neg_infinity();
        for c in 0..cols {
            let z = match vrow {
                Some(v) if !v[c] => lrow[c] + S::MASK_SENTINEL,
                _ => lrow[c],
            };
            orow[c] = z;
            if z > max {
                max = z;
            }
        }
        if let Some(v) = vrow {
            if !v.iter().any(|&b| b) {
                return Err(r);
            }
        }
        let mut sum = S::zero();
        for c in 0..cols {
            let mut e = (orow[c] - max).exp();
            if let Some(v) = vrow {
                if !v[c] {
                    e = S::zero();
                }
            }
            orow[c] = e;
            sum += e;
        }
        let inv = S::one() / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    Ok(())
}

/// Backward of a row softmax: `dz = p * (dp - sum(dp * p))`, accumulated.
pub fn softmax_rows_backward<S: Scalar>(
    probs: &[S],
    dprobs: &[S],
    dlogits: &mut [S],
    rows: usize,
    cols: usize,
) {
    for r in 0..rows {
        let p = &probs[r * cols..(r + 1) * cols];
        let dp = &dprobs[r * cols..(r + 1) * cols];
        let dot: S = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
        let dz = &mut dlogits[r * cols..(r + 1) * cols];
        for c in 0..cols {
            dz[c] += p[c] * (dp[c] - dot);
        }
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(GELU_C);
    let a = S::of(GELU_A);
    let half = S::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}
