//! Row-major f64 matrix kernels. All of them accumulate into `c`.

const MR: usize = 4;
const NR: usize = 8;

/// `c[m,n] += a[m,k] * b[k,n]`
///
/// Every output element is summed over `k` in ascending order starting from
/// zero and then added to `c`, whatever tile it falls in. Results for a row
/// therefore do not depend on the other rows in the batch.
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 || n == 0 || m == 0 {
        return;
    }
    let full_rows = m - m % MR;
    let full_cols = n - n % NR;
    for i in (0..full_rows).step_by(MR) {
        let rows = &a[i * k..(i + MR) * k];
        for j in (0..full_cols).step_by(NR) {
            tile(rows, b, c, i, j, k, n);
        }
        if full_cols < n {
            edge(a, b, c, i..i + MR, full_cols..n, k, n);
        }
    }
    if full_rows < m {
        edge(a, b, c, full_rows..m, 0..n, k, n);
    }
}

#[inline(always)]
fn tile(rows: &[f64], b: &[f64], c: &mut [f64], i: usize, j: usize, k: usize, n: usize) {
    let (a0, rest) = rows.split_at(k);
    let (a1, rest) = rest.split_at(k);
    let (a2, a3) = rest.split_at(k);
    let mut acc = [[0.0f64; NR]; MR];
    let iter = a0.iter().zip(a1).zip(a2).zip(a3).zip(b.chunks_exact(n));
    for ((((&x0, &x1), &x2), &x3), brow) in iter {
        let bt: &[f64; NR] = brow[j..j + NR].try_into().expect("tile width");
        let xs = [x0, x1, x2, x3];
        for (row, &x) in acc.iter_mut().zip(&xs) {
            for (s, &y) in row.iter_mut().zip(bt) {
                *s += x * y;
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        let out = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
        for (o, s) in out.iter_mut().zip(row) {
            *o += s;
        }
    }
}

fn edge(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let arow = &a[i * k..(i + 1) * k];
        for j in cols.clone() {
            let mut s = 0.0;
            for (p, &x) in arow.iter().enumerate() {
                s += x * b[p * n + j];
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let at = transpose(a, m, k);
    mm_nn(&at, b, c, k, m, n);
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    mm_nn(a, &bt, c, m, k, n);
}

/// `[rows, cols]` to `[cols, rows]`.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
