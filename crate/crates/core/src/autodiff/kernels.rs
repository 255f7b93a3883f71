//! Raw numeric kernels shared by the tape and the tape-free inference path, so
//! both produce bit-identical forward values.

/// `c = a · b` with `a: m×k`, `b: k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: slice lengths match the strides and extents passed to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `aᵀ · g` with `a: m×k`, `g: m×n`, giving `k×n`.
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: `a` read through transposed strides; extents match lengths.
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            g.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `g · bᵀ` with `g: m×n`, `b: k×n`, giving `m×k`.
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: `b` read through transposed strides; extents match lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            g.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            0.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
    c
}

/// Adds a `1×n` row to every row of an `m×n` matrix in place.
pub fn add_row(x: &mut [f64], row: &[f64]) {
    let n = row.len();
    for chunk in x.chunks_exact_mut(n) {
        for (v, b) in chunk.iter_mut().zip(row) {
            *v += b;
        }
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln σ(x)` without cancellation.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Left-to-right log-sum-exp.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let mut acc = 0.0;
    for &x in xs {
        acc += (x - max).exp();
    }
    max + acc.ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let lse = log_sum_exp(row);
    for v in row.iter_mut() {
        *v -= lse;
    }
}

/// Aggregated set feature map: `out[b,k] = Σ_s active · relu(mult · table[row,k] + bias[k])`,
/// summing slots in their stored order.
pub fn set_feature_map(table: &[f64], bias: &[f64], set: &super::SetBatch) -> Vec<f64> {
    let k = bias.len();
    let mut out = vec![0.0; set.rows * k];
    for b in 0..set.rows {
        let acc = &mut out[b * k..(b + 1) * k];
        for s in 0..set.slots {
            let idx = b * set.slots + s;
            if !set.active[idx] {
                continue;
            }
            let m = set.mult[idx];
            let r = set.table_row[idx] as usize;
            let trow = &table[r * k..(r + 1) * k];
            for j in 0..k {
                acc[j] += relu(m * trow[j] + bias[j]);
            }
        }
    }
    out
}
