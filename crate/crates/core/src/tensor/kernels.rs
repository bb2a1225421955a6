//! Raw numeric kernels shared by the eval-mode and traced forward paths.
//!
//! Accumulation order is fixed everywhere: for each output element the sum
//! runs over the contraction index in ascending order. The i-k-j matmul and
//! the a@b^T variant therefore produce bitwise-identical results to the naive
//! triple loop, which the tests assert.

/// Large negative sentinel for masked attention scores. Finite so that
/// downstream arithmetic never sees NaN; softmax maps it to exactly 0 weight
/// after max subtraction.
pub const MASK_NEG: f64 = -1.0e30;

/// c[r x n] = a[r x k] * b[k x n]; c must be zeroed by the caller.
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], r: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), r * n);
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                c_row[j] += aik * b_row[j];
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; r * n];
    matmul_acc(a, b, &mut c, r, k, n);
    c
}

/// c[r x n] = a[r x k] * b[n x k]^T. Same per-element accumulation order as
/// `matmul(a, transpose(b))`: each output sums over k ascending. Outputs are
/// computed four at a time so the chains vectorize without reassociating any
/// single sum.
pub fn matmul_nt(a: &[f64], b: &[f64], r: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; r * n];
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut j = 0;
        while j + 4 <= n {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for kk in 0..k {
                let av = a_row[kk];
                s0 += av * b0[kk];
                s1 += av * b1[kk];
                s2 += av * b2[kk];
                s3 += av * b3[kk];
            }
            c_row[j] = s0;
            c_row[j + 1] = s1;
            c_row[j + 2] = s2;
            c_row[j + 3] = s3;
            j += 4;
        }
        while j < n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for kk in 0..k {
                s += a_row[kk] * b_row[kk];
            }
            c_row[j] = s;
            j += 1;
        }
    }
    c
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// Row-wise softmax in place.
pub fn softmax_rows_inplace(x: &mut [f64], r: usize, c: usize) {
    for i in 0..r {
        let row = &mut x[i * c..(i + 1) * c];
        let mut m = f64::NEG_INFINITY;
        for &v in row.iter() {
            if v > m {
                m = v;
            }
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Epsilon inside the RMS denominator. Small enough that unit-gain output
/// keeps row RMS equal to 1 within 1e-10 for O(1) inputs.
pub const RMS_EPS: f64 = 1e-12;

/// y[i,j] = gain[j] * x[i,j] / rms_i with rms_i = sqrt(mean_j x[i,j]^2 + eps).
/// Returns (y, inverse rms per row).
pub fn rms_norm(x: &[f64], gain: &[f64], r: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; r * c];
    let mut inv_rms = vec![0.0; r];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mut ss = 0.0;
        for &v in row {
            ss += v * v;
        }
        let inv = 1.0 / (ss / c as f64 + RMS_EPS).sqrt();
        inv_rms[i] = inv;
        let out = &mut y[i * c..(i + 1) * c];
        for j in 0..c {
            out[j] = gain[j] * row[j] * inv;
        }
    }
    (y, inv_rms)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C0: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_C1: f64 = 0.044715;

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Zero out (to `MASK_NEG`) entries strictly above the diagonal.
pub fn causal_mask_inplace(x: &mut [f64], t: usize) {
    for i in 0..t {
        for j in (i + 1)..t {
            x[i * t + j] = MASK_NEG;
        }
    }
}

/// Mean next-token cross entropy over the first `targets.len()` rows of
/// `logits` (rows x vocab). Returns (loss, per-row log-sum-exp) so the
/// backward pass can reuse the normalizers.
pub fn mean_cross_entropy(
    logits: &[f64],
    vocab: usize,
    targets: &[u32],
) -> (f64, Vec<f64>) {
    let n = targets.len();
    let mut lse = vec![0.0; n];
    let mut total = 0.0;
    for (t, &tgt) in targets.iter().enumerate() {
        let row = &logits[t * vocab..(t + 1) * vocab];
        let mut m = f64::NEG_INFINITY;
        for &v in row {
            if v > m {
                m = v;
            }
        }
        let mut sum = 0.0;
        for &v in row {
            sum += (v - m).exp();
        }
        let l = m + sum.ln();
        lse[t] = l;
        total += l - row[tgt as usize];
    }
    (total / n as f64, lse)
}
