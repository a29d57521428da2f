//! Row-major dense helpers on `f64` slices.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. `ta`/`tb` select the transposed view of a row-major
/// buffer, so `a` is stored as `m x k` (or `k x m` when `ta`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the `m*k`, `k*n` and
    // `m*n` buffers whose lengths are checked by the debug assertions and
    // guaranteed by every caller in this crate.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, 1.0, a, false, b, false, 0.0, &mut c);
    c
}

pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Frobenius norm of `aᵀa - I` for a square `n x n` matrix.
pub fn orthogonality_defect(n: usize, a: &[f64]) -> f64 {
    let mut ata = vec![0.0; n * n];
    gemm(n, n, n, 1.0, a, true, a, false, 0.0, &mut ata);
    for i in 0..n {
        ata[i * n + i] -= 1.0;
    }
    norm(&ata)
}

/// Thin SVD of a square matrix: `a = u * diag(s) * vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub n: usize,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub v: Vec<f64>,
}

/// Off-diagonal tolerance for the Jacobi sweeps, relative to the column
/// norms involved.
pub const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD of an `n x n` row-major matrix.
///
/// Columns of `a` are rotated pairwise until mutually orthogonal; the
/// accumulated rotations form `v`, the column norms are the singular values
/// and the normalized columns form `u`. Columns whose norm collapses to
/// zero (rank deficiency) are completed to an orthonormal basis so that
/// `u` is always orthogonal. Singular values are returned in descending
/// order.
pub fn jacobi_svd(n: usize, a: &[f64]) -> Svd {
    assert_eq!(a.len(), n * n);
    // work on columns: col-major copy so each column is contiguous
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]).then(i.cmp(&j)));
    let smax = sig.iter().cloned().fold(0.0, f64::max);
    let cutoff = smax * (n as f64) * f64::EPSILON;

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v = vec![0.0; n * n];
    let mut deficient = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        for i in 0..n {
            v[i * n + k] = vcols[j][i];
        }
        if sig[j] > cutoff {
            s.push(sig[j]);
            ucols.push(cols[j].iter().map(|x| x / sig[j]).collect());
        } else {
            s.push(0.0);
            ucols.push(vec![0.0; n]);
            deficient.push(k);
        }
    }
    complete_basis(&mut ucols, &deficient);

    let mut u = vec![0.0; n * n];
    for (k, col) in ucols.iter().enumerate() {
        for i in 0..n {
            u[i * n + k] = col[i];
        }
    }
    Svd { n, u, s, v }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to
/// all others, by modified Gram-Schmidt over the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize]) {
    let n = cols.len();
    let mut candidate = 0;
    for &k in missing {
        loop {
            assert!(candidate < n * 2, "basis completion failed");
            let mut e = vec![0.0; n];
            e[candidate % n] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, c) in cols.iter().enumerate() {
                    if j == k || c.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= proj * ci;
                    }
                }
            }
            let nrm = norm(&e);
            if nrm > 1e-6 {
                cols[k] = e.iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}
