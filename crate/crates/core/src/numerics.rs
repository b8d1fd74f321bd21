//! Dense linear algebra, normal-distribution special functions, quadrature rules
//! and the seeded random stream shared by every stochastic routine in the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use statrs::function::erf::erfc_inv;
use thiserror::Error;

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not positive definite (jitter escalation exhausted at {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    spd: bool,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols], spd: false }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Panics when `data.len() != rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has wrong length");
        Self { rows, cols, data, spd: false }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data, spd: false }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.spd = false;
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        self.spd = false;
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so an empty-column matrix yields no rows here
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(if self.cols == 0 { 0 } else { self.rows })
    }

    /// Set only after a successful Cholesky factorization through [`DenseMatrix::cholesky`].
    pub fn is_spd(&self) -> bool {
        self.spd
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows);
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            &self.data,
            (self.cols as isize, 1),
            &other.data,
            (other.cols as isize, 1),
            0.0,
            &mut out.data,
            (other.cols as isize, 1),
        );
        out
    }

    /// `selfᵀ · self`, the Gram matrix of the columns.
    pub fn gram(&self) -> DenseMatrix {
        let (n, p) = (self.rows, self.cols);
        let mut out = DenseMatrix::zeros(p, p);
        gemm(
            p,
            n,
            p,
            1.0,
            &self.data,
            (1, p as isize),
            &self.data,
            (p as isize, 1),
            0.0,
            &mut out.data,
            (p as isize, 1),
        );
        // gemm leaves round-off asymmetry; mirror the lower triangle
        for i in 0..p {
            for j in 0..i {
                let v = out.data[i * p + j];
                out.data[j * p + i] = v;
            }
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn add_to_diag(&mut self, v: f64) {
        self.spd = false;
        for i in 0..self.rows.min(self.cols) {
            self.data[i * self.cols + i] += v;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.spd = false;
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Cholesky factorization with diagonal jitter escalation. Marks `self` SPD on success.
    pub fn cholesky(&mut self, policy: JitterPolicy) -> Result<Cholesky, NumericsError> {
        if self.rows != self.cols {
            return Err(NumericsError::DimensionMismatch { expected: self.rows, got: self.cols });
        }
        let n = self.rows;
        let asym = self.max_asymmetry();
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        if asym > 1e-12 * scale.max(1.0) {
            return Err(NumericsError::NotSymmetric(asym));
        }
        if let Some(l) = cholesky_lower(&self.data, n, 0.0) {
            self.spd = true;
            return Ok(Cholesky { n, l, jitter: 0.0 });
        }
        let base = (self.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
        let mut rel = policy.start;
        let mut last = 0.0;
        while rel <= policy.max * (1.0 + 1e-9) {
            let jitter = rel * base;
            last = jitter;
            if let Some(l) = cholesky_lower(&self.data, n, jitter) {
                self.spd = true;
                return Ok(Cholesky { n, l, jitter });
            }
            rel *= policy.factor;
        }
        Err(NumericsError::NotPositiveDefinite { jitter: last })
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        self.spd = false;
        &mut self.data[i * self.cols + j]
    }
}

/// Relative diagonal jitter schedule, in units of `trace(A)/n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy {
    pub start: f64,
    pub max: f64,
    pub factor: f64,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self { start: 1e-10, max: 1e-4, factor: 10.0 }
    }
}

impl JitterPolicy {
    /// Factorize as-is or fail.
    pub fn none() -> Self {
        Self { start: 1.0, max: 0.0, factor: 10.0 }
    }
}

/// Lower-triangular factor `L` with `A + jitter·I = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
    jitter: f64,
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn l(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.n + j]
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s = y[i] - dot(row, &y[..i]);
            y[i] = s / self.l[i * n + i];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            let xi = x[i] / self.l[i * n + i];
            x[i] = xi;
            let row = &self.l[i * n..i * n + i];
            for (xk, lik) in x[..i].iter_mut().zip(row) {
                *xk -= lik * xi;
            }
        }
        x
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `bᵀ A⁻¹ b` via one triangular solve.
    pub fn inv_quad(&self, b: &[f64]) -> f64 {
        let y = self.solve_lower(b);
        dot(&y, &y)
    }
}

/// Row-oriented Cholesky–Crout; returns `None` when a pivot is not strictly positive.
/// Blocked right-looking factorization; trailing updates go through `gemm`.
fn cholesky_lower(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    const NB: usize = 64;
    let mut l = a.to_vec();
    for i in 0..n {
        l[i * n + i] += jitter;
    }
    let mut panel = Vec::new();
    for k0 in (0..n).step_by(NB) {
        let k1 = (k0 + NB).min(n);
        let b = k1 - k0;
        for i in k0..n {
            for j in k0..k1.min(i + 1) {
                let s = l[i * n + j] - dot(&l[i * n + k0..i * n + j], &l[j * n + k0..j * n + j]);
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        let m = n - k1;
        if m == 0 {
            continue;
        }
        panel.clear();
        for i in k1..n {
            panel.extend_from_slice(&l[i * n + k0..i * n + k1]);
        }
        // lower part of A22 -= L21 L21ᵀ, one block row at a time
        for r0 in (0..m).step_by(NB) {
            let r1 = (r0 + NB).min(m);
            let c = &mut l[(k1 + r0) * n + k1..];
            gemm(r1 - r0, b, r1, -1.0, &panel[r0 * b..], (b as isize, 1), &panel, (1, b as isize), 1.0, c, (n as isize, 1));
        }
    }
    for i in 0..n {
        l[i * n + i + 1..(i + 1) * n].fill(0.0);
    }
    Some(l)
}

/// Solves `A x = b` for symmetric positive-definite `A`, escalating diagonal jitter on failure.
pub fn cholesky_solve(a: &mut DenseMatrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if b.len() != a.rows() {
        return Err(NumericsError::DimensionMismatch { expected: a.rows(), got: b.len() });
    }
    let chol = a.cholesky(JitterPolicy::default())?;
    Ok(chol.solve(b))
}

/// Dot product with independent accumulators so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `C ← α·A·B + β·C` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
    c_strides: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: callers pass buffers whose extents cover the strided index ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            c_strides.0,
            c_strides.1,
        );
    }
}

/// Pairwise (tree) summation; order is fixed by the slice layout.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Φ(x) = ½(1 + erf(x/√2)), evaluated through `erfc` so both tails keep relative accuracy.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * erfc(-x / SQRT_2)
}

/// Upper tail 1 − Φ(x).
pub fn std_normal_sf(x: f64) -> f64 {
    std_normal_cdf(-x)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

pub fn std_normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Φ(b) − Φ(a), computed on the tail side that avoids cancellation.
pub fn std_normal_interval(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    if a > 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

/// Φ⁻¹(p): closed-form initial guess, then safeguarded Newton inside a shrinking bracket.
pub fn std_normal_inv_cdf(p: f64) -> f64 {
    if p.is_nan() || !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    // Work in the lower tail so tiny upper-tail probabilities keep their precision.
    if p > 0.5 {
        return -lower_tail_inv(1.0 - p);
    }
    lower_tail_inv(p)
}

/// Inverse of the upper tail: returns x with 1 − Φ(x) = q.
pub fn std_normal_inv_sf(q: f64) -> f64 {
    -std_normal_inv_cdf_lower(q)
}

fn std_normal_inv_cdf_lower(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p > 0.5 {
        return -lower_tail_inv(1.0 - p);
    }
    lower_tail_inv(p)
}

fn lower_tail_inv(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p <= 0.5);
    let mut x = -SQRT_2 * erfc_inv(2.0 * p);
    if !x.is_finite() {
        x = -38.0;
    }
    let (mut lo, mut hi) = (-40.0f64, 0.0f64);
    for _ in 0..100 {
        let f = std_normal_cdf(x) - p;
        if f > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let dens = std_normal_pdf(x);
        let mut next = if dens > 0.0 { x - f / dens } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        let step = (next - x).abs();
        x = next;
        if step <= 1e-13 * x.abs().max(1.0) || hi - lo < 1e-13 {
            break;
        }
    }
    x
}

/// Nodes and weights of a one-dimensional quadrature rule.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let terms: Vec<f64> = self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).collect();
        pairwise_sum(&terms)
    }

    /// Maps a rule on [−1, 1] to [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> QuadratureRule {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        QuadratureRule {
            nodes: self.nodes.iter().map(|x| mid + half * x).collect(),
            weights: self.weights.iter().map(|w| w * half).collect(),
        }
    }
}

/// Gauss–Hermite rule for the standard normal measure N(0, 1) (weights sum to one).
///
/// Newton iteration on the orthonormal Hermite recurrence for the physicists' weight
/// e^{−t²}, then rescaled with x = √2·t, w ← w/√π.
pub fn gauss_hermite(n_nodes: usize) -> QuadratureRule {
    assert!(n_nodes >= 1, "Gauss–Hermite needs at least one node");
    let n = n_nodes;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut t = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * t[0],
            3 => 1.91 * z - 0.91 * t[1],
            _ => 2.0 * z - t[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        t[i] = z;
        t[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        t[n / 2] = 0.0;
    }
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut nodes: Vec<f64> = t.iter().map(|x| x * SQRT_2).collect();
    let mut weights: Vec<f64> = w.iter().map(|x| x / sqrt_pi).collect();
    nodes.reverse();
    weights.reverse();
    QuadratureRule { nodes, weights }
}

/// Gauss–Legendre rule on [−1, 1].
pub fn gauss_legendre(n_nodes: usize) -> QuadratureRule {
    assert!(n_nodes >= 1);
    let n = n_nodes;
    let nf = n as f64;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 1.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-16 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        weights[n - 1 - i] = weights[i];
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    QuadratureRule { nodes, weights }
}

/// Composite Gauss–Legendre over `[a, b]` with panel boundaries at `breaks` (sorted, inside).
pub fn integrate_piecewise<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, breaks: &[f64], panels: usize, order: usize) -> f64 {
    let rule = gauss_legendre(order);
    let mut edges = vec![a];
    edges.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    edges.push(b);
    edges.sort_by(f64::total_cmp);
    let mut parts = Vec::new();
    for w in edges.windows(2) {
        let h = (w[1] - w[0]) / panels as f64;
        for k in 0..panels {
            let lo = w[0] + k as f64 * h;
            let hi = if k + 1 == panels { w[1] } else { lo + h };
            parts.push(rule.mapped(lo, hi).integrate(&f));
        }
    }
    pairwise_sum(&parts)
}

/// The crate-wide random stream: ChaCha20 (256-bit key, 64-bit stream id).
pub type RandomStream = ChaCha20Rng;

pub fn seeded_rng(seed: u64) -> RandomStream {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Independent stream derived from `(seed, stream)`; used to fork work across tasks.
pub fn forked_rng(seed: u64, stream: u64) -> RandomStream {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(v) / v.len() as f64
}

/// Unbiased sample variance.
pub fn variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    let sq: Vec<f64> = v.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (v.len() - 1) as f64
}

pub fn std_dev(v: &[f64]) -> f64 {
    variance(v).sqrt()
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}
