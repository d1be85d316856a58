//! Ordinary Kriging (unknown constant trend) with anisotropic Matérn 5/2
//! correlation, fitted by reduced-likelihood minimization.
//!
//! Models live in unit-hypercube coordinates; responses are used raw, the
//! trend absorbs the offset. A fitted model is immutable: enrichment
//! produces a new model from the extended design of experiments.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;

use crate::doe::lhs;
use crate::error::{QrbdoError, Result};
use crate::special::exp_neg;

const SQRT5: f64 = 2.23606797749978969640917366873;

/// Base correlation-matrix jitter; escalated by 100x up to [`NUGGET_MAX`]
/// when the factorization fails. The base stays tiny so that interpolation
/// error (which scales with the nugget) saturates machine-level accuracy
/// on well-conditioned designs.
pub const NUGGET_BASE: f64 = 1e-12;
pub const NUGGET_MAX: f64 = 1e-4;

/// Unit-cube max-norm distance below which two DoE inputs count as
/// duplicates and are rejected.
pub const DUPLICATE_TOL: f64 = 1e-10;

/// Design of experiments: inputs in unit-cube coordinates plus responses.
#[derive(Debug, Clone)]
pub struct Doe {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl Doe {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() || x.nrows() == 0 {
            return Err(QrbdoError::Config(format!(
                "doe needs matching non-empty x ({} rows) and y ({})",
                x.nrows(),
                y.len()
            )));
        }
        let doe = Doe { x, y };
        for i in 0..doe.n() {
            for j in (i + 1)..doe.n() {
                if doe.max_norm_dist(i, j) <= DUPLICATE_TOL {
                    return Err(QrbdoError::Config(format!(
                        "doe rows {i} and {j} are duplicates"
                    )));
                }
            }
        }
        Ok(doe)
    }

    /// Appends a point, rejecting duplicates of existing rows.
    pub fn push(&mut self, x_row: &[f64], y: f64) -> Result<()> {
        if x_row.len() != self.dim() {
            return Err(QrbdoError::Config("doe dimension mismatch on push".into()));
        }
        if self.nearest_max_norm(x_row) <= DUPLICATE_TOL {
            return Err(QrbdoError::Config("duplicate doe point rejected".into()));
        }
        let n = self.n();
        self.x = self.x.clone().insert_row(n, 0.0);
        for (k, &v) in x_row.iter().enumerate() {
            self.x[(n, k)] = v;
        }
        self.y = self.y.clone().insert_row(n, y);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    fn max_norm_dist(&self, i: usize, j: usize) -> f64 {
        (0..self.dim())
            .map(|k| (self.x[(i, k)] - self.x[(j, k)]).abs())
            .fold(0.0, f64::max)
    }

    /// Max-norm distance from `p` to the nearest DoE row.
    pub fn nearest_max_norm(&self, p: &[f64]) -> f64 {
        (0..self.n())
            .map(|i| {
                (0..self.dim())
                    .map(|k| (self.x[(i, k)] - p[k]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Matérn 5/2 correlation for a single dimension.
pub fn matern52(h: f64, l: f64) -> Result<f64> {
    if l <= 0.0 {
        return Err(QrbdoError::Domain(format!(
            "matern length-scale must be positive, got {l}"
        )));
    }
    if h < 0.0 {
        return Err(QrbdoError::Domain(format!("distance must be >= 0, got {h}")));
    }
    let t = h / l;
    Ok((1.0 + SQRT5 * t + (5.0 / 3.0) * t * t) * exp_neg(-SQRT5 * t))
}

// Tensor-product Matérn 5/2 between two points; the per-dimension
// exponentials fold into one exp of the summed scaled distances.
#[inline]
fn kernel_nd(a: &[f64], b: &[f64], theta: &[f64]) -> f64 {
    let mut poly = 1.0;
    let mut hsum = 0.0;
    for k in 0..theta.len() {
        let t = (a[k] - b[k]).abs() / theta[k];
        poly *= 1.0 + SQRT5 * t + (5.0 / 3.0) * t * t;
        hsum += t;
    }
    poly * exp_neg(-SQRT5 * hsum)
}

/// Tensor-product correlation matrix `R_ij = prod_k matern52(|x_ik - x_jk|, theta_k)`.
pub fn correlation_matrix(x: &DMatrix<f64>, theta: &[f64]) -> DMatrix<f64> {
    let n = x.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| x.row(i).iter().copied().collect())
        .collect();
    let mut r = DMatrix::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = kernel_nd(&rows[i], &rows[j], theta);
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    r
}

/// Outcome of a reduced-likelihood evaluation at fixed hyperparameters.
#[derive(Debug, Clone)]
pub struct LikelihoodEval {
    /// psi = sigma2_hat * det(R)^(1/n); smaller is better.
    pub psi: f64,
    pub beta_hat: f64,
    pub sigma2: f64,
    pub nugget: f64,
}

/// Evaluates the reduced likelihood `psi(theta) = sigma2_hat(theta) *
/// det R(theta)^(1/n)` for ordinary Kriging (trend basis F = 1).
pub fn reduced_likelihood(doe: &Doe, theta: &[f64]) -> Result<LikelihoodEval> {
    let r = correlation_matrix(doe.x(), theta);
    let (eval, _) = likelihood_with_factor(doe, r)?;
    Ok(eval)
}

// Row-major lower-triangular Cholesky factor of R + nugget*I.
struct Factor {
    l_rows: Vec<f64>,
    n: usize,
    logdet: f64,
}

impl Factor {
    fn from_matrix(m: DMatrix<f64>) -> Option<Self> {
        let n = m.nrows();
        let chol = Cholesky::new(m)?;
        let l = chol.unpack();
        let mut logdet = 0.0;
        let mut l_rows = vec![0.0; n * n];
        for i in 0..n {
            logdet += 2.0 * l[(i, i)].ln();
            for j in 0..=i {
                l_rows[i * n + j] = l[(i, j)];
            }
        }
        Some(Factor { l_rows, n, logdet })
    }

    // L out = b
    fn forward(&self, b: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l_rows[i * n..i * n + i];
            let mut acc = b[i];
            for (j, &lij) in row.iter().enumerate() {
                acc -= lij * out[j];
            }
            out[i] = acc / self.l_rows[i * n + i];
        }
    }

    // L^T x = b with b given in x.
    fn backward_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= self.l_rows[j * n + i] * x[j];
            }
            x[i] = acc / self.l_rows[i * n + i];
        }
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.forward(b, &mut out);
        self.backward_in_place(&mut out);
        out
    }
}

impl std::fmt::Debug for Factor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Factor(n={})", self.n)
    }
}

fn likelihood_with_factor(doe: &Doe, r: DMatrix<f64>) -> Result<(LikelihoodEval, Factor)> {
    let n = doe.n();
    let mut nugget = NUGGET_BASE;
    loop {
        let mut rd = r.clone();
        for i in 0..n {
            rd[(i, i)] += nugget;
        }
        if let Some(factor) = Factor::from_matrix(rd) {
            let y: Vec<f64> = doe.y().iter().copied().collect();
            let ones = vec![1.0; n];
            let rinv_y = factor.solve(&y);
            let rinv_1 = factor.solve(&ones);
            let c1: f64 = rinv_1.iter().sum();
            if c1 <= 0.0 {
                return Err(QrbdoError::Fit(format!(
                    "degenerate trend normal equations (1'R^-1 1 = {c1})"
                )));
            }
            let beta_hat = rinv_y.iter().sum::<f64>() / c1;
            let mut sigma2 = 0.0;
            for i in 0..n {
                sigma2 += (y[i] - beta_hat) * (rinv_y[i] - beta_hat * rinv_1[i]);
            }
            sigma2 = (sigma2 / n as f64).max(0.0);
            let psi = sigma2 * (factor.logdet / n as f64).exp();
            return Ok((
                LikelihoodEval {
                    psi,
                    beta_hat,
                    sigma2,
                    nugget,
                },
                factor,
            ));
        }
        if nugget >= NUGGET_MAX {
            return Err(QrbdoError::Fit(
                "correlation matrix not positive definite at maximum nugget".into(),
            ));
        }
        nugget *= 100.0;
    }
}

/// Fitted ordinary-Kriging model; immutable, cheap to predict from.
#[derive(Debug)]
pub struct KrigingModel {
    doe: Doe,
    theta: Vec<f64>,
    inv_theta: Vec<f64>,
    beta_hat: f64,
    sigma2: f64,
    nugget: f64,
    psi: f64,
    factor: Factor,
    // R^-1 (y - beta 1)
    alpha_w: Vec<f64>,
    // R^-1 1 and 1'R^-1 1
    rinv_one: Vec<f64>,
    c1: f64,
    doe_rows: Vec<Vec<f64>>,
}

/// Batch prediction with extrapolation accounting.
#[derive(Debug, Clone)]
pub struct BatchPrediction {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Number of queried points outside the unit cube (allowed, flagged).
    pub outside_unit_cube: usize,
}

impl KrigingModel {
    /// Builds the model at fixed hyperparameters (no search).
    pub fn with_theta(doe: Doe, theta: &[f64]) -> Result<Self> {
        if theta.len() != doe.dim() || theta.iter().any(|&t| t <= 0.0) {
            return Err(QrbdoError::Domain(
                "theta must be positive and match the doe dimension".into(),
            ));
        }
        let r = correlation_matrix(doe.x(), theta);
        let (eval, factor) = likelihood_with_factor(&doe, r)?;
        let n = doe.n();
        let y: Vec<f64> = doe.y().iter().copied().collect();
        let ones = vec![1.0; n];
        let rinv_y = factor.solve(&y);
        let rinv_one = factor.solve(&ones);
        let c1: f64 = rinv_one.iter().sum();
        let alpha_w: Vec<f64> = (0..n)
            .map(|i| rinv_y[i] - eval.beta_hat * rinv_one[i])
            .collect();
        let doe_rows = (0..n)
            .map(|i| doe.x().row(i).iter().copied().collect())
            .collect();
        Ok(KrigingModel {
            theta: theta.to_vec(),
            inv_theta: theta.iter().map(|t| 1.0 / t).collect(),
            beta_hat: eval.beta_hat,
            sigma2: eval.sigma2,
            nugget: eval.nugget,
            psi: eval.psi,
            factor,
            alpha_w,
            rinv_one,
            c1,
            doe_rows,
            doe,
        })
    }

    /// Maximum-likelihood fit: multi-start Nelder–Mead on log theta inside
    /// `theta_bounds`, deterministic under the rng stream. `warm` seeds an
    /// extra start (used when refitting after enrichment).
    pub fn fit<R: Rng + ?Sized>(
        doe: Doe,
        theta_bounds: (f64, f64),
        starts: usize,
        warm: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<Self> {
        let (lo, hi) = theta_bounds;
        if !(lo > 0.0 && hi > lo) {
            return Err(QrbdoError::Config(format!(
                "theta bounds must satisfy 0 < lo < hi, got ({lo}, {hi})"
            )));
        }
        let s = doe.dim();
        let n = doe.n();
        let (llo, lhi) = (lo.ln(), hi.ln());

        // Cache per-pair per-dimension distances once; the likelihood is
        // evaluated hundreds of times per fit.
        let mut diffs = vec![0.0; n * (n - 1) / 2 * s];
        let mut idx = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                for k in 0..s {
                    diffs[idx] = (doe.x()[(i, k)] - doe.x()[(j, k)]).abs();
                    idx += 1;
                }
            }
        }
        let objective = |log_theta: &[f64]| -> f64 {
            let inv_theta: Vec<f64> = log_theta.iter().map(|&t| (-t).exp()).collect();
            let mut r = DMatrix::identity(n, n);
            let mut idx = 0;
            for i in 0..n {
                for j in (i + 1)..n {
                    let mut poly = 1.0;
                    let mut hsum = 0.0;
                    for (k, th) in inv_theta.iter().enumerate() {
                        let t = diffs[idx + k] * th;
                        poly *= 1.0 + SQRT5 * t + (5.0 / 3.0) * t * t;
                        hsum += t;
                    }
                    idx += s;
                    let v = poly * exp_neg(-SQRT5 * hsum);
                    r[(i, j)] = v;
                    r[(j, i)] = v;
                }
            }
            match likelihood_with_factor(&doe, r) {
                Ok((eval, _)) => eval.psi,
                Err(_) => f64::INFINITY,
            }
        };

        let mut start_points: Vec<Vec<f64>> = Vec::new();
        if let Some(w) = warm {
            start_points.push(w.iter().map(|&t| t.clamp(lo, hi).ln()).collect());
        }
        let fresh = starts.max(1);
        let plan = lhs(fresh, s, rng);
        for i in 0..fresh {
            start_points.push(
                (0..s)
                    .map(|k| llo + plan.points[(i, k)] * (lhi - llo))
                    .collect(),
            );
        }

        let max_evals = 100 + 25 * s;
        let mut best: Option<(f64, Vec<f64>)> = None;
        for sp in &start_points {
            let (xb, fb) = nelder_mead(&objective, sp, (llo, lhi), max_evals);
            if best.as_ref().map_or(true, |(bf, _)| fb < *bf) {
                best = Some((fb, xb));
            }
        }
        let (fbest, log_theta) = best.expect("at least one start");
        if !fbest.is_finite() {
            return Err(QrbdoError::Fit(
                "all hyperparameter starts failed factorization".into(),
            ));
        }
        let theta: Vec<f64> = log_theta.iter().map(|&t| t.exp()).collect();
        Self::with_theta(doe, &theta)
    }

    pub fn doe(&self) -> &Doe {
        &self.doe
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn beta_hat(&self) -> f64 {
        self.beta_hat
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn nugget(&self) -> f64 {
        self.nugget
    }

    /// Reduced-likelihood value at the fitted hyperparameters.
    pub fn psi(&self) -> f64 {
        self.psi
    }

    /// Predictive mean and standard deviation at a unit-cube point
    /// (points outside the cube are allowed and revert toward the trend).
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let n = self.doe.n();
        let mut r = vec![0.0; n];
        let mut v = vec![0.0; n];
        self.predict_into(x, &mut r, &mut v)
    }

    #[inline]
    fn predict_into(&self, x: &[f64], r: &mut [f64], v: &mut [f64]) -> (f64, f64) {
        let n = self.doe.n();
        let s = self.inv_theta.len();
        for i in 0..n {
            let row = &self.doe_rows[i];
            let mut poly = 1.0;
            let mut hsum = 0.0;
            for k in 0..s {
                let t = (x[k] - row[k]).abs() * self.inv_theta[k];
                poly *= 1.0 + SQRT5 * t + (5.0 / 3.0) * t * t;
                hsum += t;
            }
            r[i] = poly * exp_neg(-SQRT5 * hsum);
        }
        let mut mu = self.beta_hat;
        for i in 0..n {
            mu += r[i] * self.alpha_w[i];
        }
        let s2 = self.raw_variance(r, v);
        (mu, s2.max(0.0).sqrt())
    }

    // sigma2 * (1 - r'R^-1 r + u^2 / (1'R^-1 1)), before clamping.
    fn raw_variance(&self, r: &[f64], v: &mut [f64]) -> f64 {
        let n = self.doe.n();
        self.factor.forward(r, v);
        let mut vtv = 0.0;
        for vi in v.iter().take(n) {
            vtv += vi * vi;
        }
        let mut u = -1.0;
        for i in 0..n {
            u += self.rinv_one[i] * r[i];
        }
        self.sigma2 * (1.0 - vtv + u * u / self.c1)
    }

    /// Batch prediction over unit-cube rows; identical arithmetic to
    /// [`KrigingModel::predict`] point by point.
    pub fn predict_batch(&self, x: &DMatrix<f64>) -> BatchPrediction {
        let n = self.doe.n();
        let m = x.nrows();
        let s = self.doe.dim();
        let mut mu = Vec::with_capacity(m);
        let mut sigma = Vec::with_capacity(m);
        let mut outside = 0usize;
        let mut r = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; s];
        for i in 0..m {
            for (k, pk) in p.iter_mut().enumerate() {
                *pk = x[(i, k)];
            }
            if p.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                outside += 1;
            }
            let (m_i, s_i) = self.predict_into(&p, &mut r, &mut v);
            mu.push(m_i);
            sigma.push(s_i);
        }
        BatchPrediction {
            mu,
            sigma,
            outside_unit_cube: outside,
        }
    }

    #[cfg(test)]
    fn raw_variance_at(&self, x: &[f64]) -> f64 {
        let n = self.doe.n();
        let mut r = vec![0.0; n];
        let mut v = vec![0.0; n];
        for i in 0..n {
            r[i] = kernel_nd(x, &self.doe_rows[i], &self.theta);
        }
        self.raw_variance(&r, &mut v)
    }
}

/// Bounded Nelder–Mead on `f`, vertices clamped into `[lo, hi]` per
/// coordinate. Returns the best vertex and its value.
fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    bounds: (f64, f64),
    max_evals: usize,
) -> (Vec<f64>, f64) {
    let s = x0.len();
    let (lo, hi) = bounds;
    let clamp = |x: &mut Vec<f64>| {
        for xi in x.iter_mut() {
            *xi = xi.clamp(lo, hi);
        }
    };
    let step = 0.1 * (hi - lo);
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(s + 1);
    simplex.push(x0.to_vec());
    for k in 0..s {
        let mut v = x0.to_vec();
        v[k] = if v[k] + step <= hi { v[k] + step } else { v[k] - step };
        simplex.push(v);
    }
    let mut evals = 0usize;
    let mut fv: Vec<f64> = simplex
        .iter()
        .map(|v| {
            evals += 1;
            f(v)
        })
        .collect();

    while evals < max_evals {
        let mut order: Vec<usize> = (0..=s).collect();
        order.sort_by(|&a, &b| fv[a].total_cmp(&fv[b]));
        let best = order[0];
        let worst = order[s];
        let second_worst = order[s - 1];

        let fspread = fv[worst] - fv[best];
        if fspread.abs() <= 1e-10 * (fv[best].abs() + 1e-300) {
            break;
        }

        let mut centroid = vec![0.0; s];
        for &i in &order[..s] {
            for k in 0..s {
                centroid[k] += simplex[i][k];
            }
        }
        for c in centroid.iter_mut() {
            *c /= s as f64;
        }

        let mut reflected: Vec<f64> = (0..s)
            .map(|k| centroid[k] + (centroid[k] - simplex[worst][k]))
            .collect();
        clamp(&mut reflected);
        let fr = f(&reflected);
        evals += 1;

        if fr < fv[best] {
            let mut expanded: Vec<f64> = (0..s)
                .map(|k| centroid[k] + 2.0 * (centroid[k] - simplex[worst][k]))
                .collect();
            clamp(&mut expanded);
            let fe = f(&expanded);
            evals += 1;
            if fe < fr {
                simplex[worst] = expanded;
                fv[worst] = fe;
            } else {
                simplex[worst] = reflected;
                fv[worst] = fr;
            }
        } else if fr < fv[second_worst] {
            simplex[worst] = reflected;
            fv[worst] = fr;
        } else {
            let mut contracted: Vec<f64> = (0..s)
                .map(|k| centroid[k] + 0.5 * (simplex[worst][k] - centroid[k]))
                .collect();
            clamp(&mut contracted);
            let fc = f(&contracted);
            evals += 1;
            if fc < fv[worst] {
                simplex[worst] = contracted;
                fv[worst] = fc;
            } else {
                // Shrink toward the best vertex.
                let best_v = simplex[best].clone();
                for i in 0..=s {
                    if i == best {
                        continue;
                    }
                    for k in 0..s {
                        simplex[i][k] = best_v[k] + 0.5 * (simplex[i][k] - best_v[k]);
                    }
                    fv[i] = f(&simplex[i]);
                    evals += 1;
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=s {
        if fv[i] < fv[best] {
            best = i;
        }
    }
    (simplex[best].clone(), fv[best])
}
