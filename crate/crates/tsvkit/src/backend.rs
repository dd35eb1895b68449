//! Speaker-verification backend: LDA, length normalization, Gaussian PLDA
//! with EM training and log-likelihood-ratio scoring, adaptive s-norm, and
//! the EER/DCF metrics, plus the plain-text trial-list and score-file
//! formats.
//!
//! Scoring uses a simultaneous diagonalization of the between/within
//! covariances, which reduces each verification LLR to a sum of independent
//! per-dimension terms; tests verify it against an explicit dense
//! block-covariance oracle, which evaluates the same ratio from first
//! principles.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Relative ridge added to within-class scatter (scaled by `trace/d`).
const SCATTER_RIDGE: f64 = 1e-6;

/// Standard deviations in adaptive s-norm are floored at this value.
const SNORM_SIGMA_FLOOR: f64 = 1e-6;

// ---- shared small helpers -------------------------------------------------------

/// Stacks embeddings as matrix columns, validating consistent dimensions.
fn to_columns(op: &'static str, embeddings: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if embeddings.is_empty() {
        return Err(Error::InvalidArg {
            op,
            detail: "no embeddings".into(),
        });
    }
    let d = embeddings[0].len();
    if d == 0 {
        return Err(Error::InvalidArg {
            op,
            detail: "zero-dimensional embeddings".into(),
        });
    }
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != d {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("embedding {i} has dim {}, expected {d}", e.len()),
            });
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArg {
                op,
                detail: format!("embedding {i} contains a non-finite value"),
            });
        }
    }
    Ok(DMatrix::from_fn(d, embeddings.len(), |r, c| embeddings[c][r]))
}

fn group_by_label(op: &'static str, n: usize, labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{n} embeddings but {} labels", labels.len()),
        });
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    Ok(groups)
}

fn ln_det_from_cholesky(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    chol.l_dirty()
        .diagonal()
        .iter()
        .map(|v| v.ln())
        .sum::<f64>()
        * 2.0
}

// ---- LDA ------------------------------------------------------------------------

/// Fitted linear discriminant projection: centering mean plus the top
/// generalized between/within scatter directions, one per output row.
#[derive(Debug, Clone)]
pub struct LdaModel {
    mean: DVector<f64>,
    projection: DMatrix<f64>,
}

impl LdaModel {
    pub fn input_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.projection.nrows()
    }

    /// Centers and projects one embedding.
    pub fn project(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "lda_project",
                detail: format!(
                    "embedding has dim {}, model expects {}",
                    embedding.len(),
                    self.input_dim()
                ),
            });
        }
        let x = DVector::from_column_slice(embedding) - &self.mean;
        Ok((&self.projection * x).iter().copied().collect())
    }
}

/// Fits LDA by the generalized eigenproblem of between-class versus
/// within-class scatter. The within scatter is regularized by
/// `1e−6·(trace/d)·I` so rank-deficient toy sets stay solvable; directions
/// are unit-normalized with their largest-magnitude component made positive,
/// which fixes an otherwise arbitrary sign.
pub fn fit_lda(embeddings: &[Vec<f64>], labels: &[usize], out_dim: usize) -> Result<LdaModel> {
    let x = to_columns("fit_lda", embeddings)?;
    let groups = group_by_label("fit_lda", embeddings.len(), labels)?;
    let (d, n) = (x.nrows(), x.ncols());
    if groups.len() < 2 {
        return Err(Error::InvalidArg {
            op: "fit_lda",
            detail: format!("needs ≥ 2 speakers, got {}", groups.len()),
        });
    }
    for (label, idx) in &groups {
        if idx.len() < 2 {
            return Err(Error::InvalidArg {
                op: "fit_lda",
                detail: format!("speaker {label} has {} sample(s), needs ≥ 2", idx.len()),
            });
        }
    }
    let max_dim = (groups.len() - 1).min(d);
    if out_dim == 0 || out_dim > max_dim {
        return Err(Error::InvalidArg {
            op: "fit_lda",
            detail: format!(
                "out_dim {out_dim} not in 1..={max_dim} (classes − 1 = {}, input dim = {d})",
                groups.len() - 1
            ),
        });
    }

    let mean = x.column_mean();
    let mut s_w = DMatrix::zeros(d, d);
    let mut s_b = DMatrix::zeros(d, d);
    for idx in groups.values() {
        let mut class_mean = DVector::zeros(d);
        for &i in idx {
            class_mean += x.column(i);
        }
        class_mean /= idx.len() as f64;
        for &i in idx {
            let dev = x.column(i) - &class_mean;
            s_w += &dev * dev.transpose();
        }
        let offset = &class_mean - &mean;
        s_b += (&offset * offset.transpose()) * idx.len() as f64;
    }
    let _ = n;

    let trace = s_w.trace();
    let ridge = if trace > 0.0 {
        SCATTER_RIDGE * trace / d as f64
    } else {
        SCATTER_RIDGE
    };
    for i in 0..d {
        s_w[(i, i)] += ridge;
    }

    let chol = s_w.cholesky().ok_or_else(|| {
        Error::Backend("within-class scatter not positive definite after regularization".into())
    })?;
    let l = chol.l();
    // M = L⁻¹·S_b·L⁻ᵀ, symmetric; the generalized problem becomes ordinary.
    let half = l.solve_lower_triangular(&s_b).ok_or_else(|| {
        Error::Backend("triangular solve failed while whitening between-class scatter".into())
    })?;
    let m = l
        .solve_lower_triangular(&half.transpose())
        .ok_or_else(|| Error::Backend("triangular solve failed".into()))?;
    let m_sym = (&m + m.transpose()) * 0.5;
    let eig = m_sym.symmetric_eigen();

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let lt = l.transpose();
    let mut projection = DMatrix::zeros(out_dim, d);
    for (row, &k) in order.iter().take(out_dim).enumerate() {
        let u = eig.eigenvectors.column(k).into_owned();
        let mut w = lt
            .solve_upper_triangular(&u)
            .ok_or_else(|| Error::Backend("triangular solve failed".into()))?;
        let norm = w.norm();
        if norm > 0.0 {
            w /= norm;
        }
        // Deterministic sign: largest-magnitude component positive.
        let pivot = w.iter().enumerate().fold(0usize, |best, (i, v)| {
            if v.abs() > w[best].abs() {
                i
            } else {
                best
            }
        });
        if w[pivot] < 0.0 {
            w = -w;
        }
        projection.row_mut(row).copy_from(&w.transpose());
    }
    Ok(LdaModel { mean, projection })
}

/// Scales an embedding to unit Euclidean norm. Errors on the zero vector.
pub fn length_normalize(embedding: &[f64]) -> Result<Vec<f64>> {
    let norm = embedding.iter().map(|&v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidArg {
            op: "length_normalize",
            detail: format!("cannot normalize a vector of norm {norm}"),
        });
    }
    Ok(embedding.iter().map(|&v| v / norm).collect())
}

/// Per-speaker mean embeddings in ascending label order (the adaptive
/// s-norm cohort).
pub fn speaker_means(embeddings: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Vec<f64>>> {
    let x = to_columns("speaker_means", embeddings)?;
    let groups = group_by_label("speaker_means", embeddings.len(), labels)?;
    let d = x.nrows();
    let mut means = Vec::with_capacity(groups.len());
    for idx in groups.values() {
        let mut m = DVector::zeros(d);
        for &i in idx {
            m += x.column(i);
        }
        m /= idx.len() as f64;
        means.push(m.iter().copied().collect());
    }
    Ok(means)
}

// ---- PLDA -----------------------------------------------------------------------

/// Gaussian PLDA model `e = m + V·h + ε`, `h ~ N(0, I_q)`, `ε ~ N(0, Σ)`.
#[derive(Debug, Clone)]
pub struct PldaModel {
    mean: DVector<f64>,
    v: DMatrix<f64>,
    sigma: DMatrix<f64>,
}

/// A fitted model plus its EM log-likelihood trajectory (length `iters + 1`:
/// the initial value and one entry after each update).
#[derive(Debug, Clone)]
pub struct PldaFit {
    pub model: PldaModel,
    pub log_likelihoods: Vec<f64>,
}

impl PldaModel {
    /// Builds a model from explicit parameters. `v_cols` holds the `q`
    /// columns of the speaker subspace; `sigma_rows` the `d` rows of the
    /// within covariance, which is symmetrized on entry.
    pub fn from_parts(mean: Vec<f64>, v_cols: &[Vec<f64>], sigma_rows: &[Vec<f64>]) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidArg {
                op: "plda_from_parts",
                detail: "zero-dimensional mean".into(),
            });
        }
        for (k, col) in v_cols.iter().enumerate() {
            if col.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "plda_from_parts",
                    detail: format!("subspace column {k} has dim {}, expected {d}", col.len()),
                });
            }
        }
        if sigma_rows.len() != d || sigma_rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch {
                op: "plda_from_parts",
                detail: format!("covariance must be {d}×{d}"),
            });
        }
        if v_cols.len() > d {
            return Err(Error::InvalidArg {
                op: "plda_from_parts",
                detail: format!("latent dim {} exceeds embedding dim {d}", v_cols.len()),
            });
        }
        let v = DMatrix::from_fn(d, v_cols.len(), |r, c| v_cols[c][r]);
        let sigma_raw = DMatrix::from_fn(d, d, |r, c| sigma_rows[r][c]);
        let sigma = (&sigma_raw + sigma_raw.transpose()) * 0.5;
        Ok(PldaModel {
            mean: DVector::from_vec(mean),
            v,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.mean.iter().copied().collect()
    }

    /// The `q` columns of the speaker subspace.
    pub fn v_columns(&self) -> Vec<Vec<f64>> {
        (0..self.v.ncols())
            .map(|c| self.v.column(c).iter().copied().collect())
            .collect()
    }

    /// The `d` rows of the within-speaker covariance.
    pub fn sigma_rows(&self) -> Vec<Vec<f64>> {
        (0..self.sigma.nrows())
            .map(|r| self.sigma.row(r).iter().copied().collect())
            .collect()
    }

    /// Marginal log-likelihood of a labeled embedding set under this model,
    /// integrating out each speaker's latent variable.
    pub fn log_likelihood(&self, embeddings: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let x = to_columns("plda_log_likelihood", embeddings)?;
        if x.nrows() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "plda_log_likelihood",
                detail: format!("embeddings have dim {}, model has {}", x.nrows(), self.dim()),
            });
        }
        let groups = group_by_label("plda_log_likelihood", embeddings.len(), labels)?;
        let mut centered = x;
        for mut col in centered.column_iter_mut() {
            col -= &self.mean;
        }
        grouped_log_likelihood(&self.v, &self.sigma, &centered, &groups)
    }

    /// Prepares the diagonalized fast scorer.
    pub fn scorer(&self) -> Result<PldaScorer> {
        let chol = self.sigma.clone().cholesky().ok_or_else(|| {
            Error::Backend("PLDA within covariance not positive definite".into())
        })?;
        let l = chol.l();
        let b = &self.v * self.v.transpose();
        // Ψ = eigenvalues of L⁻¹·B·L⁻ᵀ: per-dimension speaker variance once
        // the within covariance is whitened to identity.
        let half = l
            .solve_lower_triangular(&b)
            .ok_or_else(|| Error::Backend("triangular solve failed".into()))?;
        let m = l
            .solve_lower_triangular(&half.transpose())
            .ok_or_else(|| Error::Backend("triangular solve failed".into()))?;
        let m_sym = (&m + m.transpose()) * 0.5;
        let eig = m_sym.symmetric_eigen();
        let psi = eig.eigenvalues.map(|v| v.max(0.0));
        Ok(PldaScorer {
            mean: self.mean.clone(),
            l,
            u: eig.eigenvectors,
            psi,
        })
    }
}

/// Fast verification scorer: embeddings are mapped into coordinates where
/// the within covariance is identity and the speaker covariance diagonal
/// `Ψ`, so the two-covariance LLR separates per dimension.
#[derive(Debug, Clone)]
pub struct PldaScorer {
    mean: DVector<f64>,
    l: DMatrix<f64>,
    u: DMatrix<f64>,
    psi: DVector<f64>,
}

impl PldaScorer {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Maps an embedding into the diagonalized coordinates.
    pub fn transform(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "score_plda",
                detail: format!(
                    "embedding has dim {}, model has {}",
                    embedding.len(),
                    self.dim()
                ),
            });
        }
        let x = DVector::from_column_slice(embedding) - &self.mean;
        let y = self
            .l
            .solve_lower_triangular(&x)
            .ok_or_else(|| Error::Backend("triangular solve failed".into()))?;
        Ok((self.u.transpose() * y).iter().copied().collect())
    }

    /// LLR of same-speaker versus different-speaker for two transformed
    /// embeddings, accumulated over independent dimensions.
    pub fn score_transformed(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut llr = 0.0;
        for k in 0..self.psi.len() {
            let psi = self.psi[k];
            let (u1, u2) = (a[k], b[k]);
            let det_same = 2.0 * psi + 1.0;
            let sq = u1 * u1 + u2 * u2;
            let quad_same = ((psi + 1.0) * sq - 2.0 * psi * u1 * u2) / det_same;
            let quad_diff = sq / (psi + 1.0);
            let ln_det_same = det_same.ln();
            let ln_det_diff = 2.0 * (psi + 1.0).ln();
            llr += -0.5 * (ln_det_same - ln_det_diff) - 0.5 * (quad_same - quad_diff);
        }
        llr
    }

    pub fn score(&self, e_ref: &[f64], e_test: &[f64]) -> Result<f64> {
        let a = self.transform(e_ref)?;
        let b = self.transform(e_test)?;
        Ok(self.score_transformed(&a, &b))
    }
}

/// Convenience wrapper: builds the scorer and scores one pair.
pub fn score_plda(model: &PldaModel, e_ref: &[f64], e_test: &[f64]) -> Result<f64> {
    model.scorer()?.score(e_ref, e_test)
}

/// Marginal log-likelihood with data already centered and grouped.
fn grouped_log_likelihood(
    v: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    centered: &DMatrix<f64>,
    groups: &BTreeMap<usize, Vec<usize>>,
) -> Result<f64> {
    let d = centered.nrows() as f64;
    let q = v.ncols();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Backend("PLDA covariance not positive definite".into()))?;
    let ln_det_sigma = ln_det_from_cholesky(&chol);
    let solved = chol.solve(centered); // Σ⁻¹·X
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    let (sinv_v, phi) = if q > 0 {
        let sinv_v = chol.solve(v);
        let phi_raw = v.transpose() * &sinv_v;
        let phi = (&phi_raw + phi_raw.transpose()) * 0.5;
        (Some(sinv_v), Some(phi))
    } else {
        (None, None)
    };

    let mut ll = 0.0;
    for idx in groups.values() {
        let n = idx.len() as f64;
        let mut quad = 0.0;
        let mut s_i = DVector::zeros(centered.nrows());
        for &i in idx {
            quad += centered.column(i).dot(&solved.column(i));
            s_i += centered.column(i);
        }
        let mut term = n * d * ln_2pi + n * ln_det_sigma + quad;
        if let (Some(sinv_v), Some(phi)) = (&sinv_v, &phi) {
            let lambda = DMatrix::identity(q, q) + phi * n;
            let lam_chol = lambda
                .cholesky()
                .ok_or_else(|| Error::Backend("PLDA posterior not positive definite".into()))?;
            let b = sinv_v.transpose() * &s_i;
            let correction = b.dot(&lam_chol.solve(&b));
            term += ln_det_from_cholesky(&lam_chol) - correction;
        }
        ll += -0.5 * term;
    }
    Ok(ll)
}

/// Fits the PLDA model by EM. The trajectory of marginal log-likelihoods is
/// returned alongside the model; exact EM makes it non-decreasing, which the
/// test suite asserts to a −1e−8 tolerance.
///
/// Initialization: `m` = data mean, `Σ0` = ridge-stabilized within-class
/// covariance, `V0` = top-`q` between-class eigendirections scaled by the
/// square root of their eigenvalues.
pub fn fit_plda(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    latent_dim: usize,
    iterations: usize,
) -> Result<PldaFit> {
    let x = to_columns("fit_plda", embeddings)?;
    let groups = group_by_label("fit_plda", embeddings.len(), labels)?;
    let (d, n) = (x.nrows(), x.ncols());
    if groups.len() < 2 {
        return Err(Error::InvalidArg {
            op: "fit_plda",
            detail: format!("needs ≥ 2 speakers, got {}", groups.len()),
        });
    }
    if latent_dim > d {
        return Err(Error::InvalidArg {
            op: "fit_plda",
            detail: format!("latent dim {latent_dim} exceeds embedding dim {d}"),
        });
    }

    let mean = x.column_mean();
    let mut centered = x;
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }

    // Per-speaker sufficient statistics and the total scatter.
    let stats: Vec<(f64, DVector<f64>)> = groups
        .values()
        .map(|idx| {
            let mut s = DVector::zeros(d);
            for &i in idx {
                s += centered.column(i);
            }
            (idx.len() as f64, s)
        })
        .collect();
    let c_total = &centered * centered.transpose();

    // Σ0: within-class covariance with a relative ridge.
    let mut s_w = DMatrix::zeros(d, d);
    for idx in groups.values() {
        let mut class_mean = DVector::zeros(d);
        for &i in idx {
            class_mean += centered.column(i);
        }
        class_mean /= idx.len() as f64;
        for &i in idx {
            let dev = centered.column(i) - &class_mean;
            s_w += &dev * dev.transpose();
        }
    }
    let mut sigma = s_w / n as f64;
    let trace = sigma.trace();
    let ridge = if trace > 0.0 {
        SCATTER_RIDGE * trace / d as f64
    } else {
        SCATTER_RIDGE
    };
    for i in 0..d {
        sigma[(i, i)] += ridge;
    }

    // V0 from the between-class covariance.
    let mut v = DMatrix::zeros(d, latent_dim);
    if latent_dim > 0 {
        let mut s_b = DMatrix::zeros(d, d);
        for (n_i, s_i) in &stats {
            let class_mean = s_i / *n_i;
            s_b += (&class_mean * class_mean.transpose()) * *n_i;
        }
        s_b /= n as f64;
        let eig = s_b.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (k, &src) in order.iter().take(latent_dim).enumerate() {
            let scale = eig.eigenvalues[src].max(SCATTER_RIDGE).sqrt();
            v.column_mut(k)
                .copy_from(&(eig.eigenvectors.column(src) * scale));
        }
    }

    let mut log_likelihoods = Vec::with_capacity(iterations + 1);
    log_likelihoods.push(grouped_log_likelihood(&v, &sigma, &centered, &groups)?);

    for _ in 0..iterations {
        if latent_dim == 0 {
            sigma = &c_total / n as f64;
            sigma = (&sigma + sigma.transpose()) * 0.5;
        } else {
            let chol = sigma
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Backend("PLDA covariance became degenerate".into()))?;
            let sinv_v = chol.solve(&v);
            let phi_raw = v.transpose() * &sinv_v;
            let phi = (&phi_raw + phi_raw.transpose()) * 0.5;

            let mut a = DMatrix::zeros(d, latent_dim);
            let mut bq = DMatrix::zeros(latent_dim, latent_dim);
            for (n_i, s_i) in &stats {
                let lambda = DMatrix::identity(latent_dim, latent_dim) + &phi * *n_i;
                let lam_chol = lambda.cholesky().ok_or_else(|| {
                    Error::Backend("PLDA posterior became degenerate".into())
                })?;
                let b = sinv_v.transpose() * s_i;
                let mu = lam_chol.solve(&b);
                let lam_inv = lam_chol.inverse();
                a += s_i * mu.transpose();
                bq += (lam_inv + &mu * mu.transpose()) * *n_i;
            }
            let bq_chol = bq
                .cholesky()
                .ok_or_else(|| Error::Backend("PLDA M-step system degenerate".into()))?;
            let v_new = bq_chol.solve(&a.transpose()).transpose();
            let sigma_raw = (&c_total - &v_new * a.transpose()) / n as f64;
            sigma = (&sigma_raw + sigma_raw.transpose()) * 0.5;
            v = v_new;
        }
        log_likelihoods.push(grouped_log_likelihood(&v, &sigma, &centered, &groups)?);
    }

    Ok(PldaFit {
        model: PldaModel { mean, v, sigma },
        log_likelihoods,
    })
}

// ---- adaptive s-norm ------------------------------------------------------------

/// Adaptive symmetric score normalization: statistics come from the `top_k`
/// highest cohort scores on each side, and the raw score is standardized
/// against both, `s' = ½[(s−μ_e)/σ_e + (s−μ_t)/σ_t]`, with σ floored at
/// 1e−6 so degenerate cohorts stay finite.
pub fn adaptive_snorm(
    raw: f64,
    enrol_cohort: &[f64],
    test_cohort: &[f64],
    top_k: usize,
) -> Result<f64> {
    if enrol_cohort.is_empty() || test_cohort.is_empty() {
        return Err(Error::InvalidArg {
            op: "adaptive_snorm",
            detail: "cohorts must be non-empty".into(),
        });
    }
    if top_k == 0 || top_k > enrol_cohort.len() || top_k > test_cohort.len() {
        return Err(Error::InvalidArg {
            op: "adaptive_snorm",
            detail: format!(
                "top_k {top_k} not in 1..={} (cohort sizes {}, {})",
                enrol_cohort.len().min(test_cohort.len()),
                enrol_cohort.len(),
                test_cohort.len()
            ),
        });
    }
    let side = |cohort: &[f64]| -> (f64, f64) {
        let mut sorted = cohort.to_vec();
        sorted.sort_unstable_by(|a, b| b.total_cmp(a));
        let top = &sorted[..top_k];
        let mu = top.iter().sum::<f64>() / top_k as f64;
        let var = top.iter().map(|&s| (s - mu) * (s - mu)).sum::<f64>() / top_k as f64;
        (mu, var.sqrt().max(SNORM_SIGMA_FLOOR))
    };
    let (mu_e, sigma_e) = side(enrol_cohort);
    let (mu_t, sigma_t) = side(test_cohort);
    Ok(0.5 * ((raw - mu_e) / sigma_e + (raw - mu_t) / sigma_t))
}

// ---- detection metrics ----------------------------------------------------------

/// Trial ground truth: same speaker (target) or different (nontarget).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        }
    }

    pub fn parse(s: &str) -> Option<TrialLabel> {
        match s {
            "target" => Some(TrialLabel::Target),
            "nontarget" => Some(TrialLabel::Nontarget),
            _ => None,
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Splits scores by label, validating finiteness and both classes present.
fn split_scores(
    op: &'static str,
    scores: &[f64],
    labels: &[TrialLabel],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{} scores but {} labels", scores.len(), labels.len()),
        });
    }
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for (&s, &l) in scores.iter().zip(labels) {
        if !s.is_finite() {
            return Err(Error::InvalidArg {
                op,
                detail: format!("non-finite score {s}"),
            });
        }
        match l {
            TrialLabel::Target => targets.push(s),
            TrialLabel::Nontarget => nontargets.push(s),
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::InvalidArg {
            op,
            detail: format!(
                "needs both classes: {} target(s), {} nontarget(s)",
                targets.len(),
                nontargets.len()
            ),
        });
    }
    targets.sort_unstable_by(f64::total_cmp);
    nontargets.sort_unstable_by(f64::total_cmp);
    Ok((targets, nontargets))
}

/// `(P_miss, P_fa)` at one threshold under the accept-iff-`score ≥ θ` rule,
/// from ascending-sorted score vectors.
fn rates_at(targets: &[f64], nontargets: &[f64], threshold: f64) -> (f64, f64) {
    let missed = targets.partition_point(|&s| s < threshold);
    let accepted_non = nontargets.len() - nontargets.partition_point(|&s| s < threshold);
    (
        missed as f64 / targets.len() as f64,
        accepted_non as f64 / nontargets.len() as f64,
    )
}

fn distinct_ascending(targets: &[f64], nontargets: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    all.sort_unstable_by(f64::total_cmp);
    all.dedup();
    all
}

/// Detection-tradeoff points `(P_miss, P_fa)`: the accept-all endpoint
/// `(0, 1)`, one point per distinct score threshold in ascending order, and
/// the reject-all endpoint `(1, 0)`.
pub fn det_points(scores: &[f64], labels: &[TrialLabel]) -> Result<Vec<(f64, f64)>> {
    let (targets, nontargets) = split_scores("det_points", scores, labels)?;
    let mut points = Vec::new();
    points.push((0.0, 1.0));
    for &theta in &distinct_ascending(&targets, &nontargets) {
        points.push(rates_at(&targets, &nontargets, theta));
    }
    points.push((1.0, 0.0));
    Ok(points)
}

/// Equal error rate: the miss/false-alarm crossing of the detection
/// tradeoff, convexly interpolated between the neighboring threshold points:
/// `t = (pf1−pm1)/((pf1−pm1)−(pf2−pm2))`, `EER = pm1 + t·(pm2−pm1)`.
pub fn compute_eer(scores: &[f64], labels: &[TrialLabel]) -> Result<f64> {
    let points = det_points(scores, labels)?;
    for w in points.windows(2) {
        let (pm1, pf1) = w[0];
        let (pm2, pf2) = w[1];
        if pm2 >= pf2 {
            let d1 = pf1 - pm1;
            let d2 = pf2 - pm2;
            let t = d1 / (d1 - d2);
            return Ok(pm1 + t * (pm2 - pm1));
        }
    }
    unreachable!("detection tradeoff always crosses between (0,1) and (1,0)");
}

/// Operating-point weights of the normalized detection cost function.
#[derive(Debug, Clone, Copy)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

/// NIST SRE'08 operating point.
pub const DCF08: DcfParams = DcfParams {
    p_target: 0.01,
    c_miss: 10.0,
    c_fa: 1.0,
};

/// NIST SRE'10 operating point.
pub const DCF10: DcfParams = DcfParams {
    p_target: 0.001,
    c_miss: 1.0,
    c_fa: 1.0,
};

/// Minimum normalized detection cost:
/// `min_θ [c_miss·P_miss·p + c_fa·P_fa·(1−p)] / min(c_miss·p, c_fa·(1−p))`,
/// swept over every distinct score plus one threshold above the maximum.
/// The accept-all and reject-all decisions are both in the sweep, so the
/// result never exceeds 1 (up to rounding).
pub fn compute_min_dcf(scores: &[f64], labels: &[TrialLabel], params: &DcfParams) -> Result<f64> {
    if !(params.p_target > 0.0 && params.p_target < 1.0) {
        return Err(Error::InvalidArg {
            op: "compute_min_dcf",
            detail: format!("p_target must lie in (0, 1), got {}", params.p_target),
        });
    }
    if params.c_miss <= 0.0 || params.c_fa <= 0.0 {
        return Err(Error::InvalidArg {
            op: "compute_min_dcf",
            detail: "costs must be positive".into(),
        });
    }
    let (targets, nontargets) = split_scores("compute_min_dcf", scores, labels)?;
    let denom = (params.c_miss * params.p_target).min(params.c_fa * (1.0 - params.p_target));
    let cost = |pm: f64, pf: f64| {
        (params.c_miss * pm * params.p_target + params.c_fa * pf * (1.0 - params.p_target)) / denom
    };
    let mut best = cost(1.0, 0.0); // threshold above the maximum: reject all
    for &theta in &distinct_ascending(&targets, &nontargets) {
        let (pm, pf) = rates_at(&targets, &nontargets, theta);
        best = best.min(cost(pm, pf));
    }
    Ok(best)
}

// ---- trial lists and score files --------------------------------------------------

/// One verification trial: enrollment utterance, test utterance, ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub enrol: String,
    pub test: String,
    pub label: TrialLabel,
}

/// One scored trial as written to a score file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub enrol: String,
    pub test: String,
    pub raw: f64,
    pub norm: f64,
}

/// Reads a trial list: UTF-8 lines `ENROL_ID TEST_ID target|nontarget`.
pub fn read_trial_list(path: &Path) -> Result<Vec<TrialRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |detail: String| Error::Format {
            kind: "trial list",
            path: path.display().to_string(),
            line: lineno + 1,
            detail,
        };
        if fields.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", fields.len())));
        }
        let label = TrialLabel::parse(fields[2])
            .ok_or_else(|| err(format!("unknown label `{}`", fields[2])))?;
        records.push(TrialRecord {
            enrol: fields[0].to_string(),
            test: fields[1].to_string(),
            label,
        });
    }
    Ok(records)
}

pub fn write_trial_list(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{} {} {}\n", r.enrol, r.test, r.label));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a score file: UTF-8 lines `ENROL_ID TEST_ID raw_score norm_score`.
/// Scores print in shortest round-trip form, so read → write reproduces the
/// file byte for byte.
pub fn read_score_file(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |detail: String| Error::Format {
            kind: "score file",
            path: path.display().to_string(),
            line: lineno + 1,
            detail,
        };
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, got {}", fields.len())));
        }
        let raw: f64 = fields[2]
            .parse()
            .map_err(|_| err(format!("bad raw score `{}`", fields[2])))?;
        let norm: f64 = fields[3]
            .parse()
            .map_err(|_| err(format!("bad normalized score `{}`", fields[3])))?;
        records.push(ScoreRecord {
            enrol: fields[0].to_string(),
            test: fields[1].to_string(),
            raw,
            norm,
        });
    }
    Ok(records)
}

pub fn write_score_file(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{} {} {} {}\n", r.enrol, r.test, r.raw, r.norm));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
