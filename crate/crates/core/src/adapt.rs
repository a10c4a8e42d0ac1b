//! Joint-system assembly and adapted-feature computation.
//!
//! The displaced score for a (features, attributes) pair is
//!
//! ```text
//!   z_tᵀ W z_s − w1/2·‖z_t − φ‖² − w2/2·‖z_s − ψ‖² − w3/2·‖z_t‖² − w4/2·‖z_s‖²
//! ```
//!
//! maximized over the adapted pair (z_t, z_s). Stacking z = [z_t; z_s]
//! turns the maximization into a quadratic with the block matrix
//!
//! ```text
//!   H = [ (w1+w3)·I   −W        ]
//!       [ −Wᵀ         (w2+w4)·I ]
//! ```
//!
//! so that the objective is −½zᵀHz + zᵀg − h with g = [w1·φ; w2·ψ] and
//! h = w1/2·‖φ‖² + w2/2·‖ψ‖². When H is positive definite the unique
//! maximizer is z = H⁻¹g and the maximal score is ½gᵀH⁻¹g − h.
//!
//! H depends only on (W, ω), never on the pair, so one factorization is
//! reused across every pair scored against the same model.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::types::{stack, AdaptedPair, DomainSpec, OmegaParams, PairAssembly};

/// Maximum of the row and column ℓ1 norms of a matrix.
///
/// Whenever both diagonal block weights of the joint system are larger
/// than this bound, the system is strictly diagonally dominant and
/// therefore positive definite.
pub fn row_col_l1_bound(w: &DMatrix<f64>) -> f64 {
    let row_max = (0..w.nrows())
        .map(|i| w.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let col_max = (0..w.ncols())
        .map(|j| w.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    row_max.max(col_max)
}

enum Factorization {
    Spd(Cholesky<f64, Dyn>),
    Eigen(SymmetricEigen<f64, Dyn>),
}

/// The assembled block system for one (W, ω) model: the matrix, its
/// factorization, and definiteness diagnostics.
pub struct JointSystem {
    matrix: DMatrix<f64>,
    factorization: Factorization,
    omega: OmegaParams,
    feat_dim: usize,
    attr_dim: usize,
    delta_w: f64,
    eig_min: f64,
    eig_max: f64,
    is_pd: bool,
    is_diag_dominant: bool,
}

impl JointSystem {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn omega(&self) -> &OmegaParams {
        &self.omega
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn dim(&self) -> usize {
        self.feat_dim + self.attr_dim
    }

    /// Maximum row/column ℓ1 norm of the weight matrix.
    pub fn delta_w(&self) -> f64 {
        self.delta_w
    }

    pub fn eig_min(&self) -> f64 {
        self.eig_min
    }

    pub fn eig_max(&self) -> f64 {
        self.eig_max
    }

    pub fn is_pd(&self) -> bool {
        self.is_pd
    }

    pub fn is_diag_dominant(&self) -> bool {
        self.is_diag_dominant
    }

    /// Solves `H·z = rhs` on the positive-definite path.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rhs(rhs)?;
        if !self.is_pd {
            return Err(Error::NotPositiveDefinite {
                eig_min: self.eig_min,
            });
        }
        Ok(match &self.factorization {
            Factorization::Spd(chol) => chol.solve(rhs),
            // Definite per the eigenvalue indicator but too close to
            // singular for the Cholesky routine; solve in the eigenbasis.
            Factorization::Eigen(eigen) => pseudo_solve(eigen, rhs),
        })
    }

    /// Least-squares solve through the pseudo-inverse; valid for any
    /// symmetric system. Diagnostics path only.
    pub fn solve_least_squares(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_rhs(rhs)?;
        Ok(match &self.factorization {
            Factorization::Spd(chol) => chol.solve(rhs),
            Factorization::Eigen(eigen) => pseudo_solve(eigen, rhs),
        })
    }

    fn check_rhs(&self, rhs: &DVector<f64>) -> Result<()> {
        if rhs.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "right-hand side length {} != system dimension {}",
                rhs.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_pair(&self, pair: &PairAssembly) -> Result<()> {
        if pair.feat_dim() != self.feat_dim || pair.attr_dim() != self.attr_dim {
            return Err(Error::Dimension(format!(
                "pair dims ({}, {}) do not match system dims ({}, {})",
                pair.feat_dim(),
                pair.attr_dim(),
                self.feat_dim,
                self.attr_dim
            )));
        }
        Ok(())
    }
}

fn pseudo_solve(eigen: &SymmetricEigen<f64, Dyn>, rhs: &DVector<f64>) -> DVector<f64> {
    let values = &eigen.eigenvalues;
    let vectors = &eigen.eigenvectors;
    let cutoff = values.amax() * f64::EPSILON * values.len() as f64;
    let mut coeffs = vectors.tr_mul(rhs);
    for (c, lam) in coeffs.iter_mut().zip(values.iter()) {
        if lam.abs() > cutoff {
            *c /= lam;
        } else {
            *c = 0.0;
        }
    }
    vectors * coeffs
}

/// Builds the block system for `(w, omega)`, computes its eigenvalue
/// range and dominance diagnostics, and factorizes it for later solves.
pub fn assemble_joint_system(w: &DMatrix<f64>, omega: &OmegaParams) -> Result<JointSystem> {
    let (feat_dim, attr_dim) = (w.nrows(), w.ncols());
    if feat_dim == 0 || attr_dim == 0 {
        return Err(Error::Invalid("weight matrix is empty".into()));
    }
    if !w.iter().all(|x| x.is_finite()) {
        return Err(Error::Invalid(
            "weight matrix has non-finite entries".into(),
        ));
    }
    let n = feat_dim + attr_dim;
    let (w13, w24) = (omega.w13(), omega.w24());
    let mut h = DMatrix::<f64>::zeros(n, n);
    for i in 0..feat_dim {
        h[(i, i)] = w13;
    }
    for j in 0..attr_dim {
        h[(feat_dim + j, feat_dim + j)] = w24;
    }
    for i in 0..feat_dim {
        for j in 0..attr_dim {
            h[(i, feat_dim + j)] = -w[(i, j)];
            h[(feat_dim + j, i)] = -w[(i, j)];
        }
    }

    let delta_w = row_col_l1_bound(w);
    let values = h.clone().symmetric_eigenvalues();
    let eig_min = values.min();
    let eig_max = values.max();
    let is_pd = eig_min > 0.0;
    let is_diag_dominant = if delta_w > 0.0 {
        w13 > delta_w && w24 > delta_w
    } else {
        true
    };

    let factorization = if is_pd {
        match h.clone().cholesky() {
            Some(chol) => Factorization::Spd(chol),
            None => Factorization::Eigen(SymmetricEigen::new(h.clone())),
        }
    } else {
        Factorization::Eigen(SymmetricEigen::new(h.clone()))
    };

    Ok(JointSystem {
        matrix: h,
        factorization,
        omega: *omega,
        feat_dim,
        attr_dim,
        delta_w,
        eig_min,
        eig_max,
        is_pd,
        is_diag_dominant,
    })
}

/// Stacks the weighted anchors of one pair and its constant anchor
/// energy: `rhs = [w1·φ; w2·ψ]`, `offset = w1/2·‖φ‖² + w2/2·‖ψ‖²`.
pub fn assemble_pair(
    features: &DVector<f64>,
    attributes: &DVector<f64>,
    omega: &OmegaParams,
) -> PairAssembly {
    let rhs = stack(&(features * omega.w1()), &(attributes * omega.w2()));
    let offset =
        0.5 * omega.w1() * features.norm_squared() + 0.5 * omega.w2() * attributes.norm_squared();
    PairAssembly::from_parts(rhs, offset, features.len())
}

/// Displaced score at a given adapted pair.
pub fn objective_value(
    w: &DMatrix<f64>,
    omega: &OmegaParams,
    features: &DVector<f64>,
    attributes: &DVector<f64>,
    target: &DVector<f64>,
    source: &DVector<f64>,
) -> Result<f64> {
    if target.len() != w.nrows() || features.len() != w.nrows() {
        return Err(Error::Dimension(format!(
            "target-side lengths ({}, {}) do not match weight rows {}",
            target.len(),
            features.len(),
            w.nrows()
        )));
    }
    if source.len() != w.ncols() || attributes.len() != w.ncols() {
        return Err(Error::Dimension(format!(
            "source-side lengths ({}, {}) do not match weight columns {}",
            source.len(),
            attributes.len(),
            w.ncols()
        )));
    }
    let bilinear = target.dot(&(w * source));
    let anchor_t = (target - features).norm_squared();
    let anchor_s = (source - attributes).norm_squared();
    Ok(bilinear
        - 0.5 * omega.w1() * anchor_t
        - 0.5 * omega.w2() * anchor_s
        - 0.5 * omega.w3() * target.norm_squared()
        - 0.5 * omega.w4() * source.norm_squared())
}

/// Score at the stacked vector, computed from the system and pair
/// constants: −½zᵀHz + zᵀg − h.
fn quadratic_objective(system: &JointSystem, pair: &PairAssembly, z: &DVector<f64>) -> f64 {
    -0.5 * z.dot(&(system.matrix() * z)) + z.dot(&pair.rhs) - pair.offset
}

/// Unique maximizer of the displaced score through the factorized
/// system. Requires a positive-definite system.
pub fn adapt_closed_form(system: &JointSystem, pair: &PairAssembly) -> Result<AdaptedPair> {
    system.check_pair(pair)?;
    let z = system.solve(&pair.rhs)?;
    Ok(split_pair(system, pair, z, false))
}

/// Closed-form solve that falls back to the pseudo-inverse on a
/// non-definite system. The result carries `via_pseudo_inverse = true`
/// on that path; scores from it are diagnostics, not similarities.
pub fn adapt_closed_form_with_fallback(
    system: &JointSystem,
    pair: &PairAssembly,
) -> Result<AdaptedPair> {
    system.check_pair(pair)?;
    let z = system.solve_least_squares(&pair.rhs)?;
    let mut adapted = split_pair(system, pair, z, !system.is_pd());
    adapted.via_pseudo_inverse = !system.is_pd();
    Ok(adapted)
}

fn split_pair(
    system: &JointSystem,
    pair: &PairAssembly,
    z: DVector<f64>,
    via_pseudo_inverse: bool,
) -> AdaptedPair {
    let objective = quadratic_objective(system, pair, &z);
    let target = z.rows(0, system.feat_dim()).into_owned();
    let source = z.rows(system.feat_dim(), system.attr_dim()).into_owned();
    let mut adapted = AdaptedPair::from_split(target, source, objective);
    adapted.via_pseudo_inverse = via_pseudo_inverse;
    adapted
}

/// Options for the alternating solver.
#[derive(Debug, Clone)]
pub struct AoOptions {
    pub domain: DomainSpec,
    /// Initial adapted source feature; defaults to the attribute anchor.
    pub init: Option<DVector<f64>>,
    /// Stop when the max-norm change of the stacked iterate over one
    /// sweep falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AoOptions {
    fn default() -> Self {
        Self {
            domain: DomainSpec::unbounded(),
            init: None,
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

fn project_ball(v: &mut DVector<f64>, radius: Option<f64>) {
    if let Some(r) = radius {
        let norm = v.norm();
        if norm > r {
            if r == 0.0 {
                v.fill(0.0);
            } else {
                *v *= r / norm;
            }
        }
    }
}

/// Alternating maximization of the displaced score. Each half-step
/// solves its block exactly (then projects onto the norm ball when the
/// domain is bounded), so the per-sweep objective trace is
/// non-decreasing. Converges to the global maximizer when the joint
/// system is positive definite; with indefinite systems on unbounded
/// domains the iterates may grow without bound, which is reported as a
/// numerical error.
pub fn adapt_alternating(
    w: &DMatrix<f64>,
    omega: &OmegaParams,
    features: &DVector<f64>,
    attributes: &DVector<f64>,
    opts: &AoOptions,
) -> Result<AdaptedPair> {
    if features.len() != w.nrows() || attributes.len() != w.ncols() {
        return Err(Error::Dimension(format!(
            "anchors ({}, {}) do not match weight shape {}x{}",
            features.len(),
            attributes.len(),
            w.nrows(),
            w.ncols()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid(format!("tol = {} must be > 0", opts.tol)));
    }
    if opts.max_iter == 0 {
        return Err(Error::Invalid("max_iter must be >= 1".into()));
    }
    for (name, r) in [
        ("target", opts.domain.target_radius),
        ("source", opts.domain.source_radius),
    ] {
        if let Some(r) = r {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::Invalid(format!(
                    "{name} radius {r} must be finite and >= 0"
                )));
            }
        }
    }

    let (w13, w24) = (omega.w13(), omega.w24());
    let mut source = match &opts.init {
        Some(init) => {
            if init.len() != w.ncols() {
                return Err(Error::Dimension(format!(
                    "init length {} != source dimension {}",
                    init.len(),
                    w.ncols()
                )));
            }
            init.clone()
        }
        None => attributes.clone(),
    };
    project_ball(&mut source, opts.domain.source_radius);

    let mut target = DVector::<f64>::zeros(w.nrows());
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut trace = Vec::new();
    let mut converged = false;

    for sweep in 0..opts.max_iter {
        let mut new_target = (features * omega.w1() + w * &source) / w13;
        project_ball(&mut new_target, opts.domain.target_radius);
        let mut new_source = (attributes * omega.w2() + w.tr_mul(&new_target)) / w24;
        project_ball(&mut new_source, opts.domain.source_radius);

        if !new_target.iter().all(|x| x.is_finite()) || !new_source.iter().all(|x| x.is_finite())
        {
            return Err(Error::Numerical(format!(
                "alternating optimization diverged at sweep {sweep}: non-finite iterate \
                 (system is likely not positive definite on an unbounded domain)"
            )));
        }

        trace.push(objective_value(
            w, omega, features, attributes, &new_target, &new_source,
        )?);

        if let Some((pt, ps)) = &prev {
            let change = (&new_target - pt).amax().max((&new_source - ps).amax());
            if change < opts.tol {
                target = new_target;
                source = new_source;
                converged = true;
                break;
            }
        }
        prev = Some((new_target.clone(), new_source.clone()));
        target = new_target;
        source = new_source;
    }

    let objective = objective_value(w, omega, features, attributes, &target, &source)?;
    let mut adapted = AdaptedPair::from_split(target, source, objective);
    adapted.trace = Some(trace);
    adapted.converged = converged;
    Ok(adapted)
}

/// Maximal displaced score for a pair: ½·gᵀH⁻¹g − h via one solve.
pub fn similarity(system: &JointSystem, pair: &PairAssembly) -> Result<f64> {
    system.check_pair(pair)?;
    let z = system.solve(&pair.rhs)?;
    Ok(0.5 * pair.rhs.dot(&z) - pair.offset)
}

/// Plain bilinear compatibility φᵀWψ — the limit of the adaptive score
/// as the anchor weights grow and the shrinkage weights vanish. Used as
/// a baseline.
pub fn bilinear_limit(
    w: &DMatrix<f64>,
    features: &DVector<f64>,
    attributes: &DVector<f64>,
) -> Result<f64> {
    if features.len() != w.nrows() || attributes.len() != w.ncols() {
        return Err(Error::Dimension(format!(
            "anchors ({}, {}) do not match weight shape {}x{}",
            features.len(),
            attributes.len(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(features.dot(&(w * attributes)))
}
