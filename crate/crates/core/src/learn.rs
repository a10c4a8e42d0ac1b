//! Weight-matrix training: margin-based learning over seen classes with
//! latent adapted features.
//!
//! The trained objective is `λ/2·‖W‖_F² + Σ_i ξ_i` where each slack is
//! the margin violation of the loss-augmented argmax over seen classes.
//! Because the latent features have a closed-form maximizer, the score
//! is a pointwise maximum of functions linear in W and its envelope
//! subgradient is the outer product of the adapted pair. Training runs
//! full-batch proximal subgradient descent with a dominance projection
//! after every step, so every intermediate system stays positive
//! definite.

use nalgebra::{DMatrix, DVector};

use crate::adapt::{
    adapt_closed_form, assemble_joint_system, assemble_pair, row_col_l1_bound, similarity,
    JointSystem,
};
use crate::error::{Error, Result};
use crate::types::{
    stack, ClassEmbedding, ClassId, Dataset, EmbeddedInstance, InstanceId, OmegaParams,
    RoundDiagnostics, TrainingState, WeightModel,
};

/// Knobs for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Frobenius regularization constant.
    pub lambda: f64,
    /// Rounds of latent re-estimation; the objective is recorded once
    /// per round.
    pub outer_iters: usize,
    /// Full-batch subgradient steps per round.
    pub inner_iters: usize,
    /// Initial learning rate, decayed as 1/(1+t) over global steps.
    /// `None` scales 0.1 by the mean anchor norms of the training data.
    pub step_size: Option<f64>,
    /// Slack of the dominance projection, in (0, 1).
    pub pd_margin: f64,
    /// Recorded for reproducibility; the full-batch path draws nothing.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            outer_iters: 6,
            inner_iters: 30,
            step_size: None,
            pd_margin: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Invalid(format!(
                "lambda = {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::Invalid(
                "outer_iters and inner_iters must be >= 1".into(),
            ));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Invalid(format!("step_size = {s} must be > 0")));
            }
        }
        if !(self.pd_margin > 0.0 && self.pd_margin < 1.0) {
            return Err(Error::Invalid(format!(
                "pd_margin = {} must lie in (0, 1)",
                self.pd_margin
            )));
        }
        Ok(())
    }
}

/// Multiclass 0/1 label cost.
pub fn zero_one_loss(y_true: ClassId, y: ClassId) -> f64 {
    if y_true == y {
        0.0
    } else {
        1.0
    }
}

fn check_system_matches(model: &WeightModel, system: &JointSystem) -> Result<()> {
    if model.feat_dim() != system.feat_dim() || model.attr_dim() != system.attr_dim() {
        return Err(Error::Dimension(format!(
            "system dims ({}, {}) do not match model dims ({}, {})",
            system.feat_dim(),
            system.attr_dim(),
            model.feat_dim(),
            model.attr_dim()
        )));
    }
    if model.omega != *system.omega() {
        return Err(Error::Invalid(
            "system was assembled with different omega than the model".into(),
        ));
    }
    Ok(())
}

/// Most violated seen class for one instance and the resulting slack.
///
/// Returns the argmax over seen classes of `loss + score` (ties broken
/// by smallest class label) and `max(0, loss(ŷ) + score(ŷ) − score(y_true))`.
pub fn loss_augmented_argmax(
    model: &WeightModel,
    system: &JointSystem,
    x: &EmbeddedInstance,
    y_true: ClassId,
    seen: &[ClassEmbedding],
) -> Result<(ClassId, f64)> {
    check_system_matches(model, system)?;
    if seen.is_empty() {
        return Err(Error::Invalid("empty seen class set".into()));
    }
    let mut order: Vec<&ClassEmbedding> = seen.iter().collect();
    order.sort_by_key(|c| c.label);
    if !order.iter().any(|c| c.label == y_true) {
        return Err(Error::Invalid(format!(
            "true class {y_true} is not among the seen classes"
        )));
    }

    let mut f_true = 0.0;
    let mut best: Option<(ClassId, f64)> = None;
    for class in order {
        let pair = assemble_pair(&x.features, &class.attributes, &model.omega);
        let f = similarity(system, &pair)?;
        if class.label == y_true {
            f_true = f;
        }
        let score = zero_one_loss(y_true, class.label) + f;
        if best.map(|(_, s)| score > s).unwrap_or(true) {
            best = Some((class.label, score));
        }
    }
    let (y_hat, best_score) = best.unwrap();
    Ok((y_hat, (best_score - f_true).max(0.0)))
}

fn slack_sum(
    model: &WeightModel,
    system: &JointSystem,
    data: &Dataset,
    seen: &[ClassEmbedding],
) -> Result<Vec<(InstanceId, f64)>> {
    let mut slacks = Vec::new();
    for x in data.training_instances() {
        let y_true = x.label.expect("training instances are labeled");
        let (_, slack) = loss_augmented_argmax(model, system, x, y_true, seen)?;
        slacks.push((x.id, slack));
    }
    Ok(slacks)
}

/// Regularized hinge objective `λ/2·‖W‖_F² + Σ_i ξ_i` over the training
/// instances of `data`.
pub fn hinge_objective(
    model: &WeightModel,
    system: &JointSystem,
    data: &Dataset,
    lambda: f64,
) -> Result<f64> {
    let seen = data.seen_classes();
    let slacks = slack_sum(model, system, data, &seen)?;
    let total: f64 = slacks.iter().map(|(_, s)| s).sum();
    Ok(0.5 * lambda * model.weights.norm_squared() + total)
}

/// Envelope subgradient of the hinge term for one instance: the outer
/// product of the adapted pair at the violating class minus the one at
/// the true class. Zero when the argmax is the true class.
pub fn subgradient_w(
    model: &WeightModel,
    system: &JointSystem,
    x: &EmbeddedInstance,
    y_true: &ClassEmbedding,
    y_hat: &ClassEmbedding,
) -> Result<DMatrix<f64>> {
    check_system_matches(model, system)?;
    let mut grad = DMatrix::zeros(model.feat_dim(), model.attr_dim());
    if y_true.label == y_hat.label {
        return Ok(grad);
    }
    let hat = adapt_closed_form(system, &assemble_pair(&x.features, &y_hat.attributes, &model.omega))?;
    let truth =
        adapt_closed_form(system, &assemble_pair(&x.features, &y_true.attributes, &model.omega))?;
    add_outer(&mut grad, &hat.target, &hat.source, 1.0);
    add_outer(&mut grad, &truth.target, &truth.source, -1.0);
    Ok(grad)
}

fn add_outer(grad: &mut DMatrix<f64>, t: &DVector<f64>, s: &DVector<f64>, sign: f64) {
    for j in 0..s.len() {
        let sj = sign * s[j];
        for i in 0..t.len() {
            grad[(i, j)] += t[i] * sj;
        }
    }
}

/// Rescales the weight matrix just enough that the assembled system is
/// strictly diagonally dominant (hence positive definite), leaving it
/// untouched when it already is within the margin.
pub fn project_pd(w: &DMatrix<f64>, omega: &OmegaParams, pd_margin: f64) -> DMatrix<f64> {
    debug_assert!(pd_margin > 0.0 && pd_margin < 1.0);
    let delta = row_col_l1_bound(w);
    let bound = (1.0 - pd_margin) * omega.w13().min(omega.w24());
    if delta <= bound {
        w.clone()
    } else {
        w * (bound / delta)
    }
}

// Batched scorer for one fixed system. The joint solve is linear in its
// right-hand side, so the adapted pair splits into one per-instance and
// one per-class solve:
//   z(x, y) = w1·H⁻¹[φ_x; 0] + w2·H⁻¹[0; ψ_y].
// This turns the n·k scores of a full batch into n + k solves.
struct BatchScorer {
    w1: f64,
    w2: f64,
    feat_dim: usize,
    attr_dim: usize,
    inst_solved: Vec<DVector<f64>>,
    class_solved: Vec<DVector<f64>>,
    inst_offset: Vec<f64>,
    class_offset: Vec<f64>,
}

impl BatchScorer {
    fn new(
        system: &JointSystem,
        instances: &[&EmbeddedInstance],
        classes: &[ClassEmbedding],
    ) -> Result<Self> {
        let (dt, ds) = (system.feat_dim(), system.attr_dim());
        let omega = system.omega();
        let zero_t = DVector::zeros(dt);
        let zero_s = DVector::zeros(ds);
        let mut inst_solved = Vec::with_capacity(instances.len());
        let mut inst_offset = Vec::with_capacity(instances.len());
        for x in instances {
            inst_solved.push(system.solve(&stack(&x.features, &zero_s))?);
            inst_offset.push(0.5 * omega.w1() * x.features.norm_squared());
        }
        let mut class_solved = Vec::with_capacity(classes.len());
        let mut class_offset = Vec::with_capacity(classes.len());
        for c in classes {
            class_solved.push(system.solve(&stack(&zero_t, &c.attributes))?);
            class_offset.push(0.5 * omega.w2() * c.attributes.norm_squared());
        }
        Ok(Self {
            w1: omega.w1(),
            w2: omega.w2(),
            feat_dim: dt,
            attr_dim: ds,
            inst_solved,
            class_solved,
            inst_offset,
            class_offset,
        })
    }

    fn score(&self, xi: usize, yi: usize, x: &EmbeddedInstance, c: &ClassEmbedding) -> f64 {
        let a = &self.inst_solved[xi];
        let b = &self.class_solved[yi];
        let p = x.features.dot(&a.rows(0, self.feat_dim));
        let cross1 = x.features.dot(&b.rows(0, self.feat_dim));
        let cross2 = c.attributes.dot(&a.rows(self.feat_dim, self.attr_dim));
        let q = c.attributes.dot(&b.rows(self.feat_dim, self.attr_dim));
        0.5 * (self.w1 * self.w1 * p
            + self.w1 * self.w2 * (cross1 + cross2)
            + self.w2 * self.w2 * q)
            - self.inst_offset[xi]
            - self.class_offset[yi]
    }

    fn adapted(&self, xi: usize, yi: usize) -> (DVector<f64>, DVector<f64>) {
        let z = &self.inst_solved[xi] * self.w1 + &self.class_solved[yi] * self.w2;
        (
            z.rows(0, self.feat_dim).into_owned(),
            z.rows(self.feat_dim, self.attr_dim).into_owned(),
        )
    }
}

/// Trains the weight matrix on the seen classes of `data` with fixed
/// penalty weights.
///
/// Each outer round re-assembles the joint system and records the hinge
/// objective of the running iterate; inner steps take full-batch
/// envelope subgradients of the slack term, apply the regularizer
/// proximally, and re-project onto the dominance ball. Subgradient
/// descent is not monotone, so the returned model is the best recorded
/// iterate and the final trace entry is its objective. Deterministic:
/// instances and classes are always visited in ascending id order.
pub fn train(
    data: &Dataset,
    omega_star: &OmegaParams,
    config: &TrainConfig,
) -> Result<(WeightModel, TrainingState)> {
    config.validate()?;
    let seen = data.seen_classes();
    if seen.len() < 2 {
        return Err(Error::Invalid(format!(
            "training needs at least two seen classes, got {}",
            seen.len()
        )));
    }
    let instances = data.training_instances();
    if instances.is_empty() {
        return Err(Error::Invalid("no training instances".into()));
    }
    let (dt, ds) = (data.feat_dim(), data.attr_dim());

    let label_index: std::collections::BTreeMap<ClassId, usize> = seen
        .iter()
        .enumerate()
        .map(|(i, c)| (c.label, i))
        .collect();

    let eta0 = config.step_size.unwrap_or_else(|| {
        let mean_feat =
            instances.iter().map(|x| x.features.norm()).sum::<f64>() / instances.len() as f64;
        let mean_attr =
            seen.iter().map(|c| c.attributes.norm()).sum::<f64>() / seen.len() as f64;
        0.1 / (mean_feat * mean_attr).max(1e-12)
    });

    let mut w = DMatrix::<f64>::zeros(dt, ds);
    let mut trace: Vec<(usize, f64)> = Vec::with_capacity(config.outer_iters + 1);
    let mut diagnostics: Vec<RoundDiagnostics> = Vec::with_capacity(config.outer_iters + 1);
    let mut running: Vec<f64> = Vec::with_capacity(config.outer_iters + 1);
    let mut best: Option<(f64, DMatrix<f64>, Vec<(InstanceId, f64)>)> = None;
    let mut step = 0usize;

    let evaluate = |round: usize,
                    w: &DMatrix<f64>,
                    best: &mut Option<(f64, DMatrix<f64>, Vec<(InstanceId, f64)>)>|
     -> Result<RoundDiagnostics> {
        let model = WeightModel::new(w.clone(), *omega_star, config.lambda)?;
        let system = assemble_joint_system(w, omega_star)?;
        let slacks = slack_sum(&model, &system, data, &seen)?;
        let total: f64 = slacks.iter().map(|(_, s)| s).sum();
        let obj = 0.5 * config.lambda * w.norm_squared() + total;
        if !obj.is_finite() {
            return Err(Error::Numerical(format!(
                "training objective became non-finite ({obj})"
            )));
        }
        if best.as_ref().map(|(b, _, _)| obj < *b).unwrap_or(true) {
            *best = Some((obj, w.clone(), slacks));
        }
        Ok(RoundDiagnostics {
            round,
            objective: obj,
            delta_w: system.delta_w(),
            eig_min: system.eig_min(),
            eig_max: system.eig_max(),
            is_pd: system.is_pd(),
            is_diag_dominant: system.is_diag_dominant(),
        })
    };

    for round in 0..config.outer_iters {
        let diag = evaluate(round, &w, &mut best)?;
        let obj = diag.objective;
        trace.push((round, obj));
        diagnostics.push(diag);
        running.push(obj);

        for _ in 0..config.inner_iters {
            let system = assemble_joint_system(&w, omega_star)?;
            let scorer = BatchScorer::new(&system, &instances, &seen)?;
            let mut grad = DMatrix::<f64>::zeros(dt, ds);
            for (xi, x) in instances.iter().enumerate() {
                let y_true = x.label.expect("training instances are labeled");
                let ti = label_index[&y_true];
                let f_true = scorer.score(xi, ti, x, &seen[ti]);
                let mut best_y = ti;
                let mut best_score = f_true;
                for (yi, c) in seen.iter().enumerate() {
                    let s = zero_one_loss(y_true, c.label) + scorer.score(xi, yi, x, c);
                    if s > best_score {
                        best_score = s;
                        best_y = yi;
                    }
                }
                if best_y != ti && best_score - f_true > 0.0 {
                    let (ht, hs) = scorer.adapted(xi, best_y);
                    let (tt, ts) = scorer.adapted(xi, ti);
                    add_outer(&mut grad, &ht, &hs, 1.0);
                    add_outer(&mut grad, &tt, &ts, -1.0);
                }
            }
            let eta = eta0 / (1.0 + step as f64);
            step += 1;
            // Forward step on the hinge term, proximal (shrinkage) step
            // on the quadratic regularizer; stable for any lambda.
            w = (&w - &grad * eta) / (1.0 + eta * config.lambda);
            w = project_pd(&w, omega_star, config.pd_margin);
        }
    }

    let final_diag = evaluate(config.outer_iters, &w, &mut best)?;
    diagnostics.push(final_diag);
    running.push(final_diag.objective);

    let (best_obj, best_w, best_slacks) = best.expect("at least one evaluation");
    trace.push((config.outer_iters, best_obj));

    let last = running[running.len() - 1];
    let prev = running[running.len() - 2];
    let converged = (last - prev).abs() <= 1e-4 * (1.0 + last.abs());

    let model = WeightModel::new(best_w, *omega_star, config.lambda)?;
    let state = TrainingState {
        slacks: best_slacks,
        objective_trace: trace,
        diagnostics,
        converged,
    };
    Ok((model, state))
}
