//! Shared domain types: class/instance embeddings, datasets, penalty
//! weights, and trained models.
//!
//! Everything here is immutable after construction and safe to share
//! read-only across threads. Constructors validate their invariants and
//! reject rather than repair bad input.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Integer class identifier. A side map to human-readable names is
/// optional metadata kept outside the toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub u64);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for ClassId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.trim().parse().map(ClassId)
    }
}

/// Integer instance identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for InstanceId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.trim().parse().map(InstanceId)
    }
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Per-class source-domain attribute vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    pub label: ClassId,
    pub attributes: DVector<f64>,
}

impl ClassEmbedding {
    pub fn new(label: ClassId, attributes: DVector<f64>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::Invalid(format!(
                "class {label}: attribute vector is empty"
            )));
        }
        if !all_finite(&attributes) {
            return Err(Error::Invalid(format!(
                "class {label}: attribute vector has non-finite entries"
            )));
        }
        Ok(Self { label, attributes })
    }
}

/// Target-domain feature vector for one data instance. The label is
/// absent for instances scored at prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedInstance {
    pub id: InstanceId,
    pub label: Option<ClassId>,
    pub features: DVector<f64>,
}

impl EmbeddedInstance {
    pub fn new(id: InstanceId, label: Option<ClassId>, features: DVector<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Invalid(format!(
                "instance {id}: feature vector is empty"
            )));
        }
        if !all_finite(&features) {
            return Err(Error::Invalid(format!(
                "instance {id}: feature vector has non-finite entries"
            )));
        }
        Ok(Self {
            id,
            label,
            features,
        })
    }
}

/// Labeled instances plus per-class attribute vectors, with a disjoint
/// seen/unseen class partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    classes: Vec<ClassEmbedding>,
    instances: Vec<EmbeddedInstance>,
    seen: BTreeSet<ClassId>,
    unseen: BTreeSet<ClassId>,
    attr_dim: usize,
    feat_dim: usize,
}

impl Dataset {
    pub fn new(
        classes: Vec<ClassEmbedding>,
        instances: Vec<EmbeddedInstance>,
        seen: BTreeSet<ClassId>,
        unseen: BTreeSet<ClassId>,
    ) -> Result<Self> {
        if classes.is_empty() {
            return Err(Error::Invalid("dataset has no classes".into()));
        }
        let attr_dim = classes[0].attributes.len();
        let mut labels = BTreeSet::new();
        for c in &classes {
            if c.attributes.len() != attr_dim {
                return Err(Error::Dimension(format!(
                    "class {}: attribute length {} != {}",
                    c.label,
                    c.attributes.len(),
                    attr_dim
                )));
            }
            if !labels.insert(c.label) {
                return Err(Error::Invalid(format!("duplicate class label {}", c.label)));
            }
        }
        if let Some(id) = seen.intersection(&unseen).next() {
            return Err(Error::Invalid(format!(
                "class {id} listed as both seen and unseen"
            )));
        }
        for id in seen.iter().chain(unseen.iter()) {
            if !labels.contains(id) {
                return Err(Error::Invalid(format!(
                    "split references unknown class {id}"
                )));
            }
        }
        let feat_dim = match instances.first() {
            Some(x) => x.features.len(),
            None => 0,
        };
        let mut ids = BTreeSet::new();
        for x in &instances {
            if x.features.len() != feat_dim {
                return Err(Error::Dimension(format!(
                    "instance {}: feature length {} != {}",
                    x.id,
                    x.features.len(),
                    feat_dim
                )));
            }
            if !ids.insert(x.id) {
                return Err(Error::Invalid(format!("duplicate instance id {}", x.id)));
            }
            match x.label {
                Some(l) if !labels.contains(&l) => {
                    return Err(Error::Invalid(format!(
                        "instance {} references unknown class {l}",
                        x.id
                    )));
                }
                None => {
                    return Err(Error::Invalid(format!(
                        "instance {} has no label; datasets hold labeled data only",
                        x.id
                    )));
                }
                _ => {}
            }
        }
        Ok(Self {
            classes,
            instances,
            seen,
            unseen,
            attr_dim,
            feat_dim,
        })
    }

    pub fn classes(&self) -> &[ClassEmbedding] {
        &self.classes
    }

    pub fn instances(&self) -> &[EmbeddedInstance] {
        &self.instances
    }

    pub fn seen(&self) -> &BTreeSet<ClassId> {
        &self.seen
    }

    pub fn unseen(&self) -> &BTreeSet<ClassId> {
        &self.unseen
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn class(&self, label: ClassId) -> Option<&ClassEmbedding> {
        self.classes.iter().find(|c| c.label == label)
    }

    /// Seen-class embeddings in ascending label order.
    pub fn seen_classes(&self) -> Vec<ClassEmbedding> {
        self.select_classes(&self.seen)
    }

    /// Unseen-class embeddings in ascending label order.
    pub fn unseen_classes(&self) -> Vec<ClassEmbedding> {
        self.select_classes(&self.unseen)
    }

    fn select_classes(&self, ids: &BTreeSet<ClassId>) -> Vec<ClassEmbedding> {
        let by_label: BTreeMap<ClassId, &ClassEmbedding> =
            self.classes.iter().map(|c| (c.label, c)).collect();
        ids.iter().map(|id| by_label[id].clone()).collect()
    }

    /// Instances labeled with a seen class, in ascending instance id order.
    pub fn training_instances(&self) -> Vec<&EmbeddedInstance> {
        self.select_instances(&self.seen)
    }

    /// Instances labeled with an unseen class, in ascending instance id order.
    pub fn test_instances(&self) -> Vec<&EmbeddedInstance> {
        self.select_instances(&self.unseen)
    }

    fn select_instances(&self, ids: &BTreeSet<ClassId>) -> Vec<&EmbeddedInstance> {
        let mut out: Vec<&EmbeddedInstance> = self
            .instances
            .iter()
            .filter(|x| x.label.map(|l| ids.contains(&l)).unwrap_or(false))
            .collect();
        out.sort_by_key(|x| x.id);
        out
    }
}

/// The four displacement-penalty weights. The first pair pulls the
/// adapted features toward their anchors, the second pair shrinks them
/// toward the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaParams {
    w1: f64,
    w2: f64,
    w3: f64,
    w4: f64,
}

impl OmegaParams {
    /// All four weights must be finite and nonnegative, and the block
    /// sums `w1+w3` and `w2+w4` strictly positive.
    pub fn new(w1: f64, w2: f64, w3: f64, w4: f64) -> Result<Self> {
        for (name, v) in [("w1", w1), ("w2", w2), ("w3", w3), ("w4", w4)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!(
                    "omega component {name} = {v} must be finite and >= 0"
                )));
            }
        }
        if w1 + w3 <= 0.0 {
            return Err(Error::Invalid(format!(
                "omega sum w1+w3 = {} must be > 0",
                w1 + w3
            )));
        }
        if w2 + w4 <= 0.0 {
            return Err(Error::Invalid(format!(
                "omega sum w2+w4 = {} must be > 0",
                w2 + w4
            )));
        }
        Ok(Self { w1, w2, w3, w4 })
    }

    pub fn w1(&self) -> f64 {
        self.w1
    }

    pub fn w2(&self) -> f64 {
        self.w2
    }

    pub fn w3(&self) -> f64 {
        self.w3
    }

    pub fn w4(&self) -> f64 {
        self.w4
    }

    /// Diagonal weight of the target block, `w1 + w3`.
    pub fn w13(&self) -> f64 {
        self.w1 + self.w3
    }

    /// Diagonal weight of the source block, `w2 + w4`.
    pub fn w24(&self) -> f64 {
        self.w2 + self.w4
    }
}

impl fmt::Display for OmegaParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.w1, self.w2, self.w3, self.w4)
    }
}

/// Optional norm-ball radii for the feasible domains of the adapted
/// features. `None` means unbounded, which is the default; bounded
/// domains are enforced only by the alternating solver via projection.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DomainSpec {
    pub target_radius: Option<f64>,
    pub source_radius: Option<f64>,
}

impl DomainSpec {
    pub fn unbounded() -> Self {
        Self::default()
    }

    pub fn bounded(target_radius: Option<f64>, source_radius: Option<f64>) -> Result<Self> {
        for (name, r) in [("target", target_radius), ("source", source_radius)] {
            if let Some(r) = r {
                if !r.is_finite() || r < 0.0 {
                    return Err(Error::Invalid(format!(
                        "{name} radius {r} must be finite and >= 0"
                    )));
                }
            }
        }
        Ok(Self {
            target_radius,
            source_radius,
        })
    }
}

/// A learned bilinear weight matrix together with the penalty weights
/// and regularization constant it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightModel {
    pub weights: DMatrix<f64>,
    pub omega: OmegaParams,
    pub lambda: f64,
}

impl WeightModel {
    pub fn new(weights: DMatrix<f64>, omega: OmegaParams, lambda: f64) -> Result<Self> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Invalid("weight matrix is empty".into()));
        }
        if !weights.iter().all(|x| x.is_finite()) {
            return Err(Error::Invalid(
                "weight matrix has non-finite entries".into(),
            ));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Invalid(format!(
                "lambda = {lambda} must be finite and >= 0"
            )));
        }
        Ok(Self {
            weights,
            omega,
            lambda,
        })
    }

    /// Target-feature dimension (rows of the weight matrix).
    pub fn feat_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Source-attribute dimension (columns of the weight matrix).
    pub fn attr_dim(&self) -> usize {
        self.weights.ncols()
    }
}

/// Per-pair constants of the quadratic score: the stacked weighted
/// anchors (the right-hand side of the joint solve) and the constant
/// anchor energy subtracted from every score.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAssembly {
    pub rhs: DVector<f64>,
    pub offset: f64,
    feat_dim: usize,
    attr_dim: usize,
}

impl PairAssembly {
    pub(crate) fn from_parts(rhs: DVector<f64>, offset: f64, feat_dim: usize) -> Self {
        let attr_dim = rhs.len() - feat_dim;
        Self {
            rhs,
            offset,
            feat_dim,
            attr_dim,
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }
}

/// Adapted feature pair and the score it achieves.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedPair {
    /// Adapted target feature, length `feat_dim`.
    pub target: DVector<f64>,
    /// Adapted source feature, length `attr_dim`.
    pub source: DVector<f64>,
    /// Concatenation of `target` then `source`.
    pub stacked: DVector<f64>,
    /// Value of the displaced-score objective at (`target`, `source`).
    pub objective: f64,
    /// Per-sweep objective values; present for the alternating solver only.
    pub trace: Option<Vec<f64>>,
    /// False when the alternating solver stopped on its iteration cap.
    pub converged: bool,
    /// True when a non-definite system was solved through the
    /// pseudo-inverse diagnostics path.
    pub via_pseudo_inverse: bool,
}

impl AdaptedPair {
    pub(crate) fn from_split(
        target: DVector<f64>,
        source: DVector<f64>,
        objective: f64,
    ) -> Self {
        let stacked = stack(&target, &source);
        Self {
            target,
            source,
            stacked,
            objective,
            trace: None,
            converged: true,
            via_pseudo_inverse: false,
        }
    }
}

pub(crate) fn stack(target: &DVector<f64>, source: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(target.len() + source.len());
    z.rows_mut(0, target.len()).copy_from(target);
    z.rows_mut(target.len(), source.len()).copy_from(source);
    z
}

/// Definiteness diagnostics of the running iterate at one outer-round
/// boundary of training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundDiagnostics {
    pub round: usize,
    pub objective: f64,
    pub delta_w: f64,
    pub eig_min: f64,
    pub eig_max: f64,
    pub is_pd: bool,
    pub is_diag_dominant: bool,
}

/// Snapshot of a training run: final per-instance slacks, the recorded
/// objective per outer round with system diagnostics, and a plateau
/// flag.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub slacks: Vec<(InstanceId, f64)>,
    pub objective_trace: Vec<(usize, f64)>,
    pub diagnostics: Vec<RoundDiagnostics>,
    pub converged: bool,
}
