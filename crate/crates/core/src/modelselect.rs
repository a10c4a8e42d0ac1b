//! Penalty-weight selection: an exponential grid, an eigenvalue-range
//! prefilter, and class-disjoint cross-validation that preserves the
//! zero-shot structure (validation folds act as pseudo-unseen classes).

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adapt::assemble_joint_system;
use crate::error::{Error, Result};
use crate::learn::{train, TrainConfig};
use crate::types::{ClassId, Dataset, OmegaParams};
use crate::zsr::{evaluate, predict_batch};

/// Exponential grid over the four penalty weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub exponent_lo: i32,
    pub exponent_hi: i32,
    pub base: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            exponent_lo: -5,
            exponent_hi: 5,
            base: 10.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.exponent_lo > self.exponent_hi {
            return Err(Error::Invalid(format!(
                "exponent_lo {} > exponent_hi {}",
                self.exponent_lo, self.exponent_hi
            )));
        }
        if !self.base.is_finite() || self.base <= 0.0 {
            return Err(Error::Invalid(format!(
                "base = {} must be finite and > 0",
                self.base
            )));
        }
        Ok(())
    }
}

/// Cartesian product of `base^e` over the four weight components, in
/// lexicographic exponent order. The default spec yields 11⁴ = 14641
/// candidates.
pub fn omega_grid(spec: &GridSpec) -> Result<Vec<OmegaParams>> {
    spec.validate()?;
    let exponents: Vec<f64> = (spec.exponent_lo..=spec.exponent_hi)
        .map(|e| spec.base.powi(e))
        .collect();
    let mut out = Vec::with_capacity(exponents.len().pow(4));
    for &w1 in &exponents {
        for &w2 in &exponents {
            for &w3 in &exponents {
                for &w4 in &exponents {
                    out.push(OmegaParams::new(w1, w2, w3, w4)?);
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of the eigenvalue-range prefilter for one candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrefilterOutcome {
    pub keep: bool,
    /// Whether the largest eigenvalue also falls in the narrower
    /// (10³, 10⁴] band where good candidates concentrate; advisory only.
    pub preferred: bool,
    pub eig_min: f64,
    pub eig_max: f64,
    pub is_pd: bool,
}

/// Keeps a candidate when the probe system is positive definite with
/// its smallest eigenvalue in (0, 1] and its largest in (10, 10⁶].
pub fn eigen_prefilter(omega: &OmegaParams, w_probe: &DMatrix<f64>) -> Result<PrefilterOutcome> {
    let system = assemble_joint_system(w_probe, omega)?;
    let (eig_min, eig_max) = (system.eig_min(), system.eig_max());
    let keep = system.is_pd() && eig_min <= 1.0 && eig_max > 10.0 && eig_max <= 1e6;
    let preferred = eig_max > 1e3 && eig_max <= 1e4;
    Ok(PrefilterOutcome {
        keep,
        preferred,
        eig_min,
        eig_max,
        is_pd: system.is_pd(),
    })
}

/// Partitions the seen classes into `k` disjoint, near-equal folds.
pub fn crossval_split(
    seen: &BTreeSet<ClassId>,
    k: usize,
    seed: u64,
) -> Result<Vec<BTreeSet<ClassId>>> {
    if k < 2 {
        return Err(Error::Invalid(format!("fold count {k} must be >= 2")));
    }
    if seen.len() < k {
        return Err(Error::Invalid(format!(
            "fold count {k} exceeds the {} seen classes",
            seen.len()
        )));
    }
    let mut ids: Vec<ClassId> = seen.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut folds = vec![BTreeSet::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].insert(id);
    }
    Ok(folds)
}

/// One evaluated (or skipped) grid candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub omega: OmegaParams,
    /// Position in the deterministic grid enumeration.
    pub grid_index: usize,
    pub eig_min: f64,
    pub eig_max: f64,
    pub is_pd: bool,
    pub preferred: bool,
    pub skipped: bool,
    pub cv_mean: Option<f64>,
    pub cv_std: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    /// Evaluated candidates sorted descending by CV accuracy, then the
    /// skipped ones in grid order.
    pub candidates: Vec<CandidateRecord>,
    pub best: Option<OmegaParams>,
    pub folds: usize,
    pub elapsed: Duration,
}

/// Index of the accuracy argmax among evaluated candidates; ties go to
/// the larger smallest-eigenvalue, then the earlier grid position.
/// Depends only on the ordering of the recorded accuracies.
pub fn pick_best(candidates: &[CandidateRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        let Some(acc) = c.cv_mean else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &candidates[b];
                let cur_acc = cur.cv_mean.unwrap();
                acc > cur_acc
                    || (acc == cur_acc && c.eig_min > cur.eig_min)
                    || (acc == cur_acc && c.eig_min == cur.eig_min && c.grid_index < cur.grid_index)
            }
        };
        if better {
            best = Some(i);
        }
    }
    best
}

impl SelectionReport {
    /// Delimited-text form of the report. Timing is deliberately not
    /// serialized so reports are byte-identical across worker counts.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "# w1\tw2\tw3\tw4\teig_min\teig_max\tis_pd\tpreferred\tskipped\t\
             cv_acc_mean\tcv_acc_std\tbest\n",
        );
        let best_index = pick_best(&self.candidates);
        for (i, c) in self.candidates.iter().enumerate() {
            let fmt_opt = |v: Option<f64>| match v {
                Some(v) => format!("{v}"),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                c.omega.w1(),
                c.omega.w2(),
                c.omega.w3(),
                c.omega.w4(),
                c.eig_min,
                c.eig_max,
                c.is_pd,
                c.preferred,
                c.skipped,
                fmt_opt(c.cv_mean),
                fmt_opt(c.cv_std),
                if best_index == Some(i) { "*" } else { "-" },
            ));
        }
        out
    }
}

fn fold_datasets(data: &Dataset, folds: &[BTreeSet<ClassId>]) -> Result<Vec<Dataset>> {
    let seen_classes = data.seen_classes();
    let training: Vec<_> = data.training_instances().into_iter().cloned().collect();
    folds
        .iter()
        .map(|fold| {
            let pseudo_seen: BTreeSet<ClassId> =
                data.seen().difference(fold).copied().collect();
            Dataset::new(
                seen_classes.clone(),
                training.clone(),
                pseudo_seen,
                fold.clone(),
            )
        })
        .collect()
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64)
        .sqrt()
}

/// Evaluates every grid candidate: trains a cheap probe model for the
/// eigenvalue prefilter, then (unless filtered) runs class-disjoint
/// k-fold pseudo-zero-shot validation at the full training config.
/// Candidates are independent work items; the report is identical
/// regardless of how they are scheduled across threads.
pub fn select_omega(
    data: &Dataset,
    grid: &GridSpec,
    train_config: &TrainConfig,
    k: usize,
    prefilter: bool,
) -> Result<SelectionReport> {
    let start = Instant::now();
    let candidates = omega_grid(grid)?;
    let folds = crossval_split(data.seen(), k, train_config.seed)?;
    let fold_data = fold_datasets(data, &folds)?;
    let probe_config = TrainConfig {
        outer_iters: 1,
        inner_iters: 10,
        ..train_config.clone()
    };

    let mut records: Vec<CandidateRecord> = candidates
        .par_iter()
        .enumerate()
        .map(|(grid_index, omega)| -> Result<CandidateRecord> {
            let (probe, _) = train(data, omega, &probe_config)?;
            let pf = eigen_prefilter(omega, &probe.weights)?;
            let mut record = CandidateRecord {
                omega: *omega,
                grid_index,
                eig_min: pf.eig_min,
                eig_max: pf.eig_max,
                is_pd: pf.is_pd,
                preferred: pf.preferred,
                skipped: true,
                cv_mean: None,
                cv_std: None,
            };
            if prefilter && !pf.keep {
                return Ok(record);
            }
            let mut accuracies = Vec::with_capacity(fold_data.len());
            for fd in &fold_data {
                let (model, _) = train(fd, omega, train_config)?;
                let system = assemble_joint_system(&model.weights, &model.omega)?;
                let unseen = fd.unseen_classes();
                let test = fd.test_instances();
                let predictions = predict_batch(&model, &system, &unseen, &test)?;
                let truth: BTreeMap<_, _> = test
                    .iter()
                    .map(|x| (x.id, x.label.expect("fold instances are labeled")))
                    .collect();
                accuracies.push(evaluate(&predictions, &truth)?.accuracy.mean);
            }
            let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            record.skipped = false;
            record.cv_mean = Some(mean);
            record.cv_std = Some(sample_std(&accuracies, mean));
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;

    records.sort_by(|a, b| match (a.cv_mean, b.cv_mean) {
        (Some(x), Some(y)) => y
            .partial_cmp(&x)
            .expect("accuracies are finite")
            .then(
                b.eig_min
                    .partial_cmp(&a.eig_min)
                    .expect("eigenvalues are finite"),
            )
            .then(a.grid_index.cmp(&b.grid_index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.grid_index.cmp(&b.grid_index),
    });

    let best = pick_best(&records).map(|i| records[i].omega);
    Ok(SelectionReport {
        candidates: records,
        best,
        folds: k,
        elapsed: start.elapsed(),
    })
}
