//! Test-time prediction over unseen classes and metric computation.

use std::collections::{BTreeMap, BTreeSet};

use crate::adapt::{assemble_pair, similarity, JointSystem};
use crate::error::{Error, Result};
use crate::types::{ClassEmbedding, ClassId, EmbeddedInstance, InstanceId, WeightModel};

/// Argmax prediction for one instance, with the full score list.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub instance: InstanceId,
    pub predicted: ClassId,
    /// Scores per candidate class, in ascending class id order.
    pub scores: Vec<(ClassId, f64)>,
}

/// Argmax over scores with ties broken by smallest class id. Scores are
/// compared by ordering only, so shifting them all by a constant never
/// changes the winner.
pub fn argmax_scores(scores: &[(ClassId, f64)]) -> Option<ClassId> {
    let mut best: Option<(ClassId, f64)> = None;
    let mut sorted: Vec<&(ClassId, f64)> = scores.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    for (id, s) in sorted {
        if best.map(|(_, b)| *s > b).unwrap_or(true) {
            best = Some((*id, *s));
        }
    }
    best.map(|(id, _)| id)
}

/// Scores an instance against every candidate class through the single
/// pre-factorized joint system and returns the argmax.
pub fn predict(
    model: &WeightModel,
    system: &JointSystem,
    unseen: &[ClassEmbedding],
    x: &EmbeddedInstance,
) -> Result<PredictionResult> {
    if unseen.is_empty() {
        return Err(Error::Invalid("empty unseen class set".into()));
    }
    if !system.is_pd() {
        return Err(Error::NotPositiveDefinite {
            eig_min: system.eig_min(),
        });
    }
    let mut scores = Vec::with_capacity(unseen.len());
    for class in unseen {
        let pair = assemble_pair(&x.features, &class.attributes, &model.omega);
        scores.push((class.label, similarity(system, &pair)?));
    }
    scores.sort_by_key(|(id, _)| *id);
    let predicted = argmax_scores(&scores).expect("nonempty scores");
    Ok(PredictionResult {
        instance: x.id,
        predicted,
        scores,
    })
}

/// Predictions for a batch of instances against the same model.
pub fn predict_batch(
    model: &WeightModel,
    system: &JointSystem,
    unseen: &[ClassEmbedding],
    instances: &[&EmbeddedInstance],
) -> Result<Vec<PredictionResult>> {
    instances
        .iter()
        .map(|x| predict(model, system, unseen, x))
        .collect()
}

/// A mean with an accompanying spread. For a single evaluation the
/// spread of the macro metrics is the population std across classes;
/// after trial averaging every spread is the sample std across trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

/// Per-class counting outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassOutcome {
    pub class: ClassId,
    pub precision: f64,
    pub recall: f64,
    pub predicted_count: usize,
    pub truth_count: usize,
    pub correct: usize,
    /// False when the class was never predicted; precision is then
    /// reported as 0 rather than omitted so macro averages stay defined.
    pub precision_defined: bool,
    pub recall_defined: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: Stat,
    pub macro_precision: Stat,
    pub macro_recall: Stat,
    /// One entry per class, ascending class id.
    pub per_class: Vec<ClassOutcome>,
    pub trials: usize,
}

fn population_std(values: &[f64], mean: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt()
}

fn sample_std(values: &[f64], mean: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64)
        .sqrt()
}

/// Accuracy plus per-class precision/recall against ground truth.
pub fn evaluate(
    predictions: &[PredictionResult],
    truth: &BTreeMap<InstanceId, ClassId>,
) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Invalid("empty prediction set".into()));
    }
    let mut ids = BTreeSet::new();
    let mut correct_total = 0usize;
    let mut classes: BTreeSet<ClassId> = BTreeSet::new();
    for p in predictions {
        if !ids.insert(p.instance) {
            return Err(Error::Invalid(format!(
                "duplicate prediction for instance {}",
                p.instance
            )));
        }
        let label = truth.get(&p.instance).ok_or_else(|| {
            Error::Invalid(format!(
                "prediction references unknown instance {}",
                p.instance
            ))
        })?;
        classes.insert(*label);
        classes.insert(p.predicted);
        if *label == p.predicted {
            correct_total += 1;
        }
    }

    let mut per_class = Vec::with_capacity(classes.len());
    for &c in &classes {
        let mut predicted_count = 0usize;
        let mut truth_count = 0usize;
        let mut correct = 0usize;
        for p in predictions {
            let label = truth[&p.instance];
            if p.predicted == c {
                predicted_count += 1;
                if label == c {
                    correct += 1;
                }
            }
            if label == c {
                truth_count += 1;
            }
        }
        let precision_defined = predicted_count > 0;
        let recall_defined = truth_count > 0;
        per_class.push(ClassOutcome {
            class: c,
            precision: if precision_defined {
                correct as f64 / predicted_count as f64
            } else {
                0.0
            },
            recall: if recall_defined {
                correct as f64 / truth_count as f64
            } else {
                0.0
            },
            predicted_count,
            truth_count,
            correct,
            precision_defined,
            recall_defined,
        });
    }

    let precisions: Vec<f64> = per_class.iter().map(|c| c.precision).collect();
    let recalls: Vec<f64> = per_class.iter().map(|c| c.recall).collect();
    let mp = precisions.iter().sum::<f64>() / precisions.len() as f64;
    let mr = recalls.iter().sum::<f64>() / recalls.len() as f64;

    Ok(MetricsReport {
        accuracy: Stat {
            mean: correct_total as f64 / predictions.len() as f64,
            std: 0.0,
        },
        macro_precision: Stat {
            mean: mp,
            std: population_std(&precisions, mp),
        },
        macro_recall: Stat {
            mean: mr,
            std: population_std(&recalls, mr),
        },
        per_class,
        trials: 1,
    })
}

/// Elementwise mean ± sample std of accuracy and the macro metrics
/// across trials; per-class values are averaged elementwise.
pub fn trial_average(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::Invalid("no reports to average".into()));
    }
    let class_set: Vec<ClassId> = reports[0].per_class.iter().map(|c| c.class).collect();
    for r in &reports[1..] {
        let other: Vec<ClassId> = r.per_class.iter().map(|c| c.class).collect();
        if other != class_set {
            return Err(Error::Invalid(
                "reports cover different class sets".into(),
            ));
        }
    }

    let n = reports.len();
    let accs: Vec<f64> = reports.iter().map(|r| r.accuracy.mean).collect();
    let mps: Vec<f64> = reports.iter().map(|r| r.macro_precision.mean).collect();
    let mrs: Vec<f64> = reports.iter().map(|r| r.macro_recall.mean).collect();
    let acc_mean = accs.iter().sum::<f64>() / n as f64;
    let mp_mean = mps.iter().sum::<f64>() / n as f64;
    let mr_mean = mrs.iter().sum::<f64>() / n as f64;

    let mut per_class = Vec::with_capacity(class_set.len());
    for (i, &c) in class_set.iter().enumerate() {
        let precision =
            reports.iter().map(|r| r.per_class[i].precision).sum::<f64>() / n as f64;
        let recall = reports.iter().map(|r| r.per_class[i].recall).sum::<f64>() / n as f64;
        per_class.push(ClassOutcome {
            class: c,
            precision,
            recall,
            predicted_count: reports.iter().map(|r| r.per_class[i].predicted_count).sum(),
            truth_count: reports.iter().map(|r| r.per_class[i].truth_count).sum(),
            correct: reports.iter().map(|r| r.per_class[i].correct).sum(),
            precision_defined: reports.iter().all(|r| r.per_class[i].precision_defined),
            recall_defined: reports.iter().all(|r| r.per_class[i].recall_defined),
        });
    }

    Ok(MetricsReport {
        accuracy: Stat {
            mean: acc_mean,
            std: sample_std(&accs, acc_mean),
        },
        macro_precision: Stat {
            mean: mp_mean,
            std: sample_std(&mps, mp_mean),
        },
        macro_recall: Stat {
            mean: mr_mean,
            std: sample_std(&mrs, mr_mean),
        },
        per_class,
        trials: reports.iter().map(|r| r.trials).sum(),
    })
}
