//! Dataset and model file formats, synthetic problem generation, splits,
//! and optional standardization.
//!
//! All formats are line-oriented UTF-8 text. `#` begins a comment line
//! and blank lines are skipped. Floats are written in Rust's shortest
//! round-trippable decimal form, so save/load is bit-exact.
//!
//! * classes file: `class_id<TAB>v1,v2,...`
//! * instances file: `instance_id<TAB>class_id<TAB>v1,v2,...`
//! * split file: one `seen: id,id,...` line and one `unseen: ...` line
//! * model file: a versioned header, the weight rows, and a trailing
//!   sha256 checksum over everything above it

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::adapt::{adapt_closed_form, assemble_joint_system, assemble_pair};
use crate::error::{Error, Result};
use crate::types::{
    ClassEmbedding, ClassId, Dataset, EmbeddedInstance, InstanceId, OmegaParams, WeightModel,
};

pub const CLASSES_FILE: &str = "classes.tsv";
pub const INSTANCES_FILE: &str = "instances.tsv";
pub const SPLIT_FILE: &str = "split.txt";

const MODEL_FORMAT_VERSION: u32 = 1;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn data_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_f64_list(path: &Path, line: usize, s: &str) -> Result<DVector<f64>> {
    if s.trim().is_empty() {
        return Err(parse_err(path, line, "empty value list"));
    }
    let values: std::result::Result<Vec<f64>, _> =
        s.split(',').map(|v| v.trim().parse::<f64>()).collect();
    match values {
        Ok(v) => Ok(DVector::from_vec(v)),
        Err(e) => Err(parse_err(path, line, format!("bad float: {e}"))),
    }
}

fn parse_id_list(path: &Path, line: usize, s: &str) -> Result<BTreeSet<ClassId>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for tok in s.split(',') {
        let id: ClassId = tok
            .trim()
            .parse()
            .map_err(|e| parse_err(path, line, format!("bad class id '{tok}': {e}")))?;
        out.insert(id);
    }
    Ok(out)
}

fn join_f64(v: &DVector<f64>) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x}");
    }
    s
}

/// Loads and validates a dataset from its three files.
pub fn load_dataset(
    classes_path: impl AsRef<Path>,
    instances_path: impl AsRef<Path>,
    split_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let classes_path = classes_path.as_ref();
    let mut classes = Vec::new();
    for (lineno, line) in data_lines(&read_to_string(classes_path)?) {
        let (label, rest) = line.split_once('\t').ok_or_else(|| {
            parse_err(classes_path, lineno, "expected <class_id><TAB><values>")
        })?;
        let label: ClassId = label
            .parse()
            .map_err(|e| parse_err(classes_path, lineno, format!("bad class id: {e}")))?;
        let attributes = parse_f64_list(classes_path, lineno, rest)?;
        classes.push(
            ClassEmbedding::new(label, attributes)
                .map_err(|e| parse_err(classes_path, lineno, e.to_string()))?,
        );
    }

    let instances_path = instances_path.as_ref();
    let mut instances = Vec::new();
    for (lineno, line) in data_lines(&read_to_string(instances_path)?) {
        let mut parts = line.splitn(3, '\t');
        let (id, label, rest) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => {
                return Err(parse_err(
                    instances_path,
                    lineno,
                    "expected <instance_id><TAB><class_id><TAB><values>",
                ))
            }
        };
        let id: InstanceId = id
            .parse()
            .map_err(|e| parse_err(instances_path, lineno, format!("bad instance id: {e}")))?;
        let label: ClassId = label
            .parse()
            .map_err(|e| parse_err(instances_path, lineno, format!("bad class id: {e}")))?;
        let features = parse_f64_list(instances_path, lineno, rest)?;
        instances.push(
            EmbeddedInstance::new(id, Some(label), features)
                .map_err(|e| parse_err(instances_path, lineno, e.to_string()))?,
        );
    }

    let split_path = split_path.as_ref();
    let mut seen: Option<BTreeSet<ClassId>> = None;
    let mut unseen: Option<BTreeSet<ClassId>> = None;
    for (lineno, line) in data_lines(&read_to_string(split_path)?) {
        if let Some(rest) = line.strip_prefix("seen:") {
            if seen.is_some() {
                return Err(parse_err(split_path, lineno, "duplicate 'seen:' line"));
            }
            seen = Some(parse_id_list(split_path, lineno, rest)?);
        } else if let Some(rest) = line.strip_prefix("unseen:") {
            if unseen.is_some() {
                return Err(parse_err(split_path, lineno, "duplicate 'unseen:' line"));
            }
            unseen = Some(parse_id_list(split_path, lineno, rest)?);
        } else {
            return Err(parse_err(
                split_path,
                lineno,
                "expected a 'seen:' or 'unseen:' line",
            ));
        }
    }
    let seen = seen.ok_or_else(|| parse_err(split_path, 0, "missing 'seen:' line"))?;
    let unseen = unseen.ok_or_else(|| parse_err(split_path, 0, "missing 'unseen:' line"))?;

    Dataset::new(classes, instances, seen, unseen)
}

/// Loads a dataset from a directory holding the three standard files.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    load_dataset(
        dir.join(CLASSES_FILE),
        dir.join(INSTANCES_FILE),
        dir.join(SPLIT_FILE),
    )
}

/// Writes the three dataset files into `dir`, preserving stored order.
pub fn write_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut classes = String::from("# class_id\tattributes\n");
    for c in data.classes() {
        let _ = writeln!(classes, "{}\t{}", c.label, join_f64(&c.attributes));
    }
    write_string(&dir.join(CLASSES_FILE), &classes)?;

    let mut instances = String::from("# instance_id\tclass_id\tfeatures\n");
    for x in data.instances() {
        let label = x.label.expect("dataset instances are labeled");
        let _ = writeln!(instances, "{}\t{}\t{}", x.id, label, join_f64(&x.features));
    }
    write_string(&dir.join(INSTANCES_FILE), &instances)?;

    let ids = |set: &BTreeSet<ClassId>| {
        set.iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let split = format!(
        "seen: {}\nunseen: {}\n",
        ids(data.seen()),
        ids(data.unseen())
    );
    write_string(&dir.join(SPLIT_FILE), &split)
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Serializes a model to versioned, checksummed text.
pub fn save_model(model: &WeightModel, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = String::new();
    let _ = writeln!(payload, "version: {MODEL_FORMAT_VERSION}");
    let _ = writeln!(payload, "feat_dim: {}", model.feat_dim());
    let _ = writeln!(payload, "attr_dim: {}", model.attr_dim());
    let _ = writeln!(
        payload,
        "omega: {} {} {} {}",
        model.omega.w1(),
        model.omega.w2(),
        model.omega.w3(),
        model.omega.w4()
    );
    let _ = writeln!(payload, "lambda: {}", model.lambda);
    let _ = writeln!(payload, "weights:");
    for i in 0..model.feat_dim() {
        for j in 0..model.attr_dim() {
            if j > 0 {
                payload.push(' ');
            }
            let _ = write!(payload, "{}", model.weights[(i, j)]);
        }
        payload.push('\n');
    }
    let digest = hex(&Sha256::digest(payload.as_bytes()));
    let _ = writeln!(payload, "checksum: {digest}");
    write_string(path.as_ref(), &payload)
}

/// Reads a model back; verifies the format version and checksum.
pub fn load_model(path: impl AsRef<Path>) -> Result<WeightModel> {
    let path = path.as_ref();
    let content = read_to_string(path)?;
    let corrupt = |msg: &str| Error::Corrupt {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };

    let idx = content
        .rfind("checksum: ")
        .ok_or_else(|| corrupt("missing checksum line"))?;
    let payload = &content[..idx];
    let stated = content[idx..]
        .trim_start_matches("checksum: ")
        .trim();
    let actual = hex(&Sha256::digest(payload.as_bytes()));
    if stated != actual {
        return Err(corrupt("checksum mismatch"));
    }

    let mut lines = payload.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut field = |name: &str| -> Result<String> {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("missing '{name}:' line")))?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(':'))
            .map(|r| r.trim().to_string())
            .ok_or_else(|| parse_err(path, lineno, format!("expected '{name}:' line")))
    };

    let version: u32 = field("version")?
        .parse()
        .map_err(|e| parse_err(path, 1, format!("bad version: {e}")))?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Invalid(format!(
            "unsupported model format version {version} (expected {MODEL_FORMAT_VERSION})"
        )));
    }
    let feat_dim: usize = field("feat_dim")?
        .parse()
        .map_err(|e| parse_err(path, 2, format!("bad feat_dim: {e}")))?;
    let attr_dim: usize = field("attr_dim")?
        .parse()
        .map_err(|e| parse_err(path, 3, format!("bad attr_dim: {e}")))?;
    let omega_line = field("omega")?;
    let omega_vals: std::result::Result<Vec<f64>, _> = omega_line
        .split_whitespace()
        .map(|v| v.parse::<f64>())
        .collect();
    let omega_vals =
        omega_vals.map_err(|e| parse_err(path, 4, format!("bad omega: {e}")))?;
    if omega_vals.len() != 4 {
        return Err(parse_err(path, 4, "omega needs exactly four values"));
    }
    let omega = OmegaParams::new(omega_vals[0], omega_vals[1], omega_vals[2], omega_vals[3])?;
    let lambda: f64 = field("lambda")?
        .parse()
        .map_err(|e| parse_err(path, 5, format!("bad lambda: {e}")))?;
    let marker = field("weights")?;
    if !marker.is_empty() {
        return Err(parse_err(path, 6, "unexpected content after 'weights:'"));
    }

    let mut weights = DMatrix::<f64>::zeros(feat_dim, attr_dim);
    for i in 0..feat_dim {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, 6 + i, format!("expected {feat_dim} weight rows")))?;
        let row: std::result::Result<Vec<f64>, _> =
            line.split_whitespace().map(|v| v.parse::<f64>()).collect();
        let row = row.map_err(|e| parse_err(path, lineno, format!("bad weight: {e}")))?;
        if row.len() != attr_dim {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {attr_dim} values, got {}", row.len()),
            ));
        }
        for (j, v) in row.into_iter().enumerate() {
            weights[(i, j)] = v;
        }
    }
    if let Some((lineno, _)) = lines.next() {
        return Err(parse_err(path, lineno, "trailing content after weight rows"));
    }

    WeightModel::new(weights, omega, lambda)
}

/// Configuration of the synthetic problem generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub attr_dim: usize,
    pub feat_dim: usize,
    pub instances_per_class: usize,
    /// Attribute entries are drawn uniformly from [0, attribute_scale).
    pub attribute_scale: f64,
    /// Std of the per-class perturbation of the ground-truth linear map.
    pub map_noise: f64,
    /// Std of per-instance additive noise.
    pub feature_noise: f64,
    /// Std of the within-class scatter around the class center.
    pub intra_class_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_seen: 20,
            n_unseen: 5,
            attr_dim: 8,
            feat_dim: 16,
            instances_per_class: 30,
            attribute_scale: 1.0,
            map_noise: 0.0,
            feature_noise: 0.05,
            intra_class_spread: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_seen", self.n_seen),
            ("n_unseen", self.n_unseen),
            ("attr_dim", self.attr_dim),
            ("feat_dim", self.feat_dim),
            ("instances_per_class", self.instances_per_class),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be >= 1")));
            }
        }
        if !(self.attribute_scale > 0.0) || !self.attribute_scale.is_finite() {
            return Err(Error::Invalid(format!(
                "attribute_scale = {} must be finite and > 0",
                self.attribute_scale
            )));
        }
        for (name, v) in [
            ("map_noise", self.map_noise),
            ("feature_noise", self.feature_noise),
            ("intra_class_spread", self.intra_class_spread),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Invalid(format!(
                    "{name} = {v} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// A synthetic dataset plus the ground-truth linear map that generated
/// its class centers (kept for oracle checks).
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub true_map: DMatrix<f64>,
}

/// Deterministically generates a zero-shot problem: uniform attribute
/// vectors, class centers through a random linear map, gaussian
/// within-class scatter, and a uniform random seen/unseen partition.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_classes = config.n_seen + config.n_unseen;

    let mut classes = Vec::with_capacity(n_classes);
    for label in 0..n_classes {
        let attributes = DVector::from_fn(config.attr_dim, |_, _| {
            rng.random::<f64>() * config.attribute_scale
        });
        classes.push(ClassEmbedding::new(ClassId(label as u64), attributes)?);
    }

    let scale = 1.0 / (config.attr_dim as f64).sqrt();
    let true_map = DMatrix::from_fn(config.feat_dim, config.attr_dim, |_, _| {
        let g: f64 = rng.sample(StandardNormal);
        g * scale
    });

    let mut instances = Vec::with_capacity(n_classes * config.instances_per_class);
    let mut next_id = 0u64;
    for class in &classes {
        let perturbation = DMatrix::from_fn(config.feat_dim, config.attr_dim, |_, _| {
            let g: f64 = rng.sample(StandardNormal);
            g * config.map_noise
        });
        let center = (&true_map + perturbation) * &class.attributes;
        for _ in 0..config.instances_per_class {
            let scatter = DVector::from_fn(config.feat_dim, |_, _| {
                let g: f64 = rng.sample(StandardNormal);
                g * config.intra_class_spread
            });
            let noise = DVector::from_fn(config.feat_dim, |_, _| {
                let g: f64 = rng.sample(StandardNormal);
                g * config.feature_noise
            });
            let features = &center + scatter + noise;
            instances.push(EmbeddedInstance::new(
                InstanceId(next_id),
                Some(class.label),
                features,
            )?);
            next_id += 1;
        }
    }

    let mut labels: Vec<ClassId> = classes.iter().map(|c| c.label).collect();
    labels.shuffle(&mut rng);
    let seen: BTreeSet<ClassId> = labels[..config.n_seen].iter().copied().collect();
    let unseen: BTreeSet<ClassId> = labels[config.n_seen..].iter().copied().collect();

    Ok(SynthOutput {
        dataset: Dataset::new(classes, instances, seen, unseen)?,
        true_map,
    })
}

/// Normalization applied to a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StandardizeMode {
    None,
    /// Zero mean / unit variance per feature dimension, with statistics
    /// from seen-class training instances only.
    ZscoreTarget,
    /// Every feature and attribute vector scaled to unit ℓ2 norm.
    UnitNormBoth,
}

impl std::str::FromStr for StandardizeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "zscore-target" => Ok(Self::ZscoreTarget),
            "unit-norm-both" => Ok(Self::UnitNormBoth),
            other => Err(Error::Invalid(format!(
                "unknown standardization mode '{other}' \
                 (expected none, zscore-target, or unit-norm-both)"
            ))),
        }
    }
}

/// Fitted normalization statistics, reusable on held-out data.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mode: StandardizeMode,
    pub feature_means: Option<DVector<f64>>,
    pub feature_stds: Option<DVector<f64>>,
    /// Feature dimensions whose training variance was zero; their std
    /// was replaced by one.
    pub zero_variance_dims: Vec<usize>,
    /// Vectors with zero norm left untouched by unit normalization.
    pub zero_norm_vectors: usize,
}

impl Standardization {
    /// Applies the fitted transform to a raw feature vector.
    pub fn apply_features(&self, features: &DVector<f64>) -> DVector<f64> {
        match self.mode {
            StandardizeMode::None => features.clone(),
            StandardizeMode::ZscoreTarget => {
                let means = self.feature_means.as_ref().expect("fitted");
                let stds = self.feature_stds.as_ref().expect("fitted");
                DVector::from_fn(features.len(), |i, _| (features[i] - means[i]) / stds[i])
            }
            StandardizeMode::UnitNormBoth => unit_norm(features).0,
        }
    }
}

fn unit_norm(v: &DVector<f64>) -> (DVector<f64>, bool) {
    let norm = v.norm();
    if norm == 0.0 {
        (v.clone(), true)
    } else {
        (v / norm, false)
    }
}

/// Returns a normalized copy of the dataset plus the fitted statistics.
pub fn standardize(data: &Dataset, mode: StandardizeMode) -> Result<(Dataset, Standardization)> {
    if data.instances().is_empty() && mode == StandardizeMode::ZscoreTarget {
        return Err(Error::Invalid(
            "zscore standardization needs at least one instance".into(),
        ));
    }
    match mode {
        StandardizeMode::None => Ok((
            data.clone(),
            Standardization {
                mode,
                feature_means: None,
                feature_stds: None,
                zero_variance_dims: vec![],
                zero_norm_vectors: 0,
            },
        )),
        StandardizeMode::ZscoreTarget => {
            let train = data.training_instances();
            if train.is_empty() {
                return Err(Error::Invalid(
                    "zscore standardization needs seen-class training instances".into(),
                ));
            }
            let d = data.feat_dim();
            let n = train.len() as f64;
            let mut means = DVector::zeros(d);
            for x in &train {
                means += &x.features;
            }
            means /= n;
            let mut vars = DVector::zeros(d);
            for x in &train {
                let diff = &x.features - &means;
                vars += diff.component_mul(&diff);
            }
            vars /= n;
            let mut zero_variance_dims = Vec::new();
            let stds = DVector::from_fn(d, |i, _| {
                if vars[i] == 0.0 {
                    zero_variance_dims.push(i);
                    1.0
                } else {
                    vars[i].sqrt()
                }
            });
            let stats = Standardization {
                mode,
                feature_means: Some(means),
                feature_stds: Some(stds),
                zero_variance_dims,
                zero_norm_vectors: 0,
            };
            let instances = data
                .instances()
                .iter()
                .map(|x| {
                    EmbeddedInstance::new(x.id, x.label, stats.apply_features(&x.features))
                })
                .collect::<Result<Vec<_>>>()?;
            let ds = Dataset::new(
                data.classes().to_vec(),
                instances,
                data.seen().clone(),
                data.unseen().clone(),
            )?;
            Ok((ds, stats))
        }
        StandardizeMode::UnitNormBoth => {
            let mut zero_norm_vectors = 0;
            let classes = data
                .classes()
                .iter()
                .map(|c| {
                    let (attributes, zero) = unit_norm(&c.attributes);
                    zero_norm_vectors += zero as usize;
                    ClassEmbedding::new(c.label, attributes)
                })
                .collect::<Result<Vec<_>>>()?;
            let instances = data
                .instances()
                .iter()
                .map(|x| {
                    let (features, zero) = unit_norm(&x.features);
                    zero_norm_vectors += zero as usize;
                    EmbeddedInstance::new(x.id, x.label, features)
                })
                .collect::<Result<Vec<_>>>()?;
            let ds = Dataset::new(classes, instances, data.seen().clone(), data.unseen().clone())?;
            Ok((
                ds,
                Standardization {
                    mode,
                    feature_means: None,
                    feature_stds: None,
                    zero_variance_dims: vec![],
                    zero_norm_vectors,
                },
            ))
        }
    }
}

/// Writes one row per instance with its original features and the pair
/// adapted against the given class. External tooling embeds/plots these.
pub fn export_adapted(
    model: &WeightModel,
    data: &Dataset,
    class: ClassId,
    path: impl AsRef<Path>,
) -> Result<()> {
    let class = data
        .class(class)
        .ok_or_else(|| Error::Invalid(format!("unknown class {class}")))?;
    let system = assemble_joint_system(&model.weights, &model.omega)?;
    if !system.is_pd() {
        return Err(Error::NotPositiveDefinite {
            eig_min: system.eig_min(),
        });
    }
    let mut out = String::from("# instance_id\tfeatures\tadapted_target\tadapted_source\n");
    let mut instances: Vec<&EmbeddedInstance> = data.instances().iter().collect();
    instances.sort_by_key(|x| x.id);
    for x in instances {
        let pair = assemble_pair(&x.features, &class.attributes, &model.omega);
        let adapted = adapt_closed_form(&system, &pair)?;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            x.id,
            join_f64(&x.features),
            join_f64(&adapted.target),
            join_f64(&adapted.source)
        );
    }
    write_string(path.as_ref(), &out)
}
