//! End-to-end experiment stages: data preparation, training, subspace
//! fitting and the evaluation table.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{CorruptionTarget, DataSource, RunConfig};
use crate::contrastive::{pretrain, PretrainReport};
use crate::corruptions::{corrupt_dataset, CorruptionKind, CorruptionSpec};
use crate::data::{read_cifar_binary, synth_gaussian_mixture, synth_ood_cluster, Dataset};
use crate::detect::{detect, fit_subspaces_with, msp_score, ClassSubspaceSet};
use crate::encoder::{train, Architecture, EncoderModel, EpochStats};
use crate::error::{Result, RoddError};
use crate::linalg::{orthonormal_init, Matrix};
use crate::metrics::{accuracy, evaluate, EvalReport, ScoreSplit};
use crate::theory::{
    build_adjacency, mu_sweep, one_hot_labels, solve_joint, verify_lemma, Init, JointOpts,
    LemmaReport, MuSweepReport,
};

/// Global affine map of raw values onto `[0, 1]`, fitted on training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitRangeScaler {
    pub lo: f64,
    pub hi: f64,
}

impl UnitRangeScaler {
    pub fn fit(inputs: &Matrix, margin: f64) -> Result<Self> {
        let (min, max) = inputs
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let span = max - min;
        if !(span > 0.0) || !(margin >= 0.0) {
            return Err(RoddError::contract("cannot fit a range to constant inputs"));
        }
        Ok(UnitRangeScaler {
            lo: min - margin * span,
            hi: max + margin * span,
        })
    }

    /// Maps and clips to `[0, 1]`.
    pub fn apply(&self, dataset: &Dataset) -> Dataset {
        let mut out = dataset.clone();
        let scale = 1.0 / (self.hi - self.lo);
        out.inputs = dataset
            .inputs
            .map(|v| ((v - self.lo) * scale).clamp(0.0, 1.0));
        out
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub id_train: Dataset,
    pub id_test: Dataset,
    pub ood: Dataset,
    pub scaler: Option<UnitRangeScaler>,
}

/// Builds the ID train/test split and the OOD set described by `config.data`.
pub fn prepare_data(config: &RunConfig) -> Result<PreparedData> {
    let d = &config.data;
    match d.source {
        DataSource::Synthetic => {
            let id = synth_gaussian_mixture(
                d.classes,
                d.n_per_class,
                d.input_dim,
                d.separation,
                d.noise_sigma,
                config.seed,
            )?;
            let (train_raw, test_raw) = id.stratified_split(d.test_fraction)?;
            let ood_raw = synth_ood_cluster(
                d.input_dim,
                d.ood_n,
                d.ood_direction_seed,
                d.ood_offset_norm,
                d.ood_noise_sigma,
                config.seed.wrapping_add(3),
            )?;
            let scaler = UnitRangeScaler::fit(&train_raw.inputs, d.scale_margin)?;
            Ok(PreparedData {
                id_train: scaler.apply(&train_raw),
                id_test: scaler.apply(&test_raw),
                ood: scaler.apply(&ood_raw),
                scaler: Some(scaler),
            })
        }
        DataSource::Cifar => {
            let path = |p: &Option<String>, name: &str| {
                p.clone().ok_or_else(|| {
                    RoddError::contract(format!("data.{name} is required for source = cifar"))
                })
            };
            let mut ood = read_cifar_binary(path(&d.cifar_ood, "cifar_ood")?)?;
            ood.labels = None;
            ood.class_count = 0;
            Ok(PreparedData {
                id_train: read_cifar_binary(path(&d.cifar_train, "cifar_train")?)?,
                id_test: read_cifar_binary(path(&d.cifar_test, "cifar_test")?)?,
                ood,
                scaler: None,
            })
        }
    }
}

pub fn build_model(config: &RunConfig, input_dim: usize, classes: usize) -> Result<EncoderModel> {
    let arch = Architecture {
        input_dim,
        hidden: config.model.hidden.clone(),
        feature_dim: config.model.feature_dim,
        classes,
    };
    EncoderModel::new(&arch, config.seed)
}

pub fn run_pretrain(
    config: &RunConfig,
    model: &mut EncoderModel,
    data: &Dataset,
) -> Result<Option<PretrainReport>> {
    if !config.pretrain.enabled || config.pretrain.epochs == 0 {
        return Ok(None);
    }
    pretrain(model, data, &config.pretrain_config()).map(Some)
}

pub fn run_train(
    config: &RunConfig,
    model: &mut EncoderModel,
    data: &Dataset,
) -> Result<Vec<EpochStats>> {
    train(model, data, &config.train_config())
}

/// Encodes the training set and fits the class directions and threshold.
pub fn run_fit(
    config: &RunConfig,
    model: &EncoderModel,
    data: &Dataset,
) -> Result<(Matrix, ClassSubspaceSet)> {
    let features = model.encode(&data.inputs)?;
    let subspaces = fit_subspaces_with(
        &features,
        data.labels()?,
        model.classes(),
        config.ood.quantile,
        config.ood.absolute_cosine,
    )?;
    Ok((features, subspaces))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub ood_set: String,
    pub corruption: String,
    /// 0 for clean data.
    pub severity: u8,
    pub fpr95: f64,
    pub auroc: f64,
    pub detection_error: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub threshold_used: f64,
}

impl EvalRow {
    fn new(ood_set: &str, corruption: CorruptionKind, severity: u8, r: EvalReport) -> Self {
        EvalRow {
            ood_set: ood_set.to_string(),
            corruption: corruption.name().to_string(),
            severity,
            fpr95: r.fpr95,
            auroc: r.auroc,
            detection_error: r.detection_error,
            n_id: r.n_id,
            n_ood: r.n_ood,
            threshold_used: r.threshold_used,
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            fpr95: self.fpr95,
            auroc: self.auroc,
            detection_error: self.detection_error,
            n_id: self.n_id,
            n_ood: self.n_ood,
            threshold_used: self.threshold_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    /// Accuracy on the clean ID test set.
    pub id_accuracy: f64,
    /// ID accuracy per corrupted ID set, when ID is the corruption target.
    pub corrupted_id_accuracy: Vec<(String, u8, f64)>,
    pub rows: Vec<EvalRow>,
    /// Max-softmax scores on clean data.
    pub msp_baseline: Option<EvalRow>,
}

impl EvalTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| RoddError::io("eval table", e))?;
        Ok(())
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let json = json_path.as_ref();
        std::fs::write(json, self.to_json()? + "\n").map_err(|e| RoddError::io(json, e))?;
        let file = std::fs::File::create(csv_path.as_ref())
            .map_err(|e| RoddError::io(csv_path.as_ref(), e))?;
        self.write_csv(file)
    }
}

/// Oriented detection scores `−δ` (higher means more in-distribution).
pub fn rodd_scores(
    model: &EncoderModel,
    subspaces: &ClassSubspaceSet,
    inputs: &Matrix,
) -> Result<Vec<f64>> {
    Ok(detect(model, subspaces, inputs)?
        .into_iter()
        .map(|r| -r.delta)
        .collect())
}

pub fn msp_scores(model: &EncoderModel, inputs: &Matrix) -> Result<Vec<f64>> {
    let logits = model.forward_eval(inputs)?.logits;
    Ok((0..logits.rows())
        .map(|i| msp_score(logits.row(i)))
        .collect())
}

/// Scores ID test and OOD data (clean, then each configured corruption and
/// severity) and reports one row per combination plus ID accuracy.
pub fn eval_pipeline(
    config: &RunConfig,
    model: &EncoderModel,
    subspaces: &ClassSubspaceSet,
    id_test: &Dataset,
    ood_sets: &[(String, Dataset)],
) -> Result<EvalTable> {
    if ood_sets.is_empty() {
        return Err(RoddError::contract("evaluation needs at least one OOD set"));
    }
    let tpr = config.eval.tpr_target;
    let logits = model.forward_eval(&id_test.inputs)?.logits;
    let id_accuracy = accuracy(&logits, id_test.labels()?)?;
    let id_scores = rodd_scores(model, subspaces, &id_test.inputs)?;

    let mut rows = Vec::new();
    let mut corrupted_id_accuracy = Vec::new();
    for (name, ood) in ood_sets {
        let ood_scores = rodd_scores(model, subspaces, &ood.inputs)?;
        let clean = evaluate(&ScoreSplit::new(id_scores.clone(), ood_scores.clone()), tpr)?;
        rows.push(EvalRow::new(name, CorruptionKind::None, 0, clean));
        for &kind in &config.corruption.kinds {
            for &severity in &config.corruption.severities {
                let spec = CorruptionSpec::new(kind, severity, config.seed)?;
                let split = match config.corruption.target {
                    CorruptionTarget::Ood => {
                        let corrupted = corrupt_dataset(ood, &spec)?;
                        ScoreSplit::new(
                            id_scores.clone(),
                            rodd_scores(model, subspaces, &corrupted.inputs)?,
                        )
                    }
                    CorruptionTarget::Id => {
                        let corrupted = corrupt_dataset(id_test, &spec)?;
                        let acc = accuracy(
                            &model.forward_eval(&corrupted.inputs)?.logits,
                            id_test.labels()?,
                        )?;
                        if !corrupted_id_accuracy
                            .iter()
                            .any(|(k, s, _)| k == kind.name() && *s == severity)
                        {
                            corrupted_id_accuracy.push((kind.name().to_string(), severity, acc));
                        }
                        ScoreSplit::new(
                            rodd_scores(model, subspaces, &corrupted.inputs)?,
                            ood_scores.clone(),
                        )
                    }
                };
                rows.push(EvalRow::new(name, kind, severity, evaluate(&split, tpr)?));
            }
        }
    }

    let msp_baseline = if config.eval.msp_baseline {
        let (name, ood) = &ood_sets[0];
        let split = ScoreSplit::new(
            msp_scores(model, &id_test.inputs)?,
            msp_scores(model, &ood.inputs)?,
        );
        Some(EvalRow::new(
            &format!("{name} (msp)"),
            CorruptionKind::None,
            0,
            evaluate(&split, tpr)?,
        ))
    } else {
        None
    };

    Ok(EvalTable {
        id_accuracy,
        corrupted_id_accuracy,
        rows,
        msp_baseline,
    })
}

/// Everything produced by one in-process run.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub data: PreparedData,
    pub model: EncoderModel,
    pub pretrain: Option<PretrainReport>,
    pub train_history: Vec<EpochStats>,
    pub subspaces: ClassSubspaceSet,
    pub table: EvalTable,
}

/// Runs data preparation, pre-training, training, fitting and evaluation.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentOutcome> {
    let data = prepare_data(config)?;
    let mut model = build_model(config, data.id_train.input_dim(), data.id_train.class_count)?;
    let pretrain = run_pretrain(config, &mut model, &data.id_train)?;
    let train_history = run_train(config, &mut model, &data.id_train)?;
    let (_, subspaces) = run_fit(config, &model, &data.id_train)?;
    let table = eval_pipeline(
        config,
        &model,
        &subspaces,
        &data.id_test,
        &[("ood".to_string(), data.ood.clone())],
    )?;
    Ok(ExperimentOutcome {
        data,
        model,
        pretrain,
        train_history,
        subspaces,
        table,
    })
}

/// Lemma check at `theory.mu` plus a μ sweep on the same graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    #[serde(flatten)]
    pub lemma: LemmaReport,
    pub feature_dim: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub mu_sweep: MuSweepReport,
}

pub fn run_theory(config: &RunConfig) -> Result<TheoryReport> {
    let t = &config.theory;
    let graph = build_adjacency(&t.sizes, t.delta, t.eta, config.seed, t.normalization)?;
    let classes = t.sizes.len();
    let d = classes + t.extra_dims;
    let w = orthonormal_init(d, classes, config.seed.wrapping_add(1))?;
    let y = one_hot_labels(&graph.class_partition);
    let opts = JointOpts {
        init: Init::Auto {
            seed: config.seed.wrapping_add(2),
        },
        ..config.joint_opts()
    };
    let result = solve_joint(&graph, &w, &y, t.mu, &opts)?;
    let lemma = verify_lemma(&graph, &result);
    let mu_sweep = mu_sweep(&graph, &w, &y, &t.mus, &opts)?;
    Ok(TheoryReport {
        lemma,
        feature_dim: d,
        converged: result.converged,
        final_loss: result.final_loss(),
        mu_sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn tiny() -> RunConfig {
        parse_config(
            "seed = 5\n[data]\nclasses = 2\nn_per_class = 30\ninput_dim = 6\nood_n = 20\n\
             [model]\nhidden = 8\nfeature_dim = 4\n[pretrain]\nepochs = 1\n[train]\nepochs = 3\n",
        )
        .unwrap()
    }

    #[test]
    fn scaler_maps_training_range_inside_unit_interval() {
        let m = Matrix::from_rows(&[vec![-2.0, 0.0], vec![2.0, 1.0]]).unwrap();
        let s = UnitRangeScaler::fit(&m, 0.25).unwrap();
        assert_eq!((s.lo, s.hi), (-3.0, 3.0));
        let ds = Dataset::new(m, None, 0).unwrap();
        let out = s.apply(&ds);
        assert!(out.inputs.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn clean_config_gives_one_row() {
        let out = run_experiment(&tiny()).unwrap();
        assert_eq!(out.table.rows.len(), 1);
        assert_eq!(out.table.rows[0].corruption, "none");
        assert!(out.table.msp_baseline.is_some());
    }

    #[test]
    fn sweep_adds_one_row_per_severity() {
        let mut c = tiny();
        c.corruption.kinds = vec![CorruptionKind::GaussianNoise];
        let out = run_experiment(&c).unwrap();
        assert_eq!(out.table.rows.len(), 6);
        let sev: Vec<u8> = out.table.rows.iter().map(|r| r.severity).collect();
        assert_eq!(sev, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn theory_report_has_lemma_fields() {
        let mut c = RunConfig::default();
        c.theory.sizes = vec![4, 3];
        c.theory.mus = vec![1e-4, 1.0];
        let report = run_theory(&c).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        for key in [
            "delta",
            "eta",
            "normalization",
            "per_class",
            "bounds",
            "pass",
            "mu_sweep",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(report.lemma.per_class.len(), 2);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let a = run_experiment(&tiny()).unwrap().table.to_json().unwrap();
        let b = run_experiment(&tiny()).unwrap().table.to_json().unwrap();
        assert_eq!(a, b);
    }
}
