//! `rodd`: file-based experiment stages for OOD detection with
//! uni-dimensional class embeddings.

mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rodd_core::config::{parse_config, CorruptionTarget, DataSource, RunConfig};
use rodd_core::contrastive::AugmentationSpec;
use rodd_core::corruptions::{corrupt_dataset, CorruptionSpec};
use rodd_core::data::{
    read_dataset, read_features, write_dataset, write_features, Dataset, GridShape,
};
use rodd_core::detect::{
    detect, mc_detect_all, save_score_table, score_features, ClassSubspaceSet, McConfig,
};
use rodd_core::encoder::EncoderModel;
use rodd_core::pipeline::{
    build_model, eval_pipeline, prepare_data, run_fit, run_pretrain, run_theory, run_train,
};
use rodd_core::{Result, RoddError};

use manifest::{io_error, Manifest};

const ID_TRAIN: &str = "id_train.feat";
const ID_TEST: &str = "id_test.feat";
const OOD: &str = "ood.feat";
const SCALER: &str = "scaler.json";
const PRETRAINED: &str = "pretrained.model";
const PRETRAIN_HISTORY: &str = "pretrain_history.json";
const MODEL: &str = "model.bin";
const TRAIN_HISTORY: &str = "train_history.json";
const TRAIN_FEATURES: &str = "train_features.feat";
const SUBSPACES: &str = "subspaces.json";
const ID_TEST_FEATURES: &str = "id_test_features.feat";
const OOD_FEATURES: &str = "ood_features.feat";
const SCORES_ID: &str = "scores_id_test.csv";
const SCORES_OOD: &str = "scores_ood.csv";
const EVAL_JSON: &str = "eval_report.json";
const EVAL_CSV: &str = "eval_report.csv";
const THEORY: &str = "theory_report.json";

#[derive(Parser)]
#[command(
    name = "rodd",
    version,
    about = "OOD detection with uni-dimensional class embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts and the run manifest.
    #[arg(long, default_value = "rodd-out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pre-training of the encoder body.
    Pretrain(Common),
    /// Supervised training with the frozen orthonormal head.
    Train(Common),
    /// Fit per-class directions and the score threshold.
    Fit(Common),
    /// Write per-sample score tables for ID test and OOD data.
    Score(Common),
    /// Detection metrics for clean and corrupted data.
    Eval(Common),
    /// Write corrupted copies of the configured target set.
    Corrupt(Common),
    /// Check the singular-value tail bounds on a synthetic augmentation graph.
    VerifyTheory(Common),
    /// Generate (or import) the ID and OOD datasets.
    Synth(Common),
}

struct Run {
    config: RunConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn open(common: &Common) -> Result<Self> {
        let bytes = std::fs::read(&common.config).map_err(|e| io_error(&common.config, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| RoddError::Parse {
            line: 0,
            message: "config is not UTF-8".into(),
        })?;
        let mut config = parse_config(&text)?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        if config.data.source == DataSource::Cifar {
            config.data.classes = 10;
        }
        std::fs::create_dir_all(&common.out).map_err(|e| io_error(&common.out, e))?;
        let mut manifest = Manifest::load_or_default(&common.out)?;
        manifest.record_config(&common.config, &bytes, config.seed);
        Ok(Run {
            config,
            out: common.out.clone(),
            manifest,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn has(&self, name: &str) -> bool {
        self.path(name).exists()
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        if path.exists() {
            Ok(path)
        } else {
            Err(RoddError::Contract(format!(
                "missing artifact {}; run the stage that produces it first",
                path.display()
            )))
        }
    }

    fn wrote(&mut self, name: &str) {
        self.manifest.add_artifact(name);
        eprintln!("wrote {}", self.path(name).display());
    }

    fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .map_err(|e| io_error(&path, e))?;
        self.wrote(name);
        Ok(())
    }

    fn grid(&self) -> Option<GridShape> {
        (self.config.data.source == DataSource::Cifar).then_some(GridShape {
            channels: 3,
            height: 32,
            width: 32,
        })
    }

    fn load_data(&self, name: &str, labelled: bool) -> Result<Dataset> {
        let classes = if labelled {
            self.config.data.classes
        } else {
            0
        };
        let mut ds = read_dataset(self.require(name)?, classes)?;
        if !labelled {
            ds.labels = None;
            ds.class_count = 0;
        }
        match self.grid() {
            Some(g) if g.len() == ds.input_dim() => ds.with_grid(g),
            _ => Ok(ds),
        }
    }

    fn load_model(&self, name: &str) -> Result<EncoderModel> {
        EncoderModel::load(self.require(name)?)
    }

    fn load_subspaces(&self) -> Result<ClassSubspaceSet> {
        ClassSubspaceSet::load(self.require(SUBSPACES)?)
    }

    fn finish(mut self, stage: &str) -> Result<()> {
        let out = self.out.clone();
        self.manifest.save(&out, stage)
    }
}

fn synth(run: &mut Run) -> Result<()> {
    let data = prepare_data(&run.config)?;
    write_dataset(run.path(ID_TRAIN), &data.id_train)?;
    run.wrote(ID_TRAIN);
    write_dataset(run.path(ID_TEST), &data.id_test)?;
    run.wrote(ID_TEST);
    write_dataset(run.path(OOD), &data.ood)?;
    run.wrote(OOD);
    if let Some(scaler) = data.scaler {
        run.write_json(SCALER, &scaler)?;
    }
    Ok(())
}

fn pretrain(run: &mut Run) -> Result<()> {
    if !run.config.pretrain.enabled {
        return Err(RoddError::Contract(
            "pretraining is disabled in the config ([pretrain] enabled = false)".into(),
        ));
    }
    let data = run.load_data(ID_TRAIN, true)?;
    let mut model = build_model(&run.config, data.input_dim(), data.class_count)?;
    let report = run_pretrain(&run.config, &mut model, &data)?;
    model.save(run.path(PRETRAINED))?;
    run.wrote(PRETRAINED);
    if let Some(r) = report {
        let history = serde_json::json!({
            "loss": r.loss_history,
            "adversarial_gain_fraction": r.adversarial_gain_fraction,
        });
        run.write_json(PRETRAIN_HISTORY, &history)?;
    }
    Ok(())
}

fn train(run: &mut Run) -> Result<()> {
    let data = run.load_data(ID_TRAIN, true)?;
    let mut model = if run.has(PRETRAINED) {
        eprintln!("starting from {}", run.path(PRETRAINED).display());
        run.load_model(PRETRAINED)?
    } else {
        build_model(&run.config, data.input_dim(), data.class_count)?
    };
    let history = run_train(&run.config, &mut model, &data)?;
    model.save(run.path(MODEL))?;
    run.wrote(MODEL);
    let rows: Vec<_> = history
        .iter()
        .map(|e| serde_json::json!({ "loss": e.loss, "accuracy": e.accuracy }))
        .collect();
    run.write_json(TRAIN_HISTORY, &rows)?;
    if let Some(last) = history.last() {
        println!(
            "final epoch: loss {:.6} accuracy {:.4}",
            last.loss, last.accuracy
        );
    }
    Ok(())
}

fn fit(run: &mut Run) -> Result<()> {
    let model = run.load_model(MODEL)?;
    let data = run.load_data(ID_TRAIN, true)?;
    let (features, subspaces) = run_fit(&run.config, &model, &data)?;
    write_features(run.path(TRAIN_FEATURES), &features, data.labels.as_deref())?;
    run.wrote(TRAIN_FEATURES);
    subspaces.save(run.path(SUBSPACES))?;
    run.wrote(SUBSPACES);
    println!(
        "threshold {:.6} at quantile {}",
        subspaces.threshold, subspaces.quantile_used
    );
    Ok(())
}

fn score(run: &mut Run) -> Result<()> {
    let subspaces = run.load_subspaces()?;
    let c = &run.config;
    let mc = McConfig {
        samples: c.ood.mc_samples,
        noise: AugmentationSpec {
            gaussian_sigma: c.ood.mc_sigma,
            ..Default::default()
        },
        seed: c.seed,
    };
    let monte_carlo = c.ood.monte_carlo;
    let (id_records, ood_records) = if run.has(MODEL) {
        let model = run.load_model(MODEL)?;
        let id = run.load_data(ID_TEST, true)?;
        let ood = run.load_data(OOD, false)?;
        write_features(
            run.path(ID_TEST_FEATURES),
            &model.encode(&id.inputs)?,
            id.labels.as_deref(),
        )?;
        run.wrote(ID_TEST_FEATURES);
        write_features(run.path(OOD_FEATURES), &model.encode(&ood.inputs)?, None)?;
        run.wrote(OOD_FEATURES);
        if monte_carlo {
            (
                mc_detect_all(&model, &subspaces, &id.inputs, &mc)?,
                mc_detect_all(&model, &subspaces, &ood.inputs, &mc)?,
            )
        } else {
            (
                detect(&model, &subspaces, &id.inputs)?,
                detect(&model, &subspaces, &ood.inputs)?,
            )
        }
    } else {
        if monte_carlo {
            return Err(RoddError::Contract(format!(
                "Monte-Carlo scoring needs the encoder; missing {}",
                run.path(MODEL).display()
            )));
        }
        eprintln!("no {MODEL}; scoring precomputed feature files");
        let (id, _) = read_features(run.require(ID_TEST_FEATURES)?)?;
        let (ood, _) = read_features(run.require(OOD_FEATURES)?)?;
        (
            score_features(&id, &subspaces)?,
            score_features(&ood, &subspaces)?,
        )
    };
    save_score_table(run.path(SCORES_ID), &id_records)?;
    run.wrote(SCORES_ID);
    save_score_table(run.path(SCORES_OOD), &ood_records)?;
    run.wrote(SCORES_OOD);
    Ok(())
}

fn eval(run: &mut Run) -> Result<()> {
    if run.config.eval.run_missing_stages {
        if !(run.has(ID_TRAIN) && run.has(ID_TEST) && run.has(OOD)) {
            synth(run)?;
        }
        if !run.has(MODEL) {
            if run.config.pretrain.enabled && !run.has(PRETRAINED) {
                pretrain(run)?;
            }
            train(run)?;
        }
        if !run.has(SUBSPACES) {
            fit(run)?;
        }
    }
    let model = run.load_model(MODEL)?;
    let subspaces = run.load_subspaces()?;
    let id_test = run.load_data(ID_TEST, true)?;
    let ood = run.load_data(OOD, false)?;
    let table = eval_pipeline(
        &run.config,
        &model,
        &subspaces,
        &id_test,
        &[("ood".to_string(), ood)],
    )?;
    table.save(run.path(EVAL_JSON), run.path(EVAL_CSV))?;
    run.wrote(EVAL_JSON);
    run.wrote(EVAL_CSV);
    println!("id accuracy {:.4}", table.id_accuracy);
    println!(
        "{:<8} {:<16} {:>3} {:>8} {:>8} {:>8}",
        "set", "corruption", "sev", "fpr95", "auroc", "det_err"
    );
    for r in table.rows.iter().chain(table.msp_baseline.as_ref()) {
        println!(
            "{:<8} {:<16} {:>3} {:>8.4} {:>8.4} {:>8.4}",
            r.ood_set, r.corruption, r.severity, r.fpr95, r.auroc, r.detection_error
        );
    }
    Ok(())
}

fn corrupt(run: &mut Run) -> Result<()> {
    let c = run.config.corruption.clone();
    if c.kinds.is_empty() {
        return Err(RoddError::Contract(
            "no corruption kinds configured ([corruption] kinds)".into(),
        ));
    }
    let (name, data) = match c.target {
        CorruptionTarget::Ood => ("ood", run.load_data(OOD, false)?),
        CorruptionTarget::Id => ("id_test", run.load_data(ID_TEST, true)?),
    };
    let dir = run.path("corrupted");
    std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    for kind in &c.kinds {
        for &severity in &c.severities {
            let spec = CorruptionSpec::new(*kind, severity, run.config.seed)?;
            let out = corrupt_dataset(&data, &spec)?;
            let file = format!("corrupted/{name}_{kind}_s{severity}.feat");
            write_dataset(run.path(&file), &out)?;
            run.wrote(&file);
        }
    }
    Ok(())
}

fn verify_theory(run: &mut Run) -> Result<()> {
    let report = run_theory(&run.config)?;
    run.write_json(THEORY, &report)?;
    println!(
        "delta {} mu {}: lemma {} (bound2 {:.6}, bound4 {:.6}); mu sweep passing prefix {}/{}",
        report.lemma.delta,
        report.lemma.mu,
        if report.lemma.pass { "PASS" } else { "FAIL" },
        report.lemma.bounds.bound2,
        report.lemma.bounds.bound4,
        report.mu_sweep.passing_prefix,
        report.mu_sweep.rows.len()
    );
    Ok(())
}

type Stage = fn(&mut Run) -> Result<()>;

fn dispatch(command: Command) -> Result<()> {
    let (common, stage, f): (Common, &str, Stage) = match command {
        Command::Pretrain(c) => (c, "pretrain", pretrain),
        Command::Train(c) => (c, "train", train),
        Command::Fit(c) => (c, "fit", fit),
        Command::Score(c) => (c, "score", score),
        Command::Eval(c) => (c, "eval", eval),
        Command::Corrupt(c) => (c, "corrupt", corrupt),
        Command::VerifyTheory(c) => (c, "verify-theory", verify_theory),
        Command::Synth(c) => (c, "synth", synth),
    };
    let mut run = Run::open(&common)?;
    f(&mut run)?;
    run.finish(stage)
}

fn exit_code(err: &RoddError) -> u8 {
    if err.is_numeric() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
