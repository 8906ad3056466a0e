//! Run configuration: a strict `key = value` format with `[section]` headers.
//!
//! ```text
//! seed = 7
//! [train]
//! epochs = 40
//! lr = 0.05
//! [corruption]
//! kinds = gaussian_noise, contrast
//! ```
//!
//! Literal forms: `true`/`false`, integers, reals, quoted or bare strings and
//! comma-separated lists of those. An integer is accepted where a real is
//! expected, and a single value where a list is expected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::contrastive::{AdversarialSpec, AugmentationSpec, PretrainConfig};
use crate::corruptions::CorruptionKind;
use crate::encoder::TrainConfig;
use crate::error::{Result, RoddError};
use crate::theory::{JointOpts, Normalization};

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
    List(Vec<Value>),
}

impl Value {
    fn kind(&self) -> &'static str {
        match self {
            Value::Bool(_) => "boolean",
            Value::Int(_) => "integer",
            Value::Real(_) => "real",
            Value::Str(_) => "string",
            Value::List(_) => "list",
        }
    }

    fn parse_scalar(text: &str) -> Value {
        let t = text.trim();
        if t == "true" || t == "false" {
            return Value::Bool(t == "true");
        }
        if t.len() >= 2 && t.starts_with('"') && t.ends_with('"') {
            return Value::Str(t[1..t.len() - 1].to_string());
        }
        if let Ok(i) = t.parse::<i64>() {
            return Value::Int(i);
        }
        match t.parse::<f64>() {
            Ok(r) if r.is_finite() => Value::Real(r),
            _ => Value::Str(t.to_string()),
        }
    }

    /// Infers the literal type of a right-hand side.
    pub fn parse(text: &str) -> Value {
        let t = text.trim();
        if t.contains(',') && !(t.starts_with('"') && t.ends_with('"')) {
            Value::List(t.split(',').map(Value::parse_scalar).collect())
        } else {
            Value::parse_scalar(t)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: String,
    pub key: String,
    pub value: Value,
    pub line: usize,
}

const SECTIONS: [&str; 8] = [
    "data",
    "model",
    "pretrain",
    "train",
    "ood",
    "eval",
    "corruption",
    "theory",
];

/// Splits the text into typed entries, rejecting malformed lines, unknown
/// sections and duplicate keys.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut section = String::new();
    let mut entries: Vec<Entry> = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = strip_comment(raw).trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| parse_error(line, "unterminated section header"))?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(parse_error(line, format!("unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| parse_error(line, "expected `key = value`"))?;
        let key = key.trim();
        if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(parse_error(line, format!("invalid key `{key}`")));
        }
        if value.trim().is_empty() {
            return Err(parse_error(line, format!("missing value for `{key}`")));
        }
        if let Some(prev) = entries
            .iter()
            .find(|e| e.section == section && e.key == key)
        {
            return Err(parse_error(
                line,
                format!("duplicate key `{key}` (first set on line {})", prev.line),
            ));
        }
        entries.push(Entry {
            section: section.clone(),
            key: key.to_string(),
            value: Value::parse(value),
            line,
        });
    }
    Ok(entries)
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn parse_error(line: usize, message: impl Into<String>) -> RoddError {
    RoddError::Parse {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub n_per_class: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub test_fraction: f64,
    pub ood_n: usize,
    pub ood_offset_norm: f64,
    pub ood_noise_sigma: f64,
    pub ood_direction_seed: u64,
    /// Padding added on each side of the training range before mapping synthetic data to `[0, 1]`.
    pub scale_margin: f64,
    pub cifar_train: Option<String>,
    pub cifar_test: Option<String>,
    pub cifar_ood: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Synthetic,
            classes: 4,
            n_per_class: 500,
            input_dim: 32,
            separation: 6.0,
            noise_sigma: 1.0,
            test_fraction: 0.2,
            ood_n: 400,
            ood_offset_norm: 9.0,
            ood_noise_sigma: 1.0,
            ood_direction_seed: 1001,
            scale_margin: 0.1,
            cifar_train: None,
            cifar_test: None,
            cifar_ood: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![128, 64],
            feature_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainSection {
    pub enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub gaussian_sigma: f64,
    pub mask_fraction: f64,
    pub scale_jitter: f64,
    pub adversarial: bool,
    pub adv_epsilon: f64,
    pub adv_steps: usize,
    pub adv_step_size: f64,
    /// Gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let adv = AdversarialSpec::default();
        PretrainSection {
            enabled: true,
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            momentum: p.momentum,
            gaussian_sigma: p.augmentation.gaussian_sigma,
            mask_fraction: p.augmentation.mask_fraction,
            scale_jitter: p.augmentation.scale_jitter,
            adversarial: p.adversarial.is_some(),
            adv_epsilon: adv.epsilon,
            adv_steps: adv.steps,
            adv_step_size: adv.step_size,
            grad_clip: p.grad_clip.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub mu: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: 40,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            mu: t.mu,
            weight_decay: t.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodSection {
    pub quantile: f64,
    pub monte_carlo: bool,
    pub mc_samples: usize,
    pub mc_sigma: f64,
    pub absolute_cosine: bool,
}

impl Default for OodSection {
    fn default() -> Self {
        OodSection {
            quantile: crate::detect::DEFAULT_QUANTILE,
            monte_carlo: false,
            mc_samples: crate::detect::DEFAULT_MC_SAMPLES,
            mc_sigma: 0.01,
            absolute_cosine: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSection {
    pub tpr_target: f64,
    pub msp_baseline: bool,
    /// Let `eval` produce missing upstream artifacts instead of failing.
    pub run_missing_stages: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tpr_target: 0.95,
            msp_baseline: true,
            run_missing_stages: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionTarget {
    Id,
    Ood,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptionSection {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub target: CorruptionTarget,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        CorruptionSection {
            kinds: Vec::new(),
            severities: vec![1, 2, 3, 4, 5],
            target: CorruptionTarget::Ood,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheorySection {
    pub sizes: Vec<usize>,
    pub delta: f64,
    pub eta: f64,
    pub normalization: Normalization,
    /// Feature dimension is the class count plus this.
    pub extra_dims: usize,
    pub mu: f64,
    pub mus: Vec<f64>,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for TheorySection {
    fn default() -> Self {
        let opts = JointOpts::default();
        TheorySection {
            sizes: vec![6, 5, 4],
            delta: 0.1,
            eta: 0.0,
            normalization: Normalization::UnitSpectral,
            extra_dims: 2,
            mu: 1e-4,
            mus: vec![1e-6, 1e-4, 1e-2, 1.0, 100.0],
            max_iters: opts.max_iters,
            tol: opts.tol,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub ood: OodSection,
    pub eval: EvalSection,
    pub corruption: CorruptionSection,
    pub theory: TheorySection,
}

struct Typed<'a>(&'a Entry);

impl Typed<'_> {
    fn mismatch(&self, expected: &str) -> RoddError {
        parse_error(
            self.0.line,
            format!(
                "`{}` expects {expected}, found {}",
                self.0.key,
                self.0.value.kind()
            ),
        )
    }

    fn scalar_u64(&self, v: &Value) -> Result<u64> {
        match v {
            Value::Int(i) if *i >= 0 => Ok(*i as u64),
            _ => Err(self.mismatch("a nonnegative integer")),
        }
    }

    fn scalar_f64(&self, v: &Value) -> Result<f64> {
        match v {
            Value::Int(i) => Ok(*i as f64),
            Value::Real(r) => Ok(*r),
            _ => Err(self.mismatch("a real")),
        }
    }

    fn scalar_str<'v>(&self, v: &'v Value) -> Result<&'v str> {
        match v {
            Value::Str(s) => Ok(s),
            _ => Err(self.mismatch("a string")),
        }
    }

    fn items(&self) -> Vec<&Value> {
        match &self.0.value {
            Value::List(items) => items.iter().collect(),
            other => vec![other],
        }
    }

    fn single(&self) -> Result<&Value> {
        match &self.0.value {
            Value::List(_) => Err(self.mismatch("a single value")),
            v => Ok(v),
        }
    }

    fn u64(&self) -> Result<u64> {
        self.scalar_u64(self.single()?)
    }

    fn usize(&self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    fn f64(&self) -> Result<f64> {
        self.scalar_f64(self.single()?)
    }

    fn bool(&self) -> Result<bool> {
        match self.single()? {
            Value::Bool(b) => Ok(*b),
            _ => Err(self.mismatch("a boolean")),
        }
    }

    fn string(&self) -> Result<String> {
        Ok(self.scalar_str(self.single()?)?.to_string())
    }

    fn usize_list(&self) -> Result<Vec<usize>> {
        self.items()
            .into_iter()
            .map(|v| Ok(self.scalar_u64(v)? as usize))
            .collect()
    }

    fn f64_list(&self) -> Result<Vec<f64>> {
        self.items()
            .into_iter()
            .map(|v| self.scalar_f64(v))
            .collect()
    }

    fn str_list(&self) -> Result<Vec<&str>> {
        self.items()
            .into_iter()
            .map(|v| self.scalar_str(v))
            .collect()
    }

    fn invalid(&self, message: impl std::fmt::Display) -> RoddError {
        parse_error(self.0.line, format!("`{}`: {message}", self.0.key))
    }
}

/// Parses config text into a [`RunConfig`], starting from defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut c = RunConfig::default();
    for entry in parse_entries(text)? {
        apply(&mut c, &entry)?;
    }
    Ok(c)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path.as_ref()).map_err(|e| RoddError::io(path.as_ref(), e))?;
    parse_config(&text)
}

fn apply(c: &mut RunConfig, e: &Entry) -> Result<()> {
    let t = Typed(e);
    match (e.section.as_str(), e.key.as_str()) {
        ("", "seed") => c.seed = t.u64()?,

        ("data", "source") => {
            c.data.source = match t.string()?.as_str() {
                "synthetic" => DataSource::Synthetic,
                "cifar" => DataSource::Cifar,
                other => return Err(t.invalid(format!("unknown source `{other}`"))),
            }
        }
        ("data", "classes") => c.data.classes = t.usize()?,
        ("data", "n_per_class") => c.data.n_per_class = t.usize()?,
        ("data", "input_dim") => c.data.input_dim = t.usize()?,
        ("data", "separation") => c.data.separation = t.f64()?,
        ("data", "noise_sigma") => c.data.noise_sigma = t.f64()?,
        ("data", "test_fraction") => c.data.test_fraction = t.f64()?,
        ("data", "ood_n") => c.data.ood_n = t.usize()?,
        ("data", "ood_offset_norm") => c.data.ood_offset_norm = t.f64()?,
        ("data", "ood_noise_sigma") => c.data.ood_noise_sigma = t.f64()?,
        ("data", "ood_direction_seed") => c.data.ood_direction_seed = t.u64()?,
        ("data", "scale_margin") => c.data.scale_margin = t.f64()?,
        ("data", "cifar_train") => c.data.cifar_train = Some(t.string()?),
        ("data", "cifar_test") => c.data.cifar_test = Some(t.string()?),
        ("data", "cifar_ood") => c.data.cifar_ood = Some(t.string()?),

        ("model", "hidden") => c.model.hidden = t.usize_list()?,
        ("model", "feature_dim") => c.model.feature_dim = t.usize()?,

        ("pretrain", "enabled") => c.pretrain.enabled = t.bool()?,
        ("pretrain", "epochs") => c.pretrain.epochs = t.usize()?,
        ("pretrain", "batch_size") => c.pretrain.batch_size = t.usize()?,
        ("pretrain", "lr") => c.pretrain.lr = t.f64()?,
        ("pretrain", "momentum") => c.pretrain.momentum = t.f64()?,
        ("pretrain", "gaussian_sigma") => c.pretrain.gaussian_sigma = t.f64()?,
        ("pretrain", "mask_fraction") => c.pretrain.mask_fraction = t.f64()?,
        ("pretrain", "scale_jitter") => c.pretrain.scale_jitter = t.f64()?,
        ("pretrain", "adversarial") => c.pretrain.adversarial = t.bool()?,
        ("pretrain", "adv_epsilon") => c.pretrain.adv_epsilon = t.f64()?,
        ("pretrain", "adv_steps") => c.pretrain.adv_steps = t.usize()?,
        ("pretrain", "adv_step_size") => c.pretrain.adv_step_size = t.f64()?,
        ("pretrain", "grad_clip") => c.pretrain.grad_clip = t.f64()?,

        ("train", "epochs") => c.train.epochs = t.usize()?,
        ("train", "batch_size") => c.train.batch_size = t.usize()?,
        ("train", "lr") => c.train.lr = t.f64()?,
        ("train", "momentum") => c.train.momentum = t.f64()?,
        ("train", "mu") => c.train.mu = t.f64()?,
        ("train", "weight_decay") => c.train.weight_decay = t.f64()?,

        ("ood", "quantile") => c.ood.quantile = t.f64()?,
        ("ood", "monte_carlo") => c.ood.monte_carlo = t.bool()?,
        ("ood", "mc_samples") => c.ood.mc_samples = t.usize()?,
        ("ood", "mc_sigma") => c.ood.mc_sigma = t.f64()?,
        ("ood", "absolute_cosine") => c.ood.absolute_cosine = t.bool()?,

        ("eval", "tpr_target") => c.eval.tpr_target = t.f64()?,
        ("eval", "msp_baseline") => c.eval.msp_baseline = t.bool()?,
        ("eval", "run_missing_stages") => c.eval.run_missing_stages = t.bool()?,

        ("corruption", "kinds") => {
            c.corruption.kinds = t
                .str_list()?
                .into_iter()
                .map(|s| s.parse::<CorruptionKind>().map_err(|err| t.invalid(err)))
                .collect::<Result<_>>()?
        }
        ("corruption", "severities") => {
            c.corruption.severities = t
                .usize_list()?
                .into_iter()
                .map(|s| match s {
                    1..=5 => Ok(s as u8),
                    _ => Err(t.invalid(format!("severity {s} outside 1..=5"))),
                })
                .collect::<Result<_>>()?
        }
        ("corruption", "target") => {
            c.corruption.target = match t.string()?.as_str() {
                "id" => CorruptionTarget::Id,
                "ood" => CorruptionTarget::Ood,
                other => return Err(t.invalid(format!("target must be id or ood, got `{other}`"))),
            }
        }

        ("theory", "sizes") => c.theory.sizes = t.usize_list()?,
        ("theory", "delta") => c.theory.delta = t.f64()?,
        ("theory", "eta") => c.theory.eta = t.f64()?,
        ("theory", "normalization") => {
            c.theory.normalization =
                Normalization::parse(&t.string()?).map_err(|err| t.invalid(err))?
        }
        ("theory", "extra_dims") => c.theory.extra_dims = t.usize()?,
        ("theory", "mu") => c.theory.mu = t.f64()?,
        ("theory", "mus") => c.theory.mus = t.f64_list()?,
        ("theory", "max_iters") => c.theory.max_iters = t.usize()?,
        ("theory", "tol") => c.theory.tol = t.f64()?,

        (section, key) => {
            let place = if section.is_empty() {
                "at top level".to_string()
            } else {
                format!("in [{section}]")
            };
            return Err(parse_error(e.line, format!("unknown key `{key}` {place}")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn augmentation(&self) -> AugmentationSpec {
        AugmentationSpec {
            gaussian_sigma: self.pretrain.gaussian_sigma,
            mask_fraction: self.pretrain.mask_fraction,
            scale_jitter: self.pretrain.scale_jitter,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            momentum: self.pretrain.momentum,
            augmentation: self.augmentation(),
            adversarial: self.pretrain.adversarial.then_some(AdversarialSpec {
                epsilon: self.pretrain.adv_epsilon,
                steps: self.pretrain.adv_steps,
                step_size: self.pretrain.adv_step_size,
            }),
            grad_clip: (self.pretrain.grad_clip > 0.0).then_some(self.pretrain.grad_clip),
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            mu: self.train.mu,
            weight_decay: self.train.weight_decay,
            seed: self.seed.wrapping_add(2),
            contrastive: None,
        }
    }

    pub fn joint_opts(&self) -> JointOpts {
        JointOpts {
            max_iters: self.theory.max_iters,
            tol: self.theory.tol,
            ..JointOpts::default()
        }
    }

    /// Flattened `section.key` view of every setting, for manifests.
    pub fn to_map(&self) -> BTreeMap<String, serde_json::Value> {
        let mut out = BTreeMap::new();
        if let Ok(serde_json::Value::Object(top)) = serde_json::to_value(self) {
            for (section, v) in top {
                match v {
                    serde_json::Value::Object(inner) => {
                        for (k, v) in inner {
                            out.insert(format!("{section}.{k}"), v);
                        }
                    }
                    v => {
                        out.insert(section, v);
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(err: RoddError) -> usize {
        match err {
            RoddError::Parse { line, .. } => line,
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn literal_inference() {
        assert_eq!(Value::parse("10"), Value::Int(10));
        assert_eq!(Value::parse("0.05"), Value::Real(0.05));
        assert_eq!(Value::parse("1e-4"), Value::Real(1e-4));
        assert_eq!(Value::parse("true"), Value::Bool(true));
        assert_eq!(Value::parse("\"a, b\""), Value::Str("a, b".into()));
        assert_eq!(Value::parse("box_blur"), Value::Str("box_blur".into()));
        assert_eq!(
            Value::parse("1, 2"),
            Value::List(vec![Value::Int(1), Value::Int(2)])
        );
    }

    #[test]
    fn typed_sections() {
        let c = parse_config("seed = 3\n[train]\nepochs = 10\nlr = 0.05\nmu = 2\n# note\n[model]\nhidden = 32, 16 # trailing\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 10);
        assert_eq!(c.train.lr, 0.05);
        assert_eq!(c.train.mu, 2.0);
        assert_eq!(c.model.hidden, vec![32, 16]);
    }

    #[test]
    fn unknown_key_names_line() {
        assert_eq!(line_of(parse_config("unknown_key = 1").unwrap_err()), 1);
        assert_eq!(
            line_of(parse_config("[train]\n\nwarmup = 1").unwrap_err()),
            3
        );
    }

    #[test]
    fn duplicates_and_mismatches() {
        assert_eq!(
            line_of(parse_config("[train]\nepochs = 1\nepochs = 2").unwrap_err()),
            3
        );
        assert_eq!(
            line_of(parse_config("[train]\nepochs = 0.5").unwrap_err()),
            2
        );
        assert_eq!(line_of(parse_config("[train]\nlr = fast").unwrap_err()), 2);
        assert_eq!(
            line_of(parse_config("[pretrain]\nenabled = 1").unwrap_err()),
            2
        );
        assert_eq!(line_of(parse_config("[fog]").unwrap_err()), 1);
        assert_eq!(line_of(parse_config("seed 4").unwrap_err()), 1);
        assert_eq!(
            line_of(parse_config("[corruption]\nkinds = fog").unwrap_err()),
            2
        );
        assert_eq!(
            line_of(parse_config("[corruption]\nseverities = 1, 6").unwrap_err()),
            2
        );
    }

    #[test]
    fn same_key_in_different_sections() {
        let c = parse_config("[pretrain]\nepochs = 5\n[train]\nepochs = 6").unwrap();
        assert_eq!((c.pretrain.epochs, c.train.epochs), (5, 6));
    }

    #[test]
    fn corruption_and_theory_values() {
        let c = parse_config(
            "[corruption]\nkinds = gaussian_noise\nseverities = 5\ntarget = id\n[theory]\nnormalization = doubly-stochastic-per-block\nmus = 0, 1",
        )
        .unwrap();
        assert_eq!(c.corruption.kinds, vec![CorruptionKind::GaussianNoise]);
        assert_eq!(c.corruption.severities, vec![5]);
        assert_eq!(c.corruption.target, CorruptionTarget::Id);
        assert_eq!(c.theory.normalization, Normalization::DoublyStochastic);
        assert_eq!(c.theory.mus, vec![0.0, 1.0]);
    }

    #[test]
    fn map_view_is_flat() {
        let m = RunConfig::default().to_map();
        assert_eq!(m["seed"], serde_json::json!(0));
        assert_eq!(m["train.epochs"], serde_json::json!(40));
    }
}
