//! Experiment configuration: one JSON document with sections `data`, `model`,
//! `attacks`, `detectors`, `tuning` and `evaluation`, plus a global `seed`.
//!
//! Problems are reported with the JSON pointer of the offending value.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::AttackSpec;
use crate::data::{SplitSpec, SyntheticSpec};
use crate::ensemble::LogisticOptions;
use crate::error::{Error, Result};
use crate::hyperopt::OcsvmTuneOptions;
use crate::lid::K_GRID;
use crate::maha::{ScoreHead, LAMBDA_GRID};
use crate::refnet::{Architecture, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub attacks: Vec<NamedAttack>,
    #[serde(default)]
    pub detectors: DetectorsConfig,
    /// Cross-validation of the logistic aggregation.
    #[serde(default)]
    pub tuning: LogisticOptions,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub spread: f64,
    #[serde(default = "one")]
    pub radius: f64,
    #[serde(default = "box_lo")]
    pub box_lo: f64,
    #[serde(default = "box_hi")]
    pub box_hi: f64,
    #[serde(default)]
    pub split: SplitFractions,
    /// Standard deviation of the noise for noisy counterparts; defaults to
    /// half the attack's ε, or half the data spread for unbounded attacks.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
}

fn one() -> f64 {
    1.0
}
fn box_lo() -> f64 {
    -3.0
}
fn box_hi() -> f64 {
    3.0
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_per_class: self.n_per_class,
            n_classes: self.n_classes,
            dim: self.dim,
            spread: self.spread,
            radius: self.radius,
            box_lo: self.box_lo,
            box_hi: self.box_hi,
        }
    }

    pub fn noise_sigma_for(&self, attack: &AttackSpec) -> f64 {
        self.noise_sigma
            .unwrap_or_else(|| attack.epsilon().map_or(0.5 * self.spread, |e| 0.5 * e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            valid: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn with_seed(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            train_fraction: self.train,
            valid_fraction: self.valid,
            test_fraction: self.test,
            seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub training: TrainOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub name: String,
    #[serde(flatten)]
    pub spec: AttackSpec,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorsConfig {
    #[serde(default)]
    pub ocsvm: OcsvmTuneOptions,
    #[serde(default)]
    pub maha: MahaConfig,
    #[serde(default)]
    pub lid: LidConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MahaConfig {
    #[serde(default = "lambda_grid")]
    pub lambdas: Vec<f64>,
    #[serde(default)]
    pub head: ScoreHead,
}

fn lambda_grid() -> Vec<f64> {
    LAMBDA_GRID.to_vec()
}

impl Default for MahaConfig {
    fn default() -> Self {
        Self {
            lambdas: lambda_grid(),
            head: ScoreHead::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidConfig {
    #[serde(default = "k_grid")]
    pub ks: Vec<usize>,
}

fn k_grid() -> Vec<usize> {
    K_GRID.to_vec()
}

impl Default for LidConfig {
    fn default() -> Self {
        Self { ks: k_grid() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Tune and fit on each evaluation attack separately.
    #[default]
    Known,
    /// Tune and fit on the tuning attack only; reuse everything on the others.
    Unknown,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "known" => Ok(Mode::Known),
            "unknown" => Ok(Mode::Unknown),
            other => Err(format!("unknown mode {other:?} (expected known or unknown)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "fgsm")]
    pub tuning_attack: String,
    /// Attacks to evaluate on; all configured attacks when absent.
    #[serde(default)]
    pub attacks: Option<Vec<String>>,
}

fn fgsm() -> String {
    "fgsm".into()
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            mode: Mode::default(),
            tuning_attack: fgsm(),
            attacks: None,
        }
    }
}

fn config_error(pointer: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        message: message.into(),
    }
}

/// `a.b[2].c` (serde_path_to_error notation) → `/a/b/2/c`.
fn path_to_pointer(path: &str) -> String {
    if path == "." {
        return String::new();
    }
    let mut out = String::new();
    for seg in path.split('.') {
        let mut rest = seg;
        if let Some(i) = rest.find('[') {
            if i > 0 {
                out.push('/');
                out.push_str(&rest[..i]);
            }
            rest = &rest[i..];
            while let Some(end) = rest.find(']') {
                out.push('/');
                out.push_str(&rest[1..end]);
                rest = &rest[end + 1..];
            }
        } else {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

/// Set the value at a dotted path (`detectors.ocsvm.budget`). The raw text is
/// parsed as JSON, falling back to a plain string. Intermediate objects must
/// exist unless they are missing optional sections, which are created.
pub fn apply_override(root: &mut Value, dotted: &str, raw: &str) -> Result<()> {
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let segs: Vec<&str> = dotted.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(config_error("", format!("malformed override path {dotted:?}")));
    }
    let mut cur = root;
    let mut pointer = String::new();
    for (i, seg) in segs.iter().enumerate() {
        pointer.push('/');
        pointer.push_str(seg);
        let last = i + 1 == segs.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| config_error(&pointer, "expected an array index"))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| config_error(&pointer, format!("index out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(config_error(&pointer, "cannot descend into a scalar")),
        };
    }
    unreachable!("override path has at least one segment")
}

impl Config {
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Config = serde_path_to_error::deserialize(value).map_err(|e| {
            let pointer = path_to_pointer(&e.path().to_string());
            config_error(pointer, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(s).map_err(|e| config_error("", e.to_string()))?;
        Self::from_value(value)
    }

    /// Read a config file and apply dotted overrides before validation.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| config_error("", e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut value, k, v)?;
        }
        Self::from_value(value)
    }

    /// Fully resolved configuration (defaults filled in) as pretty JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn attack(&self, name: &str) -> Option<&NamedAttack> {
        self.attacks.iter().find(|a| a.name == name)
    }

    /// Names of the attacks to evaluate, in configuration order.
    pub fn evaluation_attacks(&self) -> Vec<String> {
        match &self.evaluation.attacks {
            Some(v) => v.clone(),
            None => self.attacks.iter().map(|a| a.name.clone()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_per_class < 2 {
            return Err(config_error("/data/n_per_class", "must be at least 2"));
        }
        if d.n_classes < 2 {
            return Err(config_error("/data/n_classes", "must be at least 2"));
        }
        if d.dim < 2 {
            return Err(config_error("/data/dim", "must be at least 2"));
        }
        if !(d.spread > 0.0) || !d.spread.is_finite() {
            return Err(config_error("/data/spread", "must be positive"));
        }
        if !(d.radius > 0.0) || !d.radius.is_finite() {
            return Err(config_error("/data/radius", "must be positive"));
        }
        if !(d.box_lo < d.box_hi) {
            return Err(config_error("/data/box_hi", "must exceed box_lo"));
        }
        if let Some(s) = d.noise_sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(config_error("/data/noise_sigma", "must be positive"));
            }
        }
        d.split
            .with_seed(0)
            .validate()
            .map_err(|e| config_error("/data/split", e.to_string()))?;

        let arch = &self.model.architecture;
        if arch.hidden.is_empty() {
            return Err(config_error("/model/architecture/hidden", "needs at least one hidden layer"));
        }
        if let Some(i) = arch.hidden.iter().position(|&w| w == 0) {
            return Err(config_error(format!("/model/architecture/hidden/{i}"), "width must be positive"));
        }
        for (i, &(layer, channels)) in arch.channel_maps.iter().enumerate() {
            let ok = layer < arch.hidden.len() && channels > 0 && arch.hidden[layer].is_multiple_of(channels);
            if !ok {
                return Err(config_error(
                    format!("/model/architecture/channel_maps/{i}"),
                    "channels must divide the width of an existing hidden layer",
                ));
            }
        }
        let t = &self.model.training;
        if t.batch_size == 0 {
            return Err(config_error("/model/training/batch_size", "must be positive"));
        }
        if !(t.learning_rate > 0.0) {
            return Err(config_error("/model/training/learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return Err(config_error("/model/training/momentum", "must lie in [0, 1)"));
        }

        if self.attacks.is_empty() {
            return Err(config_error("/attacks", "at least one attack is required"));
        }
        for (i, a) in self.attacks.iter().enumerate() {
            if a.name.is_empty() || a.name.contains(['/', '\\', '.']) {
                return Err(config_error(
                    format!("/attacks/{i}/name"),
                    "must be non-empty and free of path separators and dots",
                ));
            }
            if self.attacks[..i].iter().any(|b| b.name == a.name) {
                return Err(config_error(format!("/attacks/{i}/name"), "duplicate attack name"));
            }
            a.spec
                .validate()
                .map_err(|e| config_error(format!("/attacks/{i}"), e.to_string()))?;
        }

        if self.detectors.ocsvm.budget < 3 {
            return Err(config_error("/detectors/ocsvm/budget", "must be at least 3"));
        }
        let lambdas = &self.detectors.maha.lambdas;
        if lambdas.is_empty() {
            return Err(config_error("/detectors/maha/lambdas", "must not be empty"));
        }
        if let Some(i) = lambdas.iter().position(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(config_error(format!("/detectors/maha/lambdas/{i}"), "must be finite and >= 0"));
        }
        let ks = &self.detectors.lid.ks;
        if ks.is_empty() {
            return Err(config_error("/detectors/lid/ks", "must not be empty"));
        }
        if let Some(i) = ks.iter().position(|&k| k == 0) {
            return Err(config_error(format!("/detectors/lid/ks/{i}"), "must be at least 1"));
        }
        if self.tuning.folds < 2 {
            return Err(config_error("/tuning/folds", "must be at least 2"));
        }
        if self.tuning.reg_grid.is_empty() {
            return Err(config_error("/tuning/reg_grid", "must not be empty"));
        }
        if let Some(i) = self.tuning.reg_grid.iter().position(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(config_error(format!("/tuning/reg_grid/{i}"), "must be positive"));
        }

        if self.attack(&self.evaluation.tuning_attack).is_none() {
            return Err(config_error(
                "/evaluation/tuning_attack",
                format!("no attack named {:?}", self.evaluation.tuning_attack),
            ));
        }
        if let Some(list) = &self.evaluation.attacks {
            if list.is_empty() {
                return Err(config_error("/evaluation/attacks", "must not be empty"));
            }
            for (i, name) in list.iter().enumerate() {
                if self.attack(name).is_none() {
                    return Err(config_error(
                        format!("/evaluation/attacks/{i}"),
                        format!("no attack named {name:?}"),
                    ));
                }
                if list[..i].contains(name) {
                    return Err(config_error(format!("/evaluation/attacks/{i}"), "listed twice"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Value {
        serde_json::json!({
            "seed": 3,
            "data": {"n_per_class": 20, "n_classes": 3, "dim": 4, "spread": 0.3},
            "attacks": [{"name": "fgsm", "kind": "fgsm", "epsilon": 0.2}]
        })
    }

    #[test]
    fn defaults_fill_in() {
        let c = Config::from_value(minimal()).unwrap();
        assert_eq!(c.detectors.ocsvm.budget, 25);
        assert_eq!(c.detectors.lid.ks.len(), 9);
        assert_eq!(c.detectors.maha.lambdas.len(), 7);
        assert_eq!(c.evaluation.mode, Mode::Known);
        assert_eq!(c.evaluation_attacks(), vec!["fgsm".to_string()]);
        let back = Config::from_json_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_field_reports_pointer() {
        let mut v = minimal();
        v["detectors"] = serde_json::json!({"ocsvm": {"budgett": 3}});
        match Config::from_value(v) {
            Err(Error::Config { pointer, .. }) => assert_eq!(pointer, "/detectors/ocsvm/budgett"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_error_in_array_reports_index() {
        let mut v = minimal();
        v["detectors"] = serde_json::json!({"lid": {"ks": [10, "x"]}});
        match Config::from_value(v) {
            Err(Error::Config { pointer, .. }) => assert_eq!(pointer, "/detectors/lid/ks/1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_report_pointer() {
        let mut v = minimal();
        v["evaluation"] = serde_json::json!({"tuning_attack": "bim"});
        match Config::from_value(v) {
            Err(Error::Config { pointer, .. }) => assert_eq!(pointer, "/evaluation/tuning_attack"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dotted_overrides() {
        let mut v = minimal();
        apply_override(&mut v, "detectors.ocsvm.budget", "40").unwrap();
        apply_override(&mut v, "evaluation.mode", "unknown").unwrap();
        apply_override(&mut v, "attacks.0.epsilon", "0.25").unwrap();
        let c = Config::from_value(v.clone()).unwrap();
        assert_eq!(c.detectors.ocsvm.budget, 40);
        assert_eq!(c.evaluation.mode, Mode::Unknown);
        assert_eq!(c.attacks[0].spec.epsilon(), Some(0.25));
        assert!(apply_override(&mut v, "attacks.7.epsilon", "1").is_err());
        assert!(apply_override(&mut v, "seed.x", "1").is_err());
    }

    #[test]
    fn pointer_conversion() {
        assert_eq!(path_to_pointer("a.b[2].c"), "/a/b/2/c");
        assert_eq!(path_to_pointer("attacks[0]"), "/attacks/0");
        assert_eq!(path_to_pointer("."), "");
    }
}
