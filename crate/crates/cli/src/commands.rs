use std::fs;
use std::path::{Path, PathBuf};

use advdet_core::config::{Config, Mode};
use advdet_core::data::SyntheticData;
use advdet_core::features::{feature_paths, read_features, write_features};
use advdet_core::pipeline::{
    build_attack_data, contingency_csv, extract_split_features, fit_layer_models, fit_suite, generate_data,
    layer_auroc_csv, markdown_table, metrics_csv, run_pipeline, tune_detectors, AttackData, DetectorSuite,
    EvaluationReport, Hyperparameters, SplitFeatures,
};
use advdet_core::{FeatureBundle, TinyNet};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{AttackArgs, ConfigArgs, ReportArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] advdet_core::Error),
    #[error("stage `{stage}`: missing upstream artifact {}", path.display())]
    Missing { stage: String, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => e.exit_code() as u8,
            CliError::Missing { .. } | CliError::Io { .. } | CliError::Json { .. } => 4,
            CliError::Usage(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Artifact layout below `--out`.
struct Layout(PathBuf);

impl Layout {
    fn data(&self) -> PathBuf {
        self.0.join("data.json")
    }
    fn model(&self) -> PathBuf {
        self.0.join("model.json")
    }
    fn train_report(&self) -> PathBuf {
        self.0.join("train_report.json")
    }
    fn attack(&self, name: &str) -> PathBuf {
        self.0.join("attacks").join(format!("{name}.json"))
    }
    fn features(&self, name: &str, split: &str) -> PathBuf {
        self.0.join("features").join(name).join(split)
    }
    fn tuning(&self, name: &str) -> PathBuf {
        self.0.join("tuning").join(format!("{name}.json"))
    }
    fn trials(&self, name: &str, layer: &str) -> PathBuf {
        self.0.join("tuning").join(name).join(format!("ocsvm_{layer}.csv"))
    }
    fn detectors(&self, name: &str) -> PathBuf {
        self.0.join("detectors").join(format!("{name}.json"))
    }
    fn lid_reference(&self, name: &str) -> PathBuf {
        self.0.join("detectors").join(format!("{name}_lid_reference"))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str, manifest: &mut RunManifest) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))?;
    manifest.artifact(path);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, manifest: &mut RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_text(path, &text, manifest)
}

fn require(stage: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing {
            stage: stage.to_string(),
            path: path.to_path_buf(),
        })
    }
}

fn read_text(stage: &str, path: &Path, manifest: &mut RunManifest) -> Result<String> {
    require(stage, path)?;
    manifest.input(path);
    fs::read_to_string(path).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(stage: &str, path: &Path, manifest: &mut RunManifest) -> Result<T> {
    let text = read_text(stage, path, manifest)?;
    serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn read_model(stage: &str, layout: &Layout, manifest: &mut RunManifest) -> Result<TinyNet> {
    let text = read_text(stage, &layout.model(), manifest)?;
    Ok(TinyNet::from_json(&text)?)
}

fn save_features(bundle: &FeatureBundle, stem: &Path, manifest: &mut RunManifest) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_features(bundle, stem)?;
    let (h, b) = feature_paths(stem);
    manifest.artifact(&h);
    manifest.artifact(&b);
    Ok(())
}

fn load_features(stage: &str, stem: &Path, manifest: &mut RunManifest) -> Result<FeatureBundle> {
    let (h, b) = feature_paths(stem);
    require(stage, &h)?;
    require(stage, &b)?;
    manifest.input(&h);
    manifest.input(&b);
    Ok(read_features(stem)?)
}

fn load_config(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<Config> {
    let mut all = overrides.to_vec();
    if let Some(seed) = args.seed {
        all.push(("seed".into(), seed.to_string()));
    }
    let cfg = Config::load(&args.config, &all)?;
    for a in &cfg.attacks {
        if a.name.is_empty() || a.name.contains(['/', '\\']) || a.name.starts_with('.') {
            return Err(CliError::Usage(format!("attack name {:?} cannot be used as a file name", a.name)));
        }
    }
    Ok(cfg)
}

fn start(command: &str, cfg: &Config) -> RunManifest {
    RunManifest::new(command).with_config(&cfg.to_json(), cfg.seed)
}

fn finish(out: &Path, mut manifest: RunManifest) -> Result<()> {
    let path = RunManifest::path(out, &manifest.command);
    manifest.artifact(&path);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| CliError::Json {
        path: path.clone(),
        source,
    })?;
    write_text(&path, &text, &mut RunManifest::new("discard"))
}

fn selected_attacks(args: &AttackArgs, cfg: &Config) -> Result<Vec<String>> {
    if args.attacks.is_empty() {
        return Ok(cfg.evaluation_attacks());
    }
    for name in &args.attacks {
        if cfg.attack(name).is_none() {
            return Err(CliError::Usage(format!("no attack named {name:?} in the configuration")));
        }
    }
    Ok(args.attacks.clone())
}

pub fn gen_data(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(args, overrides)?;
    let layout = Layout(args.out.clone());
    let mut m = start("gen-data", &cfg);
    let data = m.timed("gen-data", || generate_data(&cfg))?;
    write_json(&layout.data(), &data, &mut m)?;
    finish(&args.out, m)
}

pub fn train_model(args: &ConfigArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(args, overrides)?;
    let layout = Layout(args.out.clone());
    let mut m = start("train-model", &cfg);
    let data: SyntheticData = read_json("train-model", &layout.data(), &mut m)?;
    let (net, report) = m.timed("train-model", || advdet_core::pipeline::train_model(&cfg, &data))?;
    log::info!(
        "train accuracy {:.4}, test accuracy {:?}",
        report.train_accuracy,
        report.test_accuracy
    );
    write_text(&layout.model(), &net.to_json()?, &mut m)?;
    write_json(&layout.train_report(), &report, &mut m)?;
    finish(&args.out, m)
}

pub fn attack(args: &AttackArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    let layout = Layout(args.common.out.clone());
    let mut m = start("attack", &cfg);
    let data: SyntheticData = read_json("attack", &layout.data(), &mut m)?;
    let net = read_model("attack", &layout, &mut m)?;
    for name in selected_attacks(args, &cfg)? {
        let spec = cfg.attack(&name).expect("attack checked");
        let ad = m.timed(format!("attack/{name}"), || build_attack_data(&cfg, &net, &data, spec))?;
        log::info!(
            "{name}: success rate {:.4} ({} of {})",
            ad.assemble.success_rate(),
            ad.assemble.kept,
            ad.assemble.attempted
        );
        write_json(&layout.attack(&name), &ad, &mut m)?;
    }
    finish(&args.common.out, m)
}

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn load_split_features(stage: &str, layout: &Layout, name: &str, m: &mut RunManifest) -> Result<SplitFeatures> {
    Ok(SplitFeatures {
        train: load_features(stage, &layout.features(name, "train"), m)?,
        valid: load_features(stage, &layout.features(name, "valid"), m)?,
        test: load_features(stage, &layout.features(name, "test"), m)?,
    })
}

pub fn extract(args: &AttackArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    let layout = Layout(args.common.out.clone());
    let mut m = start("extract", &cfg);
    let net = read_model("extract", &layout, &mut m)?;
    for name in selected_attacks(args, &cfg)? {
        let ad: AttackData = read_json("extract", &layout.attack(&name), &mut m)?;
        let feats = m.timed(format!("extract/{name}"), || extract_split_features(&net, &ad.splits))?;
        for (split, bundle) in SPLITS.iter().zip([&feats.train, &feats.valid, &feats.test]) {
            save_features(bundle, &layout.features(&name, split), &mut m)?;
        }
    }
    finish(&args.common.out, m)
}

fn write_tuning(layout: &Layout, hyper: &Hyperparameters, layer_names: &[String], m: &mut RunManifest) -> Result<()> {
    write_json(&layout.tuning(&hyper.tuned_on), hyper, m)?;
    for (t, layer) in hyper.ocsvm.iter().zip(layer_names) {
        let path = layout.trials(&hyper.tuned_on, layer);
        let mut buf = Vec::new();
        t.log.write_csv(&mut buf)?;
        write_text(&path, &String::from_utf8_lossy(&buf), m)?;
    }
    Ok(())
}

pub fn tune(args: &AttackArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    let layout = Layout(args.common.out.clone());
    let mut m = start("tune", &cfg);
    let data: SyntheticData = read_json("tune", &layout.data(), &mut m)?;
    let net = read_model("tune", &layout, &mut m)?;
    let layers = m.timed("fit-layer-models", || fit_layer_models(&net, &data.train))?;
    for name in selected_attacks(args, &cfg)? {
        let ad: AttackData = read_json("tune", &layout.attack(&name), &mut m)?;
        let feats = load_split_features("tune", &layout, &name, &mut m)?;
        let hyper = m.timed(format!("tune/{name}"), || tune_detectors(&cfg, &net, &layers, &ad, &feats))?;
        write_tuning(&layout, &hyper, &layers.layer_names, &mut m)?;
    }
    finish(&args.common.out, m)
}

fn write_suite(layout: &Layout, suite: &DetectorSuite, m: &mut RunManifest) -> Result<()> {
    let stem = layout.lid_reference(&suite.tuned_on);
    save_features(&suite.lid_reference_bundle, &stem, m)?;
    let file = stem.file_name().expect("stem has a name").to_string_lossy().into_owned();
    write_json(&layout.detectors(&suite.tuned_on), &suite.to_bundle(&file), m)
}

pub fn fit(args: &AttackArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(&args.common, overrides)?;
    let layout = Layout(args.common.out.clone());
    let mut m = start("fit", &cfg);
    let data: SyntheticData = read_json("fit", &layout.data(), &mut m)?;
    let net = read_model("fit", &layout, &mut m)?;
    let layers = m.timed("fit-layer-models", || fit_layer_models(&net, &data.train))?;
    for name in selected_attacks(args, &cfg)? {
        let ad: AttackData = read_json("fit", &layout.attack(&name), &mut m)?;
        let feats = load_split_features("fit", &layout, &name, &mut m)?;
        let hyper: Hyperparameters = read_json("fit", &layout.tuning(&name), &mut m)?;
        let suite = m.timed(format!("fit/{name}"), || fit_suite(&cfg, &net, &layers, &ad, &feats, &hyper))?;
        write_suite(&layout, &suite, &mut m)?;
    }
    finish(&args.common.out, m)
}

fn write_tables(out: &Path, report: &EvaluationReport, m: &mut RunManifest) -> Result<()> {
    write_text(&out.join("metrics.csv"), &metrics_csv(report), m)?;
    write_text(&out.join("table.md"), &markdown_table(report), m)
}

pub fn evaluate(
    args: &ConfigArgs,
    overrides: &[(String, String)],
    mode: Option<Mode>,
    tuning_attack: Option<String>,
) -> Result<()> {
    let mut all = overrides.to_vec();
    if let Some(mode) = mode {
        let s = match mode {
            Mode::Known => "known",
            Mode::Unknown => "unknown",
        };
        all.push(("evaluation.mode".into(), format!("\"{s}\"")));
    }
    if let Some(t) = tuning_attack {
        all.push(("evaluation.tuning_attack".into(), serde_json::Value::String(t).to_string()));
    }
    let cfg = load_config(args, &all)?;
    let layout = Layout(args.out.clone());
    let mut m = start("evaluate", &cfg);
    m.input(&args.config);
    let out = m.timed("pipeline", || run_pipeline(&cfg))?;
    write_text(&args.out.join("config.resolved.json"), &cfg.to_json(), &mut m)?;
    write_text(&layout.model(), &out.net.to_json()?, &mut m)?;
    for (hyper, suite) in out.hyperparameters.iter().zip(&out.suites) {
        write_tuning(&layout, hyper, &suite.layer_names, &mut m)?;
        write_suite(&layout, suite, &mut m)?;
    }
    write_text(&args.out.join("report.json"), &out.report.to_json(), &mut m)?;
    write_tables(&args.out, &out.report, &mut m)?;
    write_text(&args.out.join("contingency.csv"), &contingency_csv(&out.report), &mut m)?;
    write_text(&args.out.join("layer_auroc.csv"), &layer_auroc_csv(&out.report), &mut m)?;
    for a in &out.report.attacks {
        if let Some(e) = a.detector("EnAD") {
            log::info!("{}: EnAD AUROC {:.4} AUPR {:.4}", a.attack, e.auroc, e.aupr);
        }
    }
    finish(&args.out, m)
}

fn load_report(args: &ReportArgs, m: &mut RunManifest) -> Result<EvaluationReport> {
    let text = read_text("report", &args.report, m)?;
    Ok(EvaluationReport::from_json(&text)?)
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut m = RunManifest::new("report");
    let report = load_report(args, &mut m)?;
    write_tables(&args.out, &report, &mut m)?;
    finish(&args.out, m)
}

pub fn contingency(args: &ReportArgs) -> Result<()> {
    let mut m = RunManifest::new("contingency");
    let report = load_report(args, &mut m)?;
    write_text(&args.out.join("contingency.csv"), &contingency_csv(&report), &mut m)?;
    finish(&args.out, m)
}

pub fn layer_auroc(args: &ReportArgs) -> Result<()> {
    let mut m = RunManifest::new("layer-auroc");
    let report = load_report(args, &mut m)?;
    write_text(&args.out.join("layer_auroc.csv"), &layer_auroc_csv(&report), &mut m)?;
    finish(&args.out, m)
}
