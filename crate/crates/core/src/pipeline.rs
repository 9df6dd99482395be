//! End-to-end experiment: data → reference model → labelled attack sets →
//! per-detector tuning → layer scores → logistic aggregation → test metrics.
//!
//! Every stage draws its randomness from a substream named after the stage
//! (and, where relevant, the attack), so a stage's output depends only on the
//! configuration and the global seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Mode, NamedAttack};
use crate::data::{
    assemble_labeled_set, generate_synthetic_dataset, split_labeled_set, AssembleReport, Example,
    LabeledSet, Provenance, Splits, SyntheticData,
};
use crate::ensemble::{
    aupr, auroc, classify, contingency, fit_logistic, per_layer_auroc, posterior, Combination,
    Confusion, Contingency, Detector, DetectorScores, LayerAuroc, LogisticModel,
};
use crate::error::{Error, Result};
use crate::features::FeatureBundle;
use crate::hyperopt::{tune_ocsvm, GridSelection, LayerTuning, OcsvmLayerData};
use crate::lid::{lid_layer_scores, resolve_sentinels, select_k, KSelection, LidReference};
use crate::linalg::Matrix;
use crate::maha::{
    fit_gaussian, maha_scores_from_inputs, select_lambda, GaussianLayerModel, LambdaSelection, ScoreHead,
};
use crate::ocsvm::{fit_ocsvm, ocsvm_layer_scores, OcsvmModel, OcsvmParams};
use crate::refnet::{TinyNet, TrainReport};
use crate::rng::derive_seed;
use crate::whitening::LayerWhitener;

pub const REPORT_VERSION: u32 = 1;

fn stage<T>(name: impl Into<String>, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Synthetic train/test data.
pub fn generate_data(cfg: &Config) -> Result<SyntheticData> {
    stage(
        "gen-data",
        generate_synthetic_dataset(&cfg.data.synthetic_spec(), derive_seed(cfg.seed, "data")),
    )
}

/// Initialise and train the reference classifier.
pub fn train_model(cfg: &Config, data: &SyntheticData) -> Result<(TinyNet, TrainReport)> {
    stage("train-model", (|| {
        let net = TinyNet::init(
            cfg.data.dim,
            cfg.data.n_classes,
            &cfg.model.architecture,
            cfg.data.synthetic_spec().input_box(),
            derive_seed(cfg.seed, "model/init"),
        )?;
        net.train(
            &data.train,
            Some(&data.test),
            &cfg.model.training,
            derive_seed(cfg.seed, "model/train"),
        )
    })())
}

/// Per-layer statistics of the network's training set: the whitener and
/// Gaussian model of every layer, plus the whitened rows the OCSVMs fit on.
#[derive(Clone, Debug)]
pub struct LayerModels {
    pub layer_names: Vec<String>,
    pub whiteners: Vec<LayerWhitener>,
    pub gaussians: Vec<GaussianLayerModel>,
    pub whitened_train: Vec<Matrix>,
}

pub fn fit_layer_models(net: &TinyNet, train: &[Example]) -> Result<LayerModels> {
    stage("fit-layer-models", (|| {
        let inputs: Vec<&[f64]> = train.iter().map(|e| e.input.as_slice()).collect();
        let labels: Vec<usize> = train.iter().map(|e| e.true_label).collect();
        let bundle = net.extract_features(&inputs)?;
        let c = net.n_classes();
        let per_layer: Vec<(LayerWhitener, GaussianLayerModel, Matrix)> = (0..bundle.n_layers())
            .into_par_iter()
            .map(|l| {
                let w = LayerWhitener::fit(bundle.layer(l), &labels, c)?;
                let g = fit_gaussian(bundle.layer(l), &labels, c)?;
                let z = w.whiten_rows(bundle.layer(l), &labels)?;
                Ok((w, g, z))
            })
            .collect::<Result<_>>()?;
        let mut out = LayerModels {
            layer_names: bundle.layer_names().to_vec(),
            whiteners: Vec::new(),
            gaussians: Vec::new(),
            whitened_train: Vec::new(),
        };
        for (w, g, z) in per_layer {
            out.whiteners.push(w);
            out.gaussians.push(g);
            out.whitened_train.push(z);
        }
        Ok(out)
    })())
}

/// Labelled set of one attack, split into train/valid/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackData {
    pub name: String,
    pub kind: String,
    pub assemble: AssembleReport,
    pub splits: Splits,
}

/// Test examples the network classifies correctly.
pub fn correctly_classified(net: &TinyNet, examples: &[Example]) -> Result<Vec<Example>> {
    let keep: Vec<bool> = examples
        .par_iter()
        .map(|e| Ok(net.predict(&e.input)? == e.true_label))
        .collect::<Result<_>>()?;
    Ok(examples
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(e, _)| e.clone())
        .collect())
}

pub fn build_attack_data(cfg: &Config, net: &TinyNet, data: &SyntheticData, attack: &NamedAttack) -> Result<AttackData> {
    stage(format!("attack/{}", attack.name), (|| {
        let norm = correctly_classified(net, &data.test)?;
        let (set, assemble) = assemble_labeled_set(
            &norm,
            net,
            &attack.spec,
            cfg.data.noise_sigma_for(&attack.spec),
            derive_seed(cfg.seed, &format!("attack/{}/noise", attack.name)),
        )?;
        let split = cfg
            .data
            .split
            .with_seed(derive_seed(cfg.seed, &format!("attack/{}/split", attack.name)));
        Ok(AttackData {
            name: attack.name.clone(),
            kind: attack.spec.kind_name().to_string(),
            assemble,
            splits: split_labeled_set(&set, &split)?,
        })
    })())
}

/// Network features of the three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitFeatures {
    pub train: FeatureBundle,
    pub valid: FeatureBundle,
    pub test: FeatureBundle,
}

pub fn extract_split_features(net: &TinyNet, splits: &Splits) -> Result<SplitFeatures> {
    let ex = |s: &LabeledSet| net.extract_features(&s.inputs());
    stage("extract", (|| {
        Ok(SplitFeatures {
            train: ex(&splits.train)?,
            valid: ex(&splits.valid)?,
            test: ex(&splits.test)?,
        })
    })())
}

/// Selected hyperparameters with the evidence behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub tuned_on: String,
    pub ocsvm: Vec<LayerTuning>,
    pub lambda: GridSelection<f64>,
    pub k: GridSelection<usize>,
}

/// Rows of the LID reference: the normal members of the training split.
pub fn lid_reference_bundle(splits: &Splits, feats: &SplitFeatures) -> FeatureBundle {
    feats
        .train
        .select_rows(&splits.train.indices_of(Provenance::Norm))
}

pub fn tune_detectors(
    cfg: &Config,
    net: &TinyNet,
    layers: &LayerModels,
    attack: &AttackData,
    feats: &SplitFeatures,
) -> Result<Hyperparameters> {
    let seed = derive_seed(cfg.seed, &format!("tune/{}", attack.name));
    let train_adv = attack.splits.train.adv_labels();
    let valid_adv = attack.splits.valid.adv_labels();
    stage(format!("tune/{}", attack.name), (|| {
        let ocsvm_data: Vec<OcsvmLayerData> = (0..layers.whiteners.len())
            .map(|l| {
                let w = &layers.whiteners[l];
                Ok(OcsvmLayerData {
                    fit: layers.whitened_train[l].clone(),
                    train: w.whiten_rows(feats.train.layer(l), feats.train.predicted_labels())?,
                    train_adv: train_adv.clone(),
                    valid: w.whiten_rows(feats.valid.layer(l), feats.valid.predicted_labels())?,
                    valid_adv: valid_adv.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let ocsvm = tune_ocsvm(&ocsvm_data, &cfg.detectors.ocsvm, derive_seed(seed, "ocsvm"))?;

        let train_inputs = attack.splits.train.inputs();
        let valid_inputs = attack.splits.valid.inputs();
        let lambda = select_lambda(
            &cfg.detectors.maha.lambdas,
            &LambdaSelection {
                models: &layers.gaussians,
                net,
                train_inputs: &train_inputs,
                train_adv: &train_adv,
                valid_inputs: &valid_inputs,
                valid_adv: &valid_adv,
                head: cfg.detectors.maha.head,
                logistic: &cfg.tuning,
                seed: derive_seed(seed, "maha"),
            },
        )?;

        let reference = lid_reference_bundle(&attack.splits, feats);
        let k = select_k(
            &cfg.detectors.lid.ks,
            &KSelection {
                reference: reference.layers(),
                train: &feats.train,
                train_adv: &train_adv,
                valid: &feats.valid,
                valid_adv: &valid_adv,
                logistic: &cfg.tuning,
                seed: derive_seed(seed, "lid"),
            },
        )?;
        Ok(Hyperparameters {
            tuned_on: attack.name.clone(),
            ocsvm,
            lambda,
            k,
        })
    })())
}

/// All fitted detector state for one tuning attack.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorSuite {
    pub tuned_on: String,
    pub layer_names: Vec<String>,
    pub whiteners: Vec<LayerWhitener>,
    pub ocsvm: Vec<OcsvmModel>,
    pub gaussians: Vec<GaussianLayerModel>,
    pub lambda: f64,
    pub head: ScoreHead,
    pub lid_reference: LidReference,
    /// Reference rows as a feature bundle (for the on-disk format).
    pub lid_reference_bundle: FeatureBundle,
    /// One model per combination, in [`Combination::all`] order.
    pub logistic: Vec<(String, LogisticModel)>,
}

impl DetectorSuite {
    /// Raw per-layer scores of a labelled set; LID sentinels resolved per column.
    pub fn score(&self, net: &TinyNet, set: &LabeledSet, bundle: &FeatureBundle) -> Result<DetectorScores> {
        let o = ocsvm_layer_scores(&self.whiteners, &self.ocsvm, bundle)?;
        let m = maha_scores_from_inputs(&self.gaussians, net, &set.inputs(), self.lambda, self.head)?;
        let mut l = lid_layer_scores(&self.lid_reference, bundle)?;
        resolve_sentinels(&mut l);
        Ok(DetectorScores { o, m, l })
    }

    pub fn logistic(&self, combo: &Combination) -> Option<&LogisticModel> {
        let name = combo.name();
        self.logistic.iter().find(|(n, _)| *n == name).map(|(_, m)| m)
    }

    pub fn to_bundle(&self, lid_reference_path: &str) -> DetectorBundle {
        DetectorBundle {
            version: REPORT_VERSION,
            tuned_on: self.tuned_on.clone(),
            layer_names: self.layer_names.clone(),
            whiteners: self.whiteners.clone(),
            ocsvm: self.ocsvm.clone(),
            gaussians: self.gaussians.clone(),
            maha: MahaSettings {
                lambda: self.lambda,
                head: self.head,
            },
            lid: LidSettings {
                reference: lid_reference_path.to_string(),
                k: self.lid_reference.k(),
            },
            logistic: self.logistic.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MahaSettings {
    pub lambda: f64,
    pub head: ScoreHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidSettings {
    /// Feature-file stem of the reference activations.
    pub reference: String,
    pub k: usize,
}

/// On-disk form of a [`DetectorSuite`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorBundle {
    pub version: u32,
    pub tuned_on: String,
    pub layer_names: Vec<String>,
    pub whiteners: Vec<LayerWhitener>,
    pub ocsvm: Vec<OcsvmModel>,
    pub gaussians: Vec<GaussianLayerModel>,
    pub maha: MahaSettings,
    pub lid: LidSettings,
    pub logistic: Vec<(String, LogisticModel)>,
}

impl DetectorBundle {
    pub fn into_suite(self, reference: FeatureBundle) -> Result<DetectorSuite> {
        let lid_reference = LidReference::new(reference.layers().to_vec(), self.lid.k)?;
        if self.whiteners.len() != self.layer_names.len()
            || self.ocsvm.len() != self.layer_names.len()
            || self.gaussians.len() != self.layer_names.len()
            || reference.n_layers() != self.layer_names.len()
        {
            return Err(Error::param("detector bundle layers disagree"));
        }
        Ok(DetectorSuite {
            tuned_on: self.tuned_on,
            layer_names: self.layer_names,
            whiteners: self.whiteners,
            ocsvm: self.ocsvm,
            gaussians: self.gaussians,
            lambda: self.maha.lambda,
            head: self.maha.head,
            lid_reference,
            lid_reference_bundle: reference,
            logistic: self.logistic,
        })
    }
}

/// Fit OCSVMs with the tuned parameters, build the LID reference, score the
/// training split, and fit one logistic model per detector combination.
pub fn fit_suite(
    cfg: &Config,
    net: &TinyNet,
    layers: &LayerModels,
    attack: &AttackData,
    feats: &SplitFeatures,
    hyper: &Hyperparameters,
) -> Result<DetectorSuite> {
    let seed = derive_seed(cfg.seed, &format!("fit/{}", attack.name));
    stage(format!("fit/{}", attack.name), (|| {
        let ocsvm: Vec<OcsvmModel> = hyper
            .ocsvm
            .par_iter()
            .zip(&layers.whitened_train)
            .map(|(t, x)| fit_ocsvm(x, &OcsvmParams::new(t.nu, t.gamma)))
            .collect::<Result<_>>()?;
        let reference = lid_reference_bundle(&attack.splits, feats);
        let mut suite = DetectorSuite {
            tuned_on: hyper.tuned_on.clone(),
            layer_names: layers.layer_names.clone(),
            whiteners: layers.whiteners.clone(),
            ocsvm,
            gaussians: layers.gaussians.clone(),
            lambda: hyper.lambda.best,
            head: cfg.detectors.maha.head,
            lid_reference: LidReference::new(reference.layers().to_vec(), hyper.k.best)?,
            lid_reference_bundle: reference,
            logistic: Vec::new(),
        };
        let scores = suite.score(net, &attack.splits.train, &feats.train)?;
        let labels = attack.splits.train.adv_labels();
        suite.logistic = Combination::all()
            .par_iter()
            .map(|combo| {
                let set = scores.labeled(combo, &labels)?;
                let model = fit_logistic(&set, &cfg.tuning, derive_seed(seed, &combo.name()))?;
                Ok((combo.name(), model))
            })
            .collect::<Result<_>>()?;
        Ok(suite)
    })())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    pub detector: String,
    pub auroc: f64,
    pub aupr: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    pub regularization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairContingency {
    pub a: String,
    pub b: String,
    pub counts: Contingency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcsvmChoice {
    pub layer: String,
    pub nu: f64,
    pub gamma: f64,
    pub valid_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterSummary {
    pub tuned_on: String,
    /// Set when the detectors were tuned and fitted on a different attack's data.
    pub inherited_from: Option<String>,
    pub ocsvm: Vec<OcsvmChoice>,
    pub lambda: f64,
    pub lambda_scores: Vec<(f64, Option<f64>)>,
    pub k: usize,
    pub k_scores: Vec<(usize, Option<f64>)>,
}

impl HyperparameterSummary {
    pub fn new(h: &Hyperparameters, layer_names: &[String], inherited_from: Option<String>) -> Self {
        Self {
            tuned_on: h.tuned_on.clone(),
            inherited_from,
            ocsvm: h
                .ocsvm
                .iter()
                .zip(layer_names)
                .map(|(t, name)| OcsvmChoice {
                    layer: name.clone(),
                    nu: t.nu,
                    gamma: t.gamma,
                    valid_accuracy: t.valid_accuracy,
                })
                .collect(),
            lambda: h.lambda.best,
            lambda_scores: h.lambda.evaluated.clone(),
            k: h.k.best,
            k_scores: h.k.evaluated.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSizes {
    pub attempted: usize,
    pub kept: usize,
    pub success_rate: f64,
    pub noisy_fallbacks: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: String,
    pub kind: String,
    pub sizes: SetSizes,
    pub hyperparameters: HyperparameterSummary,
    /// One row per combination: O, M, L, O+M, O+L, M+L, EnAD.
    pub detectors: Vec<DetectorMetrics>,
    pub layer_auroc: Vec<LayerAuroc>,
    pub contingency: Vec<PairContingency>,
}

impl AttackReport {
    pub fn detector(&self, name: &str) -> Option<&DetectorMetrics> {
        self.detectors.iter().find(|d| d.detector == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub layer_names: Vec<String>,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub version: u32,
    pub seed: u64,
    pub mode: Mode,
    pub tuning_attack: String,
    pub model: ModelSummary,
    pub attacks: Vec<AttackReport>,
}

impl EvaluationReport {
    pub fn attack(&self, name: &str) -> Option<&AttackReport> {
        self.attacks.iter().find(|a| a.attack == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s)
            .map_err(|e| Error::Format(crate::error::FormatError::MalformedHeader(e.to_string())))
    }
}

/// Score the test split of `attack` with `suite` and compute every metric.
pub fn evaluate_attack(
    suite: &DetectorSuite,
    net: &TinyNet,
    attack: &AttackData,
    test: &FeatureBundle,
    hyper: HyperparameterSummary,
) -> Result<AttackReport> {
    stage(format!("evaluate/{}", attack.name), (|| {
        let set = &attack.splits.test;
        let labels = set.adv_labels();
        let scores = suite.score(net, set, test)?;
        let mut detectors = Vec::new();
        let mut standalone_preds: Vec<(Detector, Vec<bool>)> = Vec::new();
        for combo in Combination::all() {
            let model = suite
                .logistic(&combo)
                .ok_or_else(|| Error::param(format!("no logistic model for {}", combo.name())))?;
            let features = scores.labeled(&combo, &labels)?;
            let rows = features.features();
            let post: Vec<f64> = rows.iter_rows().map(|r| posterior(model, r)).collect();
            let preds: Vec<bool> = rows.iter_rows().map(|r| classify(model, r).0).collect();
            let confusion = Confusion::new(&preds, &labels)?;
            detectors.push(DetectorMetrics {
                detector: combo.name(),
                auroc: auroc(&post, &labels)?,
                aupr: aupr(&post, &labels)?,
                accuracy: (confusion.tp + confusion.tn) as f64 / confusion.total() as f64,
                confusion,
                regularization: model.cv_regularization,
            });
            if combo.is_standalone() {
                standalone_preds.push((combo.detectors()[0], preds));
            }
        }
        let layer_auroc = per_layer_auroc(
            &Detector::ALL.map(|d| (d, scores.get(d))),
            &labels,
        )?;
        let mut pairs = Vec::new();
        for i in 0..standalone_preds.len() {
            for j in i + 1..standalone_preds.len() {
                let (a, pa) = &standalone_preds[i];
                let (b, pb) = &standalone_preds[j];
                pairs.push(PairContingency {
                    a: a.prefix().to_string(),
                    b: b.prefix().to_string(),
                    counts: contingency(pa, pb, &labels)?,
                });
            }
        }
        let s = &attack.splits;
        Ok(AttackReport {
            attack: attack.name.clone(),
            kind: attack.kind.clone(),
            sizes: SetSizes {
                attempted: attack.assemble.attempted,
                kept: attack.assemble.kept,
                success_rate: attack.assemble.success_rate(),
                noisy_fallbacks: attack.assemble.noisy_fallbacks,
                train: s.train.len(),
                valid: s.valid.len(),
                test: s.test.len(),
            },
            hyperparameters: hyper,
            detectors,
            layer_auroc,
            contingency: pairs,
        })
    })())
}

/// Everything `run_pipeline` produced, for callers that persist artifacts.
pub struct PipelineOutput {
    pub report: EvaluationReport,
    pub net: TinyNet,
    /// Suites in fitting order (one per tuned attack).
    pub suites: Vec<DetectorSuite>,
    pub hyperparameters: Vec<Hyperparameters>,
}

struct Prepared {
    data: SyntheticData,
    net: TinyNet,
    train_report: TrainReport,
    layers: LayerModels,
}

fn prepare(cfg: &Config) -> Result<Prepared> {
    let data = generate_data(cfg)?;
    let (net, train_report) = train_model(cfg, &data)?;
    let layers = fit_layer_models(&net, &data.train)?;
    Ok(Prepared {
        data,
        net,
        train_report,
        layers,
    })
}

/// Run the configured experiment and assemble the report.
pub fn run_pipeline(cfg: &Config) -> Result<PipelineOutput> {
    cfg.validate()?;
    let p = prepare(cfg)?;
    let eval_names = cfg.evaluation_attacks();
    let attack_data = |name: &str| -> Result<(AttackData, SplitFeatures)> {
        let attack = cfg
            .attack(name)
            .ok_or_else(|| Error::param(format!("no attack named {name}")))?;
        let data = build_attack_data(cfg, &p.net, &p.data, attack)?;
        let feats = extract_split_features(&p.net, &data.splits)?;
        Ok((data, feats))
    };
    let tune_and_fit = |data: &AttackData, feats: &SplitFeatures| -> Result<(Hyperparameters, DetectorSuite)> {
        let hyper = tune_detectors(cfg, &p.net, &p.layers, data, feats)?;
        let suite = fit_suite(cfg, &p.net, &p.layers, data, feats, &hyper)?;
        Ok((hyper, suite))
    };

    let mut reports = Vec::new();
    let mut suites = Vec::new();
    let mut hypers = Vec::new();
    match cfg.evaluation.mode {
        Mode::Known => {
            for name in &eval_names {
                let (data, feats) = attack_data(name)?;
                let (hyper, suite) = tune_and_fit(&data, &feats)?;
                let summary = HyperparameterSummary::new(&hyper, &suite.layer_names, None);
                reports.push(evaluate_attack(&suite, &p.net, &data, &feats.test, summary)?);
                hypers.push(hyper);
                suites.push(suite);
            }
        }
        Mode::Unknown => {
            let tuning = &cfg.evaluation.tuning_attack;
            let (tdata, tfeats) = attack_data(tuning)?;
            let (hyper, suite) = tune_and_fit(&tdata, &tfeats)?;
            for name in &eval_names {
                let summary = HyperparameterSummary::new(&hyper, &suite.layer_names, Some(tuning.clone()));
                if name == tuning {
                    reports.push(evaluate_attack(&suite, &p.net, &tdata, &tfeats.test, summary)?);
                } else {
                    let (data, feats) = attack_data(name)?;
                    reports.push(evaluate_attack(&suite, &p.net, &data, &feats.test, summary)?);
                }
            }
            hypers.push(hyper);
            suites.push(suite);
        }
    }
    let report = EvaluationReport {
        version: REPORT_VERSION,
        seed: cfg.seed,
        mode: cfg.evaluation.mode,
        tuning_attack: cfg.evaluation.tuning_attack.clone(),
        model: ModelSummary {
            layer_names: p.layers.layer_names.clone(),
            final_loss: p.train_report.final_loss,
            train_accuracy: p.train_report.train_accuracy,
            test_accuracy: p.train_report.test_accuracy,
        },
        attacks: reports,
    };
    Ok(PipelineOutput {
        report,
        net: p.net,
        suites,
        hyperparameters: hypers,
    })
}

/// Metric grid (detector × attack) as CSV.
pub fn metrics_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("attack,detector,auroc,aupr,accuracy,tp,tn,fp,fn,regularization,inherited_from\n");
    for a in &report.attacks {
        for d in &a.detectors {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                a.attack,
                d.detector,
                d.auroc,
                d.aupr,
                d.accuracy,
                d.confusion.tp,
                d.confusion.tn,
                d.confusion.fp,
                d.confusion.r#fn,
                d.regularization,
                a.hyperparameters.inherited_from.as_deref().unwrap_or("")
            ));
        }
    }
    out
}

/// Pairwise contingency tables as CSV.
pub fn contingency_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("attack,a,b,both,only_a,only_b,neither\n");
    for a in &report.attacks {
        for c in &a.contingency {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                a.attack, c.a, c.b, c.counts.both, c.counts.only_a, c.counts.only_b, c.counts.neither
            ));
        }
    }
    out
}

/// Per-layer AUROC table as CSV.
pub fn layer_auroc_csv(report: &EvaluationReport) -> String {
    let mut out = String::from("attack,detector,layer,auroc,best\n");
    for a in &report.attacks {
        for r in &a.layer_auroc {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                a.attack,
                r.detector.prefix(),
                r.layer,
                r.auroc,
                r.best
            ));
        }
    }
    out
}

/// Detector × attack table of AUROC/AUPR (percent) in Markdown.
pub fn markdown_table(report: &EvaluationReport) -> String {
    let mut out = String::from("| Detector |");
    let mut rule = String::from("|---|");
    for a in &report.attacks {
        out.push_str(&format!(" {} AUROC | {} AUPR |", a.attack, a.attack));
        rule.push_str("---:|---:|");
    }
    out.push('\n');
    out.push_str(&rule);
    out.push('\n');
    for combo in Combination::all() {
        let name = combo.name();
        out.push_str(&format!("| {name} |"));
        for a in &report.attacks {
            match a.detector(&name) {
                Some(d) => out.push_str(&format!(" {:.2} | {:.2} |", 100.0 * d.auroc, 100.0 * d.aupr)),
                None => out.push_str(" – | – |"),
            }
        }
        out.push('\n');
    }
    out
}
