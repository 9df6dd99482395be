//! Examples, synthetic datasets and the labelled norm/noisy/adv set.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackSpec};
use crate::error::{Error, Result};
use crate::refnet::{InputBox, TinyNet};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<f64>,
    pub true_label: usize,
}

impl Example {
    pub fn new(input: Vec<f64>, true_label: usize) -> Self {
        Self { input, true_label }
    }
}

impl AsRef<[f64]> for Example {
    fn as_ref(&self) -> &[f64] {
        &self.input
    }
}

/// Parameters of the Gaussian-blob dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub n_classes: usize,
    pub dim: usize,
    pub spread: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_box_lo")]
    pub box_lo: f64,
    #[serde(default = "default_box_hi")]
    pub box_hi: f64,
}

fn default_radius() -> f64 {
    1.0
}
fn default_box_lo() -> f64 {
    -3.0
}
fn default_box_hi() -> f64 {
    3.0
}

impl SyntheticSpec {
    pub fn new(n_per_class: usize, n_classes: usize, dim: usize, spread: f64) -> Self {
        Self {
            n_per_class,
            n_classes,
            dim,
            spread,
            radius: default_radius(),
            box_lo: default_box_lo(),
            box_hi: default_box_hi(),
        }
    }

    pub fn input_box(&self) -> InputBox {
        InputBox::uniform(self.dim, self.box_lo, self.box_hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub class_means: Vec<Vec<f64>>,
}

/// Gaussian class blobs around means on a sphere of radius `spec.radius`.
///
/// When `n_classes <= dim` the mean directions are orthonormal, so every pair
/// of classes is equally separated. Both splits hold `n_per_class` examples per
/// class, ordered by class.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    if spec.n_classes < 2 || spec.dim < 2 || spec.n_per_class == 0 {
        return Err(Error::param("need >= 2 classes, dim >= 2 and n_per_class >= 1"));
    }
    if !(spec.spread > 0.0) || !(spec.radius >= 0.0) || !(spec.box_lo < spec.box_hi) {
        return Err(Error::param("need spread > 0, radius >= 0 and box_lo < box_hi"));
    }
    let mut rng = rng::substream(seed, "synthetic/means");
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let mut v: Vec<f64> = (0..spec.dim).map(|_| std.sample(&mut rng)).collect();
        if dirs.len() < spec.dim {
            for d in &dirs {
                let p: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(d).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
        dirs.push(v);
    }
    let means: Vec<Vec<f64>> = dirs
        .into_iter()
        .map(|d| d.into_iter().map(|a| a * spec.radius).collect())
        .collect();
    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::param(e.to_string()))?;
    let input_box = spec.input_box();
    let draw = |label: &str| {
        let mut rng = rng::substream(seed, label);
        let mut out = Vec::with_capacity(spec.n_per_class * spec.n_classes);
        for (c, mu) in means.iter().enumerate() {
            for _ in 0..spec.n_per_class {
                let mut x: Vec<f64> = mu.iter().map(|m| m + noise.sample(&mut rng)).collect();
                input_box.clip(&mut x);
                out.push(Example::new(x, c));
            }
        }
        out
    };
    let train = draw("synthetic/train");
    let test = draw("synthetic/test");
    Ok(SyntheticData {
        train,
        test,
        class_means: means,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyOutcome {
    pub example: Example,
    /// Noise could not be added without changing the prediction; `example` is the clean input.
    pub fell_back: bool,
    pub attempts: usize,
}

/// Add `N(0, sigma² I)` noise while keeping the example correctly classified.
///
/// After `max_tries` failures sigma is halved, up to three times; if every
/// attempt fails the clean input is returned with `fell_back` set.
pub fn make_noisy(
    x: &Example,
    model: &TinyNet,
    sigma: f64,
    max_tries: usize,
    seed: u64,
) -> Result<NoisyOutcome> {
    if !(sigma > 0.0) {
        return Err(Error::param("noise sigma must be positive"));
    }
    let mut rng = rng::from_seed(seed);
    let mut attempts = 0;
    let mut s = sigma;
    for _ in 0..=3 {
        let noise = Normal::new(0.0, s).map_err(|e| Error::param(e.to_string()))?;
        for _ in 0..max_tries {
            attempts += 1;
            let mut v: Vec<f64> = x.input.iter().map(|a| a + noise.sample(&mut rng)).collect();
            model.input_box().clip(&mut v);
            if model.predict(&v)? == x.true_label {
                return Ok(NoisyOutcome {
                    example: Example::new(v, x.true_label),
                    fell_back: false,
                    attempts,
                });
            }
        }
        s *= 0.5;
    }
    Ok(NoisyOutcome {
        example: x.clone(),
        fell_back: true,
        attempts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Norm,
    Noisy,
    Adv,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [Provenance::Norm, Provenance::Noisy, Provenance::Adv];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub example: Example,
    pub provenance: Provenance,
    /// Index of the clean example this member was derived from.
    pub source: usize,
    #[serde(default)]
    pub noisy_fallback: bool,
}

impl Member {
    pub fn is_adv(&self) -> bool {
        self.provenance == Provenance::Adv
    }
}

/// `L = L_norm ∪ L_noisy ∪ L_adv`, made of one triple per source example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    members: Vec<Member>,
}

impl LabeledSet {
    /// Every source must contribute exactly one member of each provenance.
    pub fn new(members: Vec<Member>) -> Result<Self> {
        use std::collections::BTreeMap;
        let mut seen: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
        for m in &members {
            seen.entry(m.source).or_default()[m.provenance as usize] += 1;
        }
        if let Some((s, c)) = seen.iter().find(|(_, c)| **c != [1, 1, 1]) {
            return Err(Error::param(format!(
                "source {s} has {c:?} norm/noisy/adv members; expected one of each"
            )));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.members.iter().filter(|m| m.provenance == p).count()
    }

    pub fn adv_labels(&self) -> Vec<bool> {
        self.members.iter().map(Member::is_adv).collect()
    }

    pub fn inputs(&self) -> Vec<&[f64]> {
        self.members.iter().map(|m| m.example.input.as_slice()).collect()
    }

    pub fn sources(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.members.iter().map(|m| m.source).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Indices of members of the given provenance.
    pub fn indices_of(&self, p: Provenance) -> Vec<usize> {
        (0..self.members.len())
            .filter(|&i| self.members[i].provenance == p)
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            members: idx.iter().map(|&i| self.members[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssembleReport {
    pub attempted: usize,
    pub kept: usize,
    pub noisy_fallbacks: usize,
}

impl AssembleReport {
    pub fn success_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.kept as f64 / self.attempted as f64
        }
    }
}

/// Minimum fraction of clean inputs the attack must flip.
pub const MIN_ATTACK_SUCCESS: f64 = 0.10;

/// Build the labelled set: one noisy and one adversarial counterpart per clean input.
///
/// Triples whose adversarial does not change the prediction are dropped.
pub fn assemble_labeled_set(
    norm: &[Example],
    model: &TinyNet,
    attack: &AttackSpec,
    sigma: f64,
    seed: u64,
) -> Result<(LabeledSet, AssembleReport)> {
    attack.validate()?;
    for (i, x) in norm.iter().enumerate() {
        if model.predict(&x.input)? != x.true_label {
            return Err(Error::param(format!("clean example {i} is misclassified")));
        }
    }
    let triples: Vec<Option<(Member, Member, Member)>> = norm
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let adv = run_attack(model, x, attack)?;
            if model.predict(&adv.adversarial)? == x.true_label {
                return Ok(None);
            }
            let noisy = make_noisy(x, model, sigma, 10, rng::derive_seed(seed, &format!("noise/{i}")))?;
            let member = |example: Example, provenance, noisy_fallback| Member {
                example,
                provenance,
                source: i,
                noisy_fallback,
            };
            Ok(Some((
                member(x.clone(), Provenance::Norm, false),
                member(noisy.example, Provenance::Noisy, noisy.fell_back),
                member(Example::new(adv.adversarial, x.true_label), Provenance::Adv, false),
            )))
        })
        .collect::<Result<_>>()?;
    let mut members = Vec::with_capacity(3 * norm.len());
    let mut noisy_fallbacks = 0;
    for (a, b, c) in triples.into_iter().flatten() {
        noisy_fallbacks += usize::from(b.noisy_fallback);
        members.extend([a, b, c]);
    }
    let report = AssembleReport {
        attempted: norm.len(),
        kept: members.len() / 3,
        noisy_fallbacks,
    };
    if report.success_rate() < MIN_ATTACK_SUCCESS {
        return Err(Error::Attack(format!(
            "{} flipped only {}/{} inputs (< {:.0}%)",
            attack.kind_name(),
            report.kept,
            report.attempted,
            100.0 * MIN_ATTACK_SUCCESS
        )));
    }
    Ok((LabeledSet::new(members)?, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.6,
            valid_fraction: 0.2,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.valid_fraction, self.test_fraction];
        if f.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(Error::param("split fractions must lie in (0, 1)"));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::param("split fractions must sum to 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: LabeledSet,
    pub valid: LabeledSet,
    pub test: LabeledSet,
}

/// Stratified, seed-deterministic train/valid/test split.
///
/// Whole triples are assigned to a split, so every split holds the same
/// number of norm, noisy and adversarial members and no clean example leaks
/// into two splits through its counterparts. The assignment depends only on
/// the source ids, not on member order.
pub fn split_labeled_set(set: &LabeledSet, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut sources = set.sources();
    let n = sources.len();
    if n < 3 {
        return Err(Error::param(format!(
            "each provenance stratum has {n} members; at least 3 are needed"
        )));
    }
    let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 2);
    let n_valid = ((spec.valid_fraction * n as f64).round() as usize).clamp(1, n - n_train - 1);
    let mut rng = rng::from_seed(spec.seed);
    sources.shuffle(&mut rng);
    let mut which = std::collections::HashMap::with_capacity(n);
    for (rank, s) in sources.iter().enumerate() {
        let part = if rank < n_train {
            0
        } else if rank < n_train + n_valid {
            1
        } else {
            2
        };
        which.insert(*s, part);
    }
    let mut idx: [Vec<usize>; 3] = Default::default();
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by_key(|&i| (set.members[i].source, set.members[i].provenance));
    for i in order {
        idx[which[&set.members[i].source]].push(i);
    }
    Ok(Splits {
        train: set.subset(&idx[0]),
        valid: set.subset(&idx[1]),
        test: set.subset(&idx[2]),
    })
}
