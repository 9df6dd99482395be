//! White-box attacks against a [`TinyNet`]: FGSM, BIM, DeepFool and Carlini–Wagner L2.
//!
//! Every attack is a pure function of `(net, example, spec)`. A failed attack
//! is not an error; it is reported through [`AttackOutcome::success`].

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::linalg::{argmax, dot, norm2};
use crate::refnet::{ScalarHead, TinyNet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Untargeted,
    LeastLikely,
    Fixed(usize),
}

fn default_overshoot() -> f64 {
    0.02
}

fn default_max_iter() -> usize {
    50
}

fn default_momentum() -> f64 {
    0.9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm {
        epsilon: f64,
    },
    Bim {
        epsilon: f64,
        alpha: f64,
        k_steps: usize,
    },
    Deepfool {
        #[serde(default = "default_overshoot")]
        overshoot: f64,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
    },
    Cw {
        c: f64,
        #[serde(default)]
        kappa: f64,
        steps: usize,
        step_size: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        /// Try `c ∈ {0.1, 1, 10}` and keep the closest successful result.
        #[serde(default)]
        search_c: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    #[serde(flatten)]
    pub kind: AttackKind,
    #[serde(default)]
    pub target_mode: TargetMode,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm { epsilon },
            target_mode: TargetMode::Untargeted,
        }
    }

    pub fn bim(epsilon: f64, alpha: f64, k_steps: usize) -> Self {
        Self {
            kind: AttackKind::Bim {
                epsilon,
                alpha,
                k_steps,
            },
            target_mode: TargetMode::Untargeted,
        }
    }

    pub fn deepfool(overshoot: f64, max_iter: usize) -> Self {
        Self {
            kind: AttackKind::Deepfool {
                overshoot,
                max_iter,
            },
            target_mode: TargetMode::Untargeted,
        }
    }

    pub fn cw(c: f64, kappa: f64, steps: usize, step_size: f64) -> Self {
        Self {
            kind: AttackKind::Cw {
                c,
                kappa,
                steps,
                step_size,
                momentum: default_momentum(),
                search_c: false,
            },
            target_mode: TargetMode::Untargeted,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            AttackKind::Fgsm { .. } => "fgsm",
            AttackKind::Bim { .. } => "bim",
            AttackKind::Deepfool { .. } => "deepfool",
            AttackKind::Cw { .. } => "cw",
        }
    }

    /// L∞ budget, for attacks that have one.
    pub fn epsilon(&self) -> Option<f64> {
        match self.kind {
            AttackKind::Fgsm { epsilon } | AttackKind::Bim { epsilon, .. } => Some(epsilon),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::param(format!("{}: {m}", self.kind_name())));
        match self.kind {
            AttackKind::Fgsm { epsilon } if !(epsilon >= 0.0) => bad("epsilon must be >= 0"),
            AttackKind::Bim {
                epsilon,
                alpha,
                k_steps,
            } => {
                if !(epsilon >= 0.0) {
                    bad("epsilon must be >= 0")
                } else if !(alpha >= 0.0) {
                    bad("alpha must be >= 0")
                } else if k_steps == 0 {
                    bad("k_steps must be >= 1")
                } else {
                    Ok(())
                }
            }
            AttackKind::Deepfool {
                overshoot,
                max_iter,
            } if !(overshoot >= 0.0) || max_iter == 0 => {
                bad("overshoot must be >= 0 and max_iter >= 1")
            }
            AttackKind::Cw {
                c,
                kappa,
                steps,
                step_size,
                momentum,
                ..
            } if !(c >= 0.0)
                || !(kappa >= 0.0)
                || steps == 0
                || !(step_size > 0.0)
                || !(0.0..1.0).contains(&momentum) =>
            {
                bad("needs c >= 0, kappa >= 0, steps >= 1, step_size > 0, momentum in [0,1)")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Vec<f64>,
    /// Whether the attack reached its goal (misclassification, or the target class).
    pub success: bool,
    pub iterations: usize,
}

/// Resolve the class the attack works against: `(t, targeted)`.
fn resolve_target(net: &TinyNet, x: &Example, mode: TargetMode) -> Result<(usize, bool)> {
    match mode {
        TargetMode::Untargeted => Ok((x.true_label, false)),
        TargetMode::LeastLikely => {
            let logits = net.logits(&x.input)?;
            let neg: Vec<f64> = logits.iter().map(|v| -v).collect();
            Ok((argmax(&neg), true))
        }
        TargetMode::Fixed(t) if t < net.n_classes() => Ok((t, true)),
        TargetMode::Fixed(t) => Err(Error::param(format!("target class {t} out of range"))),
    }
}

fn goal_reached(net: &TinyNet, x: &[f64], t: usize, targeted: bool) -> Result<bool> {
    let p = net.predict(x)?;
    Ok(if targeted { p == t } else { p != t })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient step on the cross-entropy: ascent for untargeted, descent towards `t` otherwise.
fn signed_step(net: &TinyNet, x: &[f64], t: usize, targeted: bool, size: f64) -> Result<Vec<f64>> {
    let g = net.input_gradient(x, ScalarHead::CrossEntropy(t))?.gradient;
    let dir = if targeted { -1.0 } else { 1.0 };
    Ok(x.iter().zip(&g).map(|(v, gi)| v + dir * size * sign(*gi)).collect())
}

pub fn fgsm(net: &TinyNet, x: &Example, spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.validate()?;
    let AttackKind::Fgsm { epsilon } = spec.kind else {
        return Err(Error::param("fgsm called with a non-fgsm spec"));
    };
    let (t, targeted) = resolve_target(net, x, spec.target_mode)?;
    let mut adv = signed_step(net, &x.input, t, targeted, epsilon)?;
    net.input_box().clip(&mut adv);
    let success = goal_reached(net, &adv, t, targeted)?;
    Ok(AttackOutcome {
        adversarial: adv,
        success,
        iterations: 1,
    })
}

pub fn bim(net: &TinyNet, x: &Example, spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.validate()?;
    let AttackKind::Bim {
        epsilon,
        alpha,
        k_steps,
    } = spec.kind
    else {
        return Err(Error::param("bim called with a non-bim spec"));
    };
    let (t, targeted) = resolve_target(net, x, spec.target_mode)?;
    let mut cur = x.input.clone();
    for _ in 0..k_steps {
        let mut next = signed_step(net, &cur, t, targeted, alpha)?;
        for (v, &x0) in next.iter_mut().zip(&x.input) {
            *v = v.clamp(x0 - epsilon, x0 + epsilon);
        }
        net.input_box().clip(&mut next);
        cur = next;
    }
    let success = goal_reached(net, &cur, t, targeted)?;
    Ok(AttackOutcome {
        adversarial: cur,
        success,
        iterations: k_steps,
    })
}

/// Multiclass DeepFool (untargeted; the target mode is ignored).
pub fn deepfool(net: &TinyNet, x: &Example, spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.validate()?;
    let AttackKind::Deepfool {
        overshoot,
        max_iter,
    } = spec.kind
    else {
        return Err(Error::param("deepfool called with a non-deepfool spec"));
    };
    let k0 = net.predict(&x.input)?;
    let dim = x.input.len();
    let mut total = vec![0.0; dim];
    let mut cur = x.input.clone();
    let mut iterations = 0;
    while iterations < max_iter {
        let (logits, jac) = net.logit_jacobian(&cur)?;
        if argmax(&logits) != k0 {
            break;
        }
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        for k in (0..net.n_classes()).filter(|&k| k != k0) {
            let w: Vec<f64> = jac[k].iter().zip(&jac[k0]).map(|(a, b)| a - b).collect();
            let wn = norm2(&w);
            if wn == 0.0 {
                continue;
            }
            let f = logits[k] - logits[k0];
            let dist = f.abs() / wn;
            if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
                best = Some((dist, f, w));
            }
        }
        let Some((_, f, w)) = best else { break };
        let scale = f.abs() / dot(&w, &w);
        for (r, wi) in total.iter_mut().zip(&w) {
            *r += scale * wi;
        }
        cur = x
            .input
            .iter()
            .zip(&total)
            .map(|(x0, r)| x0 + (1.0 + overshoot) * r)
            .collect();
        net.input_box().clip(&mut cur);
        iterations += 1;
    }
    let success = net.predict(&cur)? != k0;
    Ok(AttackOutcome {
        adversarial: cur,
        success,
        iterations,
    })
}

/// Hinge term of the CW objective and its input gradient.
///
/// Targeted: `max(max_{i≠t} z_i − z_t, −κ)`. Untargeted (t = current class):
/// `max(z_t − max_{i≠t} z_i, −κ)`, so descent pushes another logit above `z_t`.
fn cw_hinge(net: &TinyNet, x: &[f64], t: usize, targeted: bool, kappa: f64) -> Result<(f64, Vec<f64>)> {
    let (logits, jac) = net.logit_jacobian(x)?;
    let mut other = usize::MAX;
    for i in (0..logits.len()).filter(|&i| i != t) {
        if other == usize::MAX || logits[i] > logits[other] {
            other = i;
        }
    }
    let margin = if targeted {
        logits[other] - logits[t]
    } else {
        logits[t] - logits[other]
    };
    if margin <= -kappa {
        return Ok((-kappa, vec![0.0; x.len()]));
    }
    let (pos, neg) = if targeted { (other, t) } else { (t, other) };
    let g = jac[pos].iter().zip(&jac[neg]).map(|(a, b)| a - b).collect();
    Ok((margin, g))
}

#[allow(clippy::too_many_arguments)]
fn cw_single(
    net: &TinyNet,
    x: &Example,
    t: usize,
    targeted: bool,
    c: f64,
    kappa: f64,
    steps: usize,
    step_size: f64,
    momentum: f64,
) -> Result<AttackOutcome> {
    let mut cur = x.input.clone();
    let mut velocity = vec![0.0; cur.len()];
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..steps {
        let (hinge, hg) = cw_hinge(net, &cur, t, targeted, kappa)?;
        let dist: f64 = cur.iter().zip(&x.input).map(|(a, b)| (a - b) * (a - b)).sum();
        let objective = dist + c * hinge;
        if !objective.is_finite() {
            return Err(Error::Attack("cw objective became non-finite".into()));
        }
        if goal_reached(net, &cur, t, targeted)? && best.as_ref().is_none_or(|(o, _)| objective < *o)
        {
            best = Some((objective, cur.clone()));
        }
        for (((v, xi), x0), gh) in velocity.iter_mut().zip(&cur).zip(&x.input).zip(&hg) {
            let g = 2.0 * (xi - x0) + c * gh;
            *v = momentum * *v - step_size * g;
        }
        for (xi, v) in cur.iter_mut().zip(&velocity) {
            *xi += v;
        }
        net.input_box().clip(&mut cur);
    }
    // The final iterate is a candidate too.
    let (hinge, _) = cw_hinge(net, &cur, t, targeted, kappa)?;
    let dist: f64 = cur.iter().zip(&x.input).map(|(a, b)| (a - b) * (a - b)).sum();
    let objective = dist + c * hinge;
    if goal_reached(net, &cur, t, targeted)? && best.as_ref().is_none_or(|(o, _)| objective < *o) {
        best = Some((objective, cur.clone()));
    }
    Ok(match best {
        Some((_, adv)) => AttackOutcome {
            adversarial: adv,
            success: true,
            iterations: steps,
        },
        None => AttackOutcome {
            adversarial: cur,
            success: false,
            iterations: steps,
        },
    })
}

/// Carlini–Wagner L2 by projected gradient descent with momentum in input space.
pub fn cw_l2(net: &TinyNet, x: &Example, spec: &AttackSpec) -> Result<AttackOutcome> {
    spec.validate()?;
    let AttackKind::Cw {
        c,
        kappa,
        steps,
        step_size,
        momentum,
        search_c,
    } = spec.kind
    else {
        return Err(Error::param("cw called with a non-cw spec"));
    };
    let (t, targeted) = match spec.target_mode {
        TargetMode::Untargeted => (net.predict(&x.input)?, false),
        mode => resolve_target(net, x, mode)?,
    };
    if !search_c {
        return cw_single(net, x, t, targeted, c, kappa, steps, step_size, momentum);
    }
    let mut best: Option<(f64, AttackOutcome)> = None;
    let mut last = None;
    for c in [0.1, 1.0, 10.0] {
        let out = cw_single(net, x, t, targeted, c, kappa, steps, step_size, momentum)?;
        if out.success {
            let d: f64 = out
                .adversarial
                .iter()
                .zip(&x.input)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, out.clone()));
            }
        }
        last = Some(out);
    }
    Ok(best.map(|(_, o)| o).or(last).expect("three runs"))
}

/// Dispatch on the spec's kind.
pub fn run_attack(net: &TinyNet, x: &Example, spec: &AttackSpec) -> Result<AttackOutcome> {
    match spec.kind {
        AttackKind::Fgsm { .. } => fgsm(net, x, spec),
        AttackKind::Bim { .. } => bim(net, x, spec),
        AttackKind::Deepfool { .. } => deepfool(net, x, spec),
        AttackKind::Cw { .. } => cw_l2(net, x, spec),
    }
}
