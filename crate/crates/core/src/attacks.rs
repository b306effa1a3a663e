//! Lower bounds on adversarial error: FGSM and multi-restart PGD.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::sign;
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::model::{argmax, Network};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    CrossEntropy,
    /// Untargeted margin `max_{i≠y} f^{iy}(x)`.
    Hinge,
}

impl std::str::FromStr for AttackLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(AttackLoss::CrossEntropy),
            "hinge" => Ok(AttackLoss::Hinge),
            other => invalid(format!("unknown attack loss '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    /// Random restarts, in addition to the start seeded at `x`.
    pub restarts: usize,
    pub loss: AttackLoss,
}

impl PgdConfig {
    /// Step 0.1, 40 iterations, 5 random restarts, cross-entropy.
    pub fn standard(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: 0.1,
            iterations: 40,
            restarts: 5,
            loss: AttackLoss::CrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return invalid("PGD radius must be non-negative");
        }
        if !(self.step_size > 0.0) {
            return invalid("PGD step size must be positive");
        }
        if self.iterations == 0 || self.restarts == 0 {
            return invalid("PGD needs at least one iteration and one restart");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attack {
    Fgsm { epsilon: f64, loss: AttackLoss },
    Pgd(PgdConfig),
}

impl Attack {
    pub fn name(&self) -> &'static str {
        match self {
            Attack::Fgsm { .. } => "fgsm",
            Attack::Pgd(_) => "pgd",
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            Attack::Fgsm { epsilon, .. } => *epsilon,
            Attack::Pgd(cfg) => cfg.epsilon,
        }
    }
}

/// Result of attacking one example.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Vec<f64>,
    pub loss: f64,
    pub predicted: usize,
    /// `max_{i≠y} f^{iy}` at the adversarial input.
    pub margin: f64,
    pub success: bool,
}

/// Attack loss and its input gradient at `x`.
pub fn attack_loss_grad(
    net: &Network,
    x: &[f64],
    y: usize,
    loss: AttackLoss,
) -> Result<(f64, Vec<f64>)> {
    check_label(net, y)?;
    let s = net.forward(x)?;
    match loss {
        AttackLoss::CrossEntropy => {
            let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = s.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = exps.iter().sum();
            let value = top + z.ln() - s[y];
            let mut g: Vec<f64> = exps.iter().map(|e| e / z).collect();
            g[y] -= 1.0;
            Ok((value, net.scores_input_grad(x, &g)?))
        }
        AttackLoss::Hinge => {
            let (i, value) = worst_rival(&s, y);
            let pair = net.pair(i, y)?;
            Ok((value, net.margin_input_grad(&pair, x)?))
        }
    }
}

fn worst_rival(scores: &[f64], y: usize) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &s) in scores.iter().enumerate() {
        if i != y && s - scores[y] > best.1 {
            best = (i, s - scores[y]);
        }
    }
    best
}

fn check_label(net: &Network, y: usize) -> Result<()> {
    if y >= net.num_classes() {
        return invalid(format!(
            "label {y} out of range for {} classes",
            net.num_classes()
        ));
    }
    if net.num_classes() < 2 {
        return invalid("attacks need at least two classes");
    }
    Ok(())
}

/// Projects onto `B_ε(x) ∩ [0,1]^d`.
pub fn project(candidate: &mut [f64], x: &[f64], epsilon: f64) {
    for (c, &xi) in candidate.iter_mut().zip(x) {
        *c = c.clamp(xi - epsilon, xi + epsilon).clamp(0.0, 1.0);
    }
}

/// One signed step of size `step` followed by projection.
fn signed_step(current: &mut [f64], grad: &[f64], step: f64, x: &[f64], epsilon: f64) {
    for (c, g) in current.iter_mut().zip(grad) {
        *c += step * sign(*g);
    }
    project(current, x, epsilon);
}

/// `clip(x + ε·sign(∇ loss), [0,1])`.
pub fn fgsm(
    net: &Network,
    x: &[f64],
    y: usize,
    epsilon: f64,
    loss: AttackLoss,
) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return invalid("attack radius must be non-negative");
    }
    let (_, g) = attack_loss_grad(net, x, y, loss)?;
    let mut adv = x.to_vec();
    signed_step(&mut adv, &g, epsilon, x, epsilon);
    Ok(adv)
}

fn evaluate(net: &Network, x_adv: Vec<f64>, y: usize, loss: AttackLoss) -> Result<AttackOutcome> {
    let s = net.forward(&x_adv)?;
    let (_, margin) = worst_rival(&s, y);
    let value = match loss {
        AttackLoss::Hinge => margin,
        AttackLoss::CrossEntropy => {
            let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            top + s.iter().map(|v| (v - top).exp()).sum::<f64>().ln() - s[y]
        }
    };
    let predicted = argmax(&s);
    Ok(AttackOutcome {
        adversarial: x_adv,
        loss: value,
        predicted,
        margin,
        success: predicted != y,
    })
}

/// Successful outcomes beat unsuccessful ones; then higher loss wins.
fn better(a: &AttackOutcome, b: &AttackOutcome) -> bool {
    (a.success, a.loss) > (b.success, b.loss)
}

/// Projected sign-gradient ascent.
///
/// The first start is the FGSM point from `x`; `cfg.restarts` further starts
/// are uniform in `B_ε(x) ∩ [0,1]^d`. Each start runs `cfg.iterations` steps
/// and every iterate is a candidate, so the result is never worse than FGSM.
pub fn pgd<R: Rng + ?Sized>(
    net: &Network,
    x: &[f64],
    y: usize,
    cfg: &PgdConfig,
    rng: &mut R,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut best = evaluate(net, fgsm(net, x, y, eps, cfg.loss)?, y, cfg.loss)?;
    for restart in 0..=cfg.restarts {
        let mut cur = if restart == 0 {
            best.adversarial.clone()
        } else {
            let mut p: Vec<f64> = x
                .iter()
                .map(|&xi| {
                    let (lo, hi) = ((xi - eps).max(0.0), (xi + eps).min(1.0));
                    if hi > lo {
                        rng.random_range(lo..=hi)
                    } else {
                        lo
                    }
                })
                .collect();
            project(&mut p, x, eps);
            p
        };
        if restart > 0 {
            let start = evaluate(net, cur.clone(), y, cfg.loss)?;
            if better(&start, &best) {
                best = start;
            }
        }
        for _ in 0..cfg.iterations {
            let (_, g) = attack_loss_grad(net, &cur, y, cfg.loss)?;
            signed_step(&mut cur, &g, cfg.step_size, x, eps);
            let cand = evaluate(net, cur.clone(), y, cfg.loss)?;
            if better(&cand, &best) {
                best = cand;
            }
        }
    }
    Ok(best)
}

/// Runs one attack on one example; PGD draws from `rng`.
pub fn run_attack<R: Rng + ?Sized>(
    net: &Network,
    x: &[f64],
    y: usize,
    attack: &Attack,
    rng: &mut R,
) -> Result<AttackOutcome> {
    match attack {
        Attack::Fgsm { epsilon, loss } => {
            let adv = fgsm(net, x, y, *epsilon, *loss)?;
            evaluate(net, adv, y, *loss)
        }
        Attack::Pgd(cfg) => pgd(net, x, y, cfg, rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleAttack {
    pub example_id: usize,
    pub clean_correct: bool,
    pub outcome: AttackOutcome,
}

impl ExampleAttack {
    pub fn attacked_correct(&self) -> bool {
        !self.outcome.success
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub attack: Attack,
    pub examples: Vec<ExampleAttack>,
    pub clean_error: f64,
    pub error: f64,
}

impl AttackReport {
    /// `example_id,clean_correct,attacked_correct,attack_margin`, one row per example.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("example_id,clean_correct,attacked_correct,attack_margin\n");
        for e in &self.examples {
            out.push_str(&format!(
                "{},{},{},{:.12e}\n",
                e.example_id,
                e.clean_correct as u8,
                e.attacked_correct() as u8,
                e.outcome.margin
            ));
        }
        out
    }
}

/// Attacks every example; example `n` uses the generator
/// `substream(seed, Attack, n)`, so the report does not depend on scheduling.
pub fn attack_dataset(
    net: &Network,
    data: &LabeledDataset,
    attack: &Attack,
    seed: u64,
) -> Result<AttackReport> {
    if data.is_empty() {
        return invalid("empty dataset");
    }
    let examples = (0..data.len())
        .into_par_iter()
        .map(|n| {
            let (x, y) = data.example(n);
            let mut rng = substream(seed, Stream::Attack, n as u64);
            let clean_correct = net.predict(x)? == y;
            let outcome = run_attack(net, x, y, attack, &mut rng)?;
            Ok(ExampleAttack {
                example_id: n,
                clean_correct,
                outcome,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = examples.len() as f64;
    let clean_error = examples.iter().filter(|e| !e.clean_correct).count() as f64 / n;
    let error = examples.iter().filter(|e| e.outcome.success).count() as f64 / n;
    Ok(AttackReport {
        attack: *attack,
        examples,
        clean_error,
        error,
    })
}

/// Fraction of examples misclassified after the attack.
pub fn attack_error(
    net: &Network,
    data: &LabeledDataset,
    attack: &Attack,
    seed: u64,
) -> Result<f64> {
    Ok(attack_dataset(net, data, attack, seed)?.error)
}
