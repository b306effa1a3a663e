//! Training: a classification loss plus one of four robustness regularisers,
//! optimised jointly with Adam.
//!
//! The `sdp_dual` objective adds, for sampled class pairs, the dual bound
//! `D·λ⁺_max(M^{ij} − diag c^{ij}) + 1ᵀmax(c^{ij}, 0)` with the `c^{ij}` trained
//! alongside the weights. Whatever `c` training ends with is a certificate for
//! the final network, no further optimisation needed.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::attacks::{pgd, AttackLoss, PgdConfig};
use crate::bounds::{
    build_pair_matrix, certificate_from_duals, certified_error, dual_value, evaluate_dual,
    unordered_pairs, DualCertificate,
};
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::{default_max_iter, top_eigenpair_op, SymMatrix};
use crate::model::{argmax, Activation, Network};
use crate::rng::{stream, substream, Stream};

/// Unordered class pair `(i, j)` with `i < j`.
pub type PairKey = (usize, usize);

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CERTCKP1";
pub const CHECKPOINT_VERSION: u32 = 1;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Normal,
    Frobenius,
    Spectral,
    Adversarial,
    SdpDual,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Normal => "normal",
            Objective::Frobenius => "frobenius",
            Objective::Spectral => "spectral",
            Objective::Adversarial => "adversarial",
            Objective::SdpDual => "sdp_dual",
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "normal" => Objective::Normal,
            "frobenius" => Objective::Frobenius,
            "spectral" => Objective::Spectral,
            "adversarial" => Objective::Adversarial,
            "sdp_dual" => Objective::SdpDual,
            _ => return invalid(format!("unknown objective {s:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassLoss {
    /// `Σ_{i≠y} max(0, 1 + f^i − f^y)`.
    Hinge,
    CrossEntropy,
}

impl FromStr for ClassLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hinge" => ClassLoss::Hinge,
            "cross_entropy" => ClassLoss::CrossEntropy,
            _ => return invalid(format!("unknown loss {s:?}")),
        })
    }
}

/// Regularisation strength. `Weighted` scales pair `(i, j)` by the fraction
/// `w^{ij}` of training points whose worst certified rival forms that pair,
/// recomputed every `refresh_epochs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaScheme {
    Unweighted { lambda: f64 },
    Weighted { lambda: f64, refresh_epochs: usize },
}

impl LambdaScheme {
    pub fn lambda(&self) -> f64 {
        match *self {
            LambdaScheme::Unweighted { lambda } | LambdaScheme::Weighted { lambda, .. } => lambda,
        }
    }
}

/// Step decay: `initial · decay^⌊epoch / interval⌋`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub interval: usize,
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        self.initial * self.decay.powi((epoch / self.interval) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    pub activation: Activation,
    pub objective: Objective,
    pub loss: ClassLoss,
    pub scheme: LambdaScheme,
    pub lr: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Radius used for the logged certificate columns and for the weighted scheme.
    pub eval_epsilon: f64,
    /// Inner attack of the adversarial objective.
    pub adversarial: PgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 100,
            activation: Activation::Relu,
            objective: Objective::Normal,
            loss: ClassLoss::CrossEntropy,
            scheme: LambdaScheme::Unweighted { lambda: 0.0 },
            lr: LrSchedule {
                initial: 1e-3,
                decay: 1.0,
                interval: 30,
            },
            epochs: 10,
            batch_size: 64,
            seed: 0,
            eval_epsilon: 0.1,
            adversarial: PgdConfig {
                epsilon: 0.3,
                step_size: 0.1,
                iterations: 40,
                restarts: 1,
                loss: AttackLoss::CrossEntropy,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambda = self.scheme.lambda();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return invalid("lambda must be finite and non-negative");
        }
        if let LambdaScheme::Weighted { refresh_epochs, .. } = self.scheme {
            if refresh_epochs == 0 {
                return invalid("refresh_epochs must be at least 1");
            }
            if self.objective != Objective::SdpDual {
                return invalid("the weighted scheme only applies to the sdp_dual objective");
            }
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return invalid("learning rate must be positive");
        }
        if !(self.lr.decay > 0.0 && self.lr.decay <= 1.0) {
            return invalid("learning-rate decay must lie in (0, 1]");
        }
        if self.lr.interval == 0 {
            return invalid("learning-rate decay interval must be at least 1");
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return invalid("hidden width and batch size must be positive");
        }
        if !(self.eval_epsilon >= 0.0) {
            return invalid("eval_epsilon must be non-negative");
        }
        if self.objective == Objective::Adversarial {
            self.adversarial.validate()?;
        }
        Ok(())
    }
}

/// Adam first and second moments for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    /// One Adam update at (1-based) step `t`.
    fn apply(&mut self, param: &mut [f64], grad: &[f64], lr: f64, t: u64) {
        let c1 = 1.0 - BETA1.powf(t as f64);
        let c2 = 1.0 - BETA2.powf(t as f64);
        for (((p, g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// Everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: Network,
    /// Dual vectors `c^{ij}`; only populated by the sdp_dual objective.
    pub duals: BTreeMap<PairKey, Vec<f64>>,
    /// Last top eigenvector per pair, used to warm-start the next solve.
    pub warm: BTreeMap<PairKey, Vec<f64>>,
    /// `w^{ij}` of the weighted scheme; empty otherwise.
    pub pair_weights: BTreeMap<PairKey, f64>,
    pub moments_w: Moments,
    pub moments_v: Moments,
    pub moments_c: BTreeMap<PairKey, Moments>,
    /// Number of parameter updates so far.
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    /// Fresh state: uniformly initialised network and `c = 0` for every pair.
    pub fn new(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 || input_dim == 0 {
            return invalid("training needs at least two classes and one input feature");
        }
        let mut rng = stream(config.seed, Stream::Init);
        let net = Network::init_uniform(
            config.hidden,
            input_dim,
            num_classes,
            config.activation,
            &mut rng,
        );
        let (mut duals, mut moments_c) = (BTreeMap::new(), BTreeMap::new());
        if config.objective == Objective::SdpDual {
            for key in unordered_pairs(num_classes) {
                duals.insert(key, vec![0.0; net.cert_dim()]);
                moments_c.insert(key, Moments::zeros(net.cert_dim()));
            }
        }
        Ok(Self {
            moments_w: Moments::zeros(net.w.len()),
            moments_v: Moments::zeros(net.v.len()),
            net,
            duals,
            warm: BTreeMap::new(),
            pair_weights: BTreeMap::new(),
            moments_c,
            step: 0,
            epoch: 0,
        })
    }

    /// Certificate from the current dual vectors (zeros for pairs without one).
    pub fn certificate(&self, epsilon: f64) -> Result<DualCertificate> {
        certificate_from_duals(&self.net, epsilon, &self.duals)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        out.extend_from_slice(&self.net.to_bytes());
        put_u64(&mut out, self.epoch as u64);
        put_u64(&mut out, self.step);
        put_moments(&mut out, &self.moments_w);
        put_moments(&mut out, &self.moments_v);
        put_u64(&mut out, self.duals.len() as u64);
        for (&(i, j), c) in &self.duals {
            put_u64(&mut out, i as u64);
            put_u64(&mut out, j as u64);
            put_vec(&mut out, c);
            put_moments(
                &mut out,
                self.moments_c
                    .get(&(i, j))
                    .unwrap_or(&Moments::zeros(c.len())),
            );
        }
        put_u64(&mut out, self.warm.len() as u64);
        for (&(i, j), u) in &self.warm {
            put_u64(&mut out, i as u64);
            put_u64(&mut out, j as u64);
            put_vec(&mut out, u);
        }
        put_u64(&mut out, self.pair_weights.len() as u64);
        for (&(i, j), &w) in &self.pair_weights {
            put_u64(&mut out, i as u64);
            put_u64(&mut out, j as u64);
            out.write_f64::<LittleEndian>(w).unwrap();
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut head = [0u8; 8];
        let mut cur = Cursor::new(bytes);
        cur.read_exact(&mut head)
            .map_err(|_| perr(0, "truncated checkpoint"))?;
        if &head != CHECKPOINT_MAGIC {
            return Err(perr(0, "bad magic, expected CERTCKP1"));
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| perr(8, "truncated checkpoint"))?;
        if version != CHECKPOINT_VERSION {
            return Err(perr(
                8,
                &format!("unsupported checkpoint version {version}"),
            ));
        }
        let (net, used) = Network::read_prefix(&bytes[12..]).map_err(|e| match e {
            Error::Parse { offset, message } => Error::Parse {
                offset: offset + 12,
                message,
            },
            other => other,
        })?;
        let mut r = Cursor::new(bytes);
        r.set_position((12 + used) as u64);
        let epoch = get_u64(&mut r)? as usize;
        let step = get_u64(&mut r)?;
        let moments_w = get_moments(&mut r)?;
        let moments_v = get_moments(&mut r)?;
        let (mut duals, mut moments_c) = (BTreeMap::new(), BTreeMap::new());
        for _ in 0..get_u64(&mut r)? {
            let key = get_key(&mut r, &net)?;
            duals.insert(key, get_vec(&mut r)?);
            moments_c.insert(key, get_moments(&mut r)?);
        }
        let mut warm = BTreeMap::new();
        for _ in 0..get_u64(&mut r)? {
            let key = get_key(&mut r, &net)?;
            warm.insert(key, get_vec(&mut r)?);
        }
        let mut pair_weights = BTreeMap::new();
        for _ in 0..get_u64(&mut r)? {
            let key = get_key(&mut r, &net)?;
            let w = r
                .read_f64::<LittleEndian>()
                .map_err(|_| perr(r.position() as usize, "truncated pair weight"))?;
            pair_weights.insert(key, w);
        }
        if r.position() as usize != bytes.len() {
            return Err(perr(
                r.position() as usize,
                "trailing bytes after checkpoint",
            ));
        }
        let dim = net.cert_dim();
        if moments_w.first.len() != net.w.len()
            || moments_v.first.len() != net.v.len()
            || duals.values().any(|c| c.len() != dim)
            || moments_c.values().any(|m| m.first.len() != dim)
            || warm.values().any(|u| u.len() != dim)
        {
            return Err(perr(0, "checkpoint blocks do not match the network shape"));
        }
        Ok(Self {
            net,
            duals,
            warm,
            pair_weights,
            moments_w,
            moments_v,
            moments_c,
            step,
            epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn perr(offset: usize, message: &str) -> Error {
    Error::Parse {
        offset,
        message: message.to_string(),
    }
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.write_u64::<LittleEndian>(x).unwrap();
}

fn put_vec(out: &mut Vec<u8>, xs: &[f64]) {
    put_u64(out, xs.len() as u64);
    for &x in xs {
        out.write_f64::<LittleEndian>(x).unwrap();
    }
}

fn put_moments(out: &mut Vec<u8>, m: &Moments) {
    put_vec(out, &m.first);
    put_vec(out, &m.second);
}

fn get_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let at = r.position() as usize;
    r.read_u64::<LittleEndian>()
        .map_err(|_| perr(at, "truncated checkpoint"))
}

fn get_vec(r: &mut Cursor<&[u8]>) -> Result<Vec<f64>> {
    let n = get_u64(r)? as usize;
    let at = r.position() as usize;
    if r.get_ref().len().saturating_sub(at) < n.saturating_mul(8) {
        return Err(perr(at, "truncated vector"));
    }
    (0..n)
        .map(|_| {
            r.read_f64::<LittleEndian>()
                .map_err(|_| perr(at, "truncated vector"))
        })
        .collect()
}

fn get_moments(r: &mut Cursor<&[u8]>) -> Result<Moments> {
    let first = get_vec(r)?;
    let second = get_vec(r)?;
    if first.len() != second.len() {
        return Err(perr(
            r.position() as usize,
            "moment blocks differ in length",
        ));
    }
    Ok(Moments { first, second })
}

fn get_key(r: &mut Cursor<&[u8]>, net: &Network) -> Result<PairKey> {
    let at = r.position() as usize;
    let (i, j) = (get_u64(r)? as usize, get_u64(r)? as usize);
    if i >= j || j >= net.num_classes() {
        return Err(perr(at, &format!("invalid class pair ({i}, {j})")));
    }
    Ok((i, j))
}

/// Gradients of the training objective with respect to every trainable block.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub duals: BTreeMap<PairKey, Vec<f64>>,
}

impl Gradients {
    pub fn zeros(net: &Network) -> Self {
        Self {
            w: DMatrix::zeros(net.hidden_dim(), net.input_dim()),
            v: DMatrix::zeros(net.num_classes(), net.hidden_dim()),
            duals: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    /// Classification term plus regulariser.
    pub loss: f64,
    pub classification: f64,
    pub regularizer: f64,
    pub grads: Gradients,
}

/// Batch-mean classification loss and its gradients. `inputs` is `d × B`.
pub fn classification_loss(
    net: &Network,
    inputs: &DMatrix<f64>,
    labels: &[usize],
    loss: ClassLoss,
) -> Result<(f64, Gradients)> {
    if inputs.ncols() != labels.len() || labels.is_empty() {
        return invalid("batch inputs and labels disagree or are empty");
    }
    if inputs.nrows() != net.input_dim() {
        return invalid("batch input dimension does not match network");
    }
    let k = net.num_classes();
    if labels.iter().any(|&y| y >= k) {
        return invalid("batch label out of range");
    }
    let act = net.activation;
    let z = &net.w * inputs;
    let h = z.map(|t| act.apply(t));
    let s = &net.v * &h;
    let b = labels.len() as f64;
    let mut g = DMatrix::zeros(k, labels.len());
    let mut total = 0.0;
    for (col, &y) in labels.iter().enumerate() {
        let sc = s.column(col);
        match loss {
            ClassLoss::CrossEntropy => {
                let top = sc.max();
                let z: f64 = sc.iter().map(|v| (v - top).exp()).sum();
                total += top + z.ln() - sc[y];
                for i in 0..k {
                    g[(i, col)] = (sc[i] - top).exp() / z;
                }
                g[(y, col)] -= 1.0;
            }
            ClassLoss::Hinge => {
                for i in (0..k).filter(|&i| i != y) {
                    let slack = 1.0 + sc[i] - sc[y];
                    if slack > 0.0 {
                        total += slack;
                        g[(i, col)] += 1.0;
                        g[(y, col)] -= 1.0;
                    }
                }
            }
        }
    }
    g /= b;
    let grad_v = &g * h.transpose();
    let back = net.v.tr_mul(&g);
    let dz = back.component_mul(&z.map(|t| act.derivative(t)));
    let grad_w = dz * inputs.transpose();
    Ok((
        total / b,
        Gradients {
            w: grad_w,
            v: grad_v,
            duals: BTreeMap::new(),
        },
    ))
}

/// One term `coef · dual(M^{ij}, c^{ij})` of the sampled regulariser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegTerm {
    pub pair: PairKey,
    pub coef: f64,
}

/// `Σ coef·(D·λ⁺_max(M^{ij} − diag c^{ij}) + 1ᵀmax(c^{ij}, 0))` and its gradients.
///
/// With `u` the top eigenvector, `uᵀMu = 2 Σ_a v_a (W u_t)_a (u₀ + u_{s,a})`, which
/// is bilinear in `v = V_i − V_j` and `W`. Terms with `coef = 0` are skipped.
/// Returns the new warm-start vectors alongside.
pub fn sdp_regularizer(
    net: &Network,
    duals: &BTreeMap<PairKey, Vec<f64>>,
    terms: &[RegTerm],
    warm: &BTreeMap<PairKey, Vec<f64>>,
) -> Result<(f64, Gradients, BTreeMap<PairKey, Vec<f64>>)> {
    let dim = net.cert_dim();
    let (m, d) = (net.hidden_dim(), net.input_dim());
    let h = 1 + d;
    let zeros = vec![0.0; dim];
    let parts = terms
        .par_iter()
        .filter(|t| t.coef != 0.0)
        .map(|t| {
            let (i, j) = t.pair;
            if i >= j {
                return invalid(format!("regulariser pair ({i}, {j}) is not ordered i < j"));
            }
            let pm = build_pair_matrix(net, i, j)?;
            let c = duals.get(&t.pair).unwrap_or(&zeros);
            let eval = evaluate_dual(&pm, c, warm.get(&t.pair).map(|u| u.as_slice()))?;
            let hinge = |ca: f64| if ca > 0.0 { t.coef } else { 0.0 };
            let mut gc: Vec<f64> = c.iter().map(|&ca| hinge(ca)).collect();
            let mut gw = None;
            if eval.lambda > 0.0 {
                let u = &eval.vector;
                let scale = t.coef * dim as f64;
                for (g, ua) in gc.iter_mut().zip(u) {
                    *g -= scale * ua * ua;
                }
                let ut = DVector::from_column_slice(&u[1..h]);
                let wut = &net.w * &ut;
                let gate = DVector::from_fn(m, |a, _| u[0] + u[h + a]);
                let gv = DVector::from_fn(m, |a, _| 2.0 * scale * wut[a] * gate[a]);
                let v = pm.v();
                let left = DVector::from_fn(m, |a, _| 2.0 * scale * v[a] * gate[a]);
                gw = Some((left * ut.transpose(), gv));
            }
            Ok((t.pair, t.coef * eval.value, gc, gw, eval.vector))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads = Gradients::zeros(net);
    let mut total = 0.0;
    let mut new_warm = BTreeMap::new();
    for ((i, j), value, gc, gw, u) in parts {
        total += value;
        if let Some((dw, dv)) = gw {
            grads.w += dw;
            for a in 0..m {
                grads.v[(i, a)] += dv[a];
                grads.v[(j, a)] -= dv[a];
            }
        }
        match grads.duals.get_mut(&(i, j)) {
            Some(acc) => acc.iter_mut().zip(&gc).for_each(|(x, g)| *x += g),
            None => {
                grads.duals.insert((i, j), gc);
            }
        }
        new_warm.insert((i, j), u);
    }
    Ok((total, grads, new_warm))
}

/// Batch classification loss plus the sampled dual regulariser.
pub fn sdp_dual_objective(
    net: &Network,
    duals: &BTreeMap<PairKey, Vec<f64>>,
    inputs: &DMatrix<f64>,
    labels: &[usize],
    loss: ClassLoss,
    terms: &[RegTerm],
) -> Result<ObjectiveValue> {
    let (cls, mut grads) = classification_loss(net, inputs, labels, loss)?;
    let (reg, rg, _) = sdp_regularizer(net, duals, terms, &BTreeMap::new())?;
    grads.w += rg.w;
    grads.v += rg.v;
    grads.duals = rg.duals;
    Ok(ObjectiveValue {
        loss: cls + reg,
        classification: cls,
        regularizer: reg,
        grads,
    })
}

/// Samples a class `i_t` for `step` and returns the ordered pairs `(i_t, j)`,
/// `j ≠ i_t`. Deterministic in `(seed, step)`.
pub fn pair_sampling(k: usize, seed: u64, step: u64) -> Result<Vec<(usize, usize)>> {
    if k < 2 {
        return invalid("pair sampling needs at least two classes");
    }
    let i = substream(seed, Stream::Pairs, step).random_range(0..k);
    Ok((0..k).filter(|&j| j != i).map(|j| (i, j)).collect())
}

/// Fraction of points whose worst certified rival `i* = argmax_{i≠y} f_SDP^{iy}`
/// forms each unordered pair with the label. Sums to one.
pub fn update_pair_weights(
    net: &Network,
    duals: &BTreeMap<PairKey, Vec<f64>>,
    data: &LabeledDataset,
    epsilon: f64,
) -> Result<BTreeMap<PairKey, f64>> {
    if data.is_empty() {
        return invalid("empty dataset");
    }
    let cert = certificate_from_duals(net, epsilon, duals)?;
    let table = cert.table(net.num_classes())?;
    let scale = 0.25 * epsilon * net.activation.derivative_bound();
    let mut counts: BTreeMap<PairKey, usize> = unordered_pairs(net.num_classes())
        .into_iter()
        .map(|key| (key, 0))
        .collect();
    for n in 0..data.len() {
        let (x, y) = data.example(n);
        let s = net.forward(x)?;
        let bounds: Vec<f64> = (0..s.len())
            .map(|i| {
                if i == y {
                    f64::NEG_INFINITY
                } else {
                    s[i] - s[y] + scale * table[i][y]
                }
            })
            .collect();
        let i = argmax(&bounds);
        *counts.get_mut(&(i.min(y), i.max(y))).unwrap() += 1;
    }
    let n = data.len() as f64;
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect())
}

/// Largest singular value of `a` with its left and right singular vectors.
fn top_singular(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    let gram = a.transpose() * a;
    let n = gram.nrows();
    let sym = SymMatrix::from_upper(n, |p, q| 0.5 * (gram[(p, q)] + gram[(q, p)]));
    let top = top_eigenpair_op(&sym, 1e-10, default_max_iter(n), None)?;
    let right = DVector::from_vec(top.vector);
    let av = a * &right;
    let sigma = av.norm();
    if sigma == 0.0 {
        return Ok((0.0, DVector::zeros(a.nrows()), right));
    }
    Ok((sigma, av / sigma, right))
}

/// `λ(‖W‖ + ‖V‖)` for the Frobenius or spectral norm.
fn norm_regularizer(net: &Network, lambda: f64, spectral: bool) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros(net);
    let mut total = 0.0;
    for (mat, out) in [(&net.w, &mut grads.w), (&net.v, &mut grads.v)] {
        if spectral {
            let (sigma, u, v) = top_singular(mat)?;
            total += sigma;
            if sigma > 0.0 {
                *out = lambda * u * v.transpose();
            }
        } else {
            let norm = mat.norm();
            total += norm;
            if norm > 0.0 {
                *out = mat * (lambda / norm);
            }
        }
    }
    Ok((lambda * total, grads))
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// Completed epochs, starting at 1.
    pub epoch: usize,
    pub lr: f64,
    /// Mean objective over the epoch's steps.
    pub loss: f64,
    /// Mean regulariser value over the epoch's steps.
    pub regularizer: f64,
    pub clean_error: f64,
    /// Mean training-time dual value over all pairs.
    pub mean_dual: f64,
    /// Certified training error at `eval_epsilon` with the training-time duals.
    pub cert_error: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str =
        "epoch,lr,loss,regularizer,clean_error,mean_dual,cert_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.epoch,
            self.lr,
            self.loss,
            self.regularizer,
            self.clean_error,
            self.mean_dual,
            self.cert_error
        )
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(EpochLog::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    /// Certificate from the trained duals at `eval_epsilon` (sdp_dual only).
    pub certificate: Option<DualCertificate>,
}

/// Trains from a fresh state.
pub fn train(config: &TrainConfig, data: &LabeledDataset) -> Result<TrainOutcome> {
    let state = TrainState::new(config, data.input_dim(), data.num_classes())?;
    train_from(config, data, state, |_, _| Ok(()))
}

/// Continues training `state` up to `config.epochs`, calling `on_epoch` after
/// every epoch (e.g. to write a checkpoint).
pub fn train_from(
    config: &TrainConfig,
    data: &LabeledDataset,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&TrainState, &EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.input_dim() != state.net.input_dim() || data.num_classes() > state.net.num_classes() {
        return invalid("dataset shape does not match the network being trained");
    }
    let n = data.len();
    let mut log = Vec::new();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        if let LambdaScheme::Weighted { refresh_epochs, .. } = config.scheme {
            if epoch.is_multiple_of(refresh_epochs) {
                state.pair_weights =
                    update_pair_weights(&state.net, &state.duals, data, config.eval_epsilon)?;
            }
        }
        let lr = config.lr.rate(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(config.seed, Stream::Train, epoch as u64));
        let (mut loss_sum, mut reg_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let value = objective_step(config, data, &mut state, batch)?;
            if !value.loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at epoch {}, step {}",
                    epoch + 1,
                    state.step + 1
                )));
            }
            apply_update(&mut state, &value.grads, lr);
            if !state.net.is_finite() || state.duals.values().flatten().any(|c| !c.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite parameters after epoch {}, step {}",
                    epoch + 1,
                    state.step
                )));
            }
            loss_sum += value.loss;
            reg_sum += value.regularizer;
            steps += 1;
        }
        state.epoch += 1;
        let cert = state.certificate(config.eval_epsilon)?;
        let mean_dual =
            cert.pairs.iter().map(|p| p.dual_value).sum::<f64>() / cert.pairs.len() as f64;
        let clean_error = (0..n)
            .map(|i| {
                let (x, y) = data.example(i);
                Ok(state.net.predict(x)? != y)
            })
            .collect::<Result<Vec<bool>>>()?
            .iter()
            .filter(|&&wrong| wrong)
            .count() as f64
            / n as f64;
        let row = EpochLog {
            epoch: state.epoch,
            lr,
            loss: loss_sum / steps as f64,
            regularizer: reg_sum / steps as f64,
            clean_error,
            mean_dual,
            cert_error: certified_error(&state.net, data, config.eval_epsilon, &cert)?,
        };
        on_epoch(&state, &row)?;
        log.push(row);
    }
    let certificate = match config.objective {
        Objective::SdpDual => Some(state.certificate(config.eval_epsilon)?),
        _ => None,
    };
    Ok(TrainOutcome {
        state,
        log,
        certificate,
    })
}

/// Evaluates the configured objective on one batch, updating warm starts.
fn objective_step(
    config: &TrainConfig,
    data: &LabeledDataset,
    state: &mut TrainState,
    batch: &[usize],
) -> Result<ObjectiveValue> {
    let inputs = data.inputs().select_columns(batch);
    let labels: Vec<usize> = batch.iter().map(|&i| data.labels()[i]).collect();
    let lambda = config.scheme.lambda();
    let net = &state.net;
    let (cls, mut grads) = classification_loss(net, &inputs, &labels, config.loss)?;
    let (reg, extra) = match config.objective {
        Objective::Normal => (0.0, None),
        Objective::Frobenius | Objective::Spectral if lambda == 0.0 => (0.0, None),
        Objective::Frobenius => {
            let (r, g) = norm_regularizer(net, lambda, false)?;
            (r, Some(g))
        }
        Objective::Spectral => {
            let (r, g) = norm_regularizer(net, lambda, true)?;
            (r, Some(g))
        }
        Objective::Adversarial => {
            let adv = batch
                .par_iter()
                .enumerate()
                .map(|(pos, &idx)| {
                    let (x, y) = data.example(idx);
                    let key = state.step * config.batch_size as u64 + pos as u64;
                    let mut rng = substream(config.seed, Stream::AdvTrain, key);
                    Ok(pgd(net, x, y, &config.adversarial, &mut rng)?.adversarial)
                })
                .collect::<Result<Vec<_>>>()?;
            let adv_inputs =
                DMatrix::from_iterator(data.input_dim(), batch.len(), adv.into_iter().flatten());
            let (l, mut g) = classification_loss(net, &adv_inputs, &labels, config.loss)?;
            g.w *= lambda;
            g.v *= lambda;
            (lambda * l, Some(g))
        }
        Objective::SdpDual => {
            let k = net.num_classes();
            let terms: Vec<RegTerm> = pair_sampling(k, config.seed, state.step)?
                .into_iter()
                .map(|(i, j)| {
                    let pair = (i.min(j), i.max(j));
                    let w = match config.scheme {
                        LambdaScheme::Unweighted { .. } => 1.0,
                        LambdaScheme::Weighted { .. } => {
                            state.pair_weights.get(&pair).copied().unwrap_or(0.0)
                        }
                    };
                    RegTerm {
                        pair,
                        coef: k as f64 * lambda * w,
                    }
                })
                .collect();
            let (r, g, warm) = sdp_regularizer(net, &state.duals, &terms, &state.warm)?;
            state.warm.extend(warm);
            (r, Some(g))
        }
    };
    if let Some(g) = extra {
        grads.w += g.w;
        grads.v += g.v;
        grads.duals = g.duals;
    }
    Ok(ObjectiveValue {
        loss: cls + reg,
        classification: cls,
        regularizer: reg,
        grads,
    })
}

fn apply_update(state: &mut TrainState, grads: &Gradients, lr: f64) {
    state.step += 1;
    let t = state.step;
    state
        .moments_w
        .apply(state.net.w.as_mut_slice(), grads.w.as_slice(), lr, t);
    state
        .moments_v
        .apply(state.net.v.as_mut_slice(), grads.v.as_slice(), lr, t);
    for (key, g) in &grads.duals {
        if let (Some(c), Some(m)) = (state.duals.get_mut(key), state.moments_c.get_mut(key)) {
            m.apply(c, g, lr, t);
        }
    }
}

/// Dual value of every pair under the state's current duals, for diagnostics.
pub fn pair_dual_values(state: &TrainState) -> Result<BTreeMap<PairKey, f64>> {
    let zeros = vec![0.0; state.net.cert_dim()];
    unordered_pairs(state.net.num_classes())
        .into_par_iter()
        .map(|key| {
            let pm = build_pair_matrix(&state.net, key.0, key.1)?;
            Ok((
                key,
                dual_value(&pm, state.duals.get(&key).unwrap_or(&zeros))?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn small_net(seed: u64) -> Network {
        let mut rng = stream(seed, Stream::Init);
        let mut net = Network::init_uniform(5, 4, 3, Activation::Relu, &mut rng);
        net.v *= 2.0;
        net
    }

    fn random_duals(net: &Network, seed: u64) -> BTreeMap<PairKey, Vec<f64>> {
        let mut rng = stream(seed, Stream::Data);
        unordered_pairs(net.num_classes())
            .into_iter()
            .map(|key| {
                let c = (0..net.cert_dim())
                    .map(|_| rng.random_range(-0.3..0.3))
                    .collect();
                (key, c)
            })
            .collect()
    }

    #[test]
    fn lr_schedule_steps() {
        let lr = LrSchedule {
            initial: 1e-3,
            decay: 0.1,
            interval: 30,
        };
        assert_eq!(lr.rate(0), 1e-3);
        assert_eq!(lr.rate(29), 1e-3);
        assert!((lr.rate(30) - 1e-4).abs() < 1e-18);
        assert!((lr.rate(89) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn pair_sampling_shapes() {
        assert_eq!(pair_sampling(10, 3, 17).unwrap().len(), 9);
        assert_eq!(pair_sampling(2, 3, 0).unwrap().len(), 1);
        assert!(pair_sampling(1, 3, 0).is_err());
        let mut counts = [0usize; 5];
        for step in 0..10_000 {
            counts[pair_sampling(5, 9, step).unwrap()[0].0] += 1;
        }
        for c in counts {
            assert!((1900..=2100).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn zero_net_has_zero_regularizer() {
        let net = Network::zeros(3, 2, 2, Activation::Relu);
        let duals = BTreeMap::from([((0, 1), vec![0.0; 6])]);
        let terms = [RegTerm {
            pair: (0, 1),
            coef: 1.0,
        }];
        let (r, g, _) = sdp_regularizer(&net, &duals, &terms, &BTreeMap::new()).unwrap();
        assert_eq!(r, 0.0);
        assert!(g.w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn lambda_zero_matches_plain_loss() {
        let net = small_net(1);
        let data = synth_blobs(3, 4, 12, 0.8, 2).unwrap();
        let duals = random_duals(&net, 3);
        let terms = [RegTerm {
            pair: (0, 2),
            coef: 0.0,
        }];
        let obj = sdp_dual_objective(
            &net,
            &duals,
            data.inputs(),
            data.labels(),
            ClassLoss::Hinge,
            &terms,
        )
        .unwrap();
        let (cls, g) =
            classification_loss(&net, data.inputs(), data.labels(), ClassLoss::Hinge).unwrap();
        assert_eq!(obj.loss, cls);
        assert_eq!(obj.grads.w, g.w);
        assert_eq!(obj.grads.v, g.v);
    }

    #[test]
    fn regularizer_gradient_matches_differences() {
        let net = small_net(4);
        let duals = random_duals(&net, 5);
        let terms = [
            RegTerm {
                pair: (0, 1),
                coef: 0.7,
            },
            RegTerm {
                pair: (1, 2),
                coef: 1.3,
            },
        ];
        let f = |n: &Network, c: &BTreeMap<PairKey, Vec<f64>>| {
            sdp_regularizer(n, c, &terms, &BTreeMap::new()).unwrap().0
        };
        let (_, g, _) = sdp_regularizer(&net, &duals, &terms, &BTreeMap::new()).unwrap();
        let h = 1e-5;
        for (a, b) in [(0, 0), (2, 3), (4, 1)] {
            let mut p = net.clone();
            p.w[(a, b)] += h;
            let mut q = net.clone();
            q.w[(a, b)] -= h;
            let fd = (f(&p, &duals) - f(&q, &duals)) / (2.0 * h);
            assert!(
                (fd - g.w[(a, b)]).abs() <= 1e-4 * fd.abs().max(1.0),
                "W {fd} {}",
                g.w[(a, b)]
            );
        }
        for (a, b) in [(0, 0), (1, 4), (2, 2)] {
            let mut p = net.clone();
            p.v[(a, b)] += h;
            let mut q = net.clone();
            q.v[(a, b)] -= h;
            let fd = (f(&p, &duals) - f(&q, &duals)) / (2.0 * h);
            assert!(
                (fd - g.v[(a, b)]).abs() <= 1e-4 * fd.abs().max(1.0),
                "V {fd} {}",
                g.v[(a, b)]
            );
        }
        for idx in [0, 3, 7] {
            let mut p = duals.clone();
            p.get_mut(&(1, 2)).unwrap()[idx] += h;
            let mut q = duals.clone();
            q.get_mut(&(1, 2)).unwrap()[idx] -= h;
            let fd = (f(&net, &p) - f(&net, &q)) / (2.0 * h);
            let an = g.duals[&(1, 2)][idx];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1.0), "c {fd} {an}");
        }
    }

    #[test]
    fn classification_gradient_matches_differences() {
        let net = small_net(6);
        let data = synth_blobs(3, 4, 9, 0.8, 7).unwrap();
        for loss in [ClassLoss::CrossEntropy, ClassLoss::Hinge] {
            let (_, g) = classification_loss(&net, data.inputs(), data.labels(), loss).unwrap();
            let f = |n: &Network| {
                classification_loss(n, data.inputs(), data.labels(), loss)
                    .unwrap()
                    .0
            };
            let h = 1e-6;
            for (a, b) in [(0, 1), (3, 2)] {
                let mut p = net.clone();
                p.w[(a, b)] += h;
                let mut q = net.clone();
                q.w[(a, b)] -= h;
                let fd = (f(&p) - f(&q)) / (2.0 * h);
                assert!(
                    (fd - g.w[(a, b)]).abs() < 1e-6,
                    "{loss:?} {fd} {}",
                    g.w[(a, b)]
                );
            }
            let mut p = net.clone();
            p.v[(1, 3)] += h;
            let mut q = net.clone();
            q.v[(1, 3)] -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            assert!((fd - g.v[(1, 3)]).abs() < 1e-6);
        }
    }

    #[test]
    fn norm_regularizer_gradients() {
        let net = small_net(8);
        for spectral in [false, true] {
            let (_, g) = norm_regularizer(&net, 0.5, spectral).unwrap();
            let f = |n: &Network| norm_regularizer(n, 0.5, spectral).unwrap().0;
            let h = 1e-6;
            let mut p = net.clone();
            p.w[(1, 1)] += h;
            let mut q = net.clone();
            q.w[(1, 1)] -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            assert!(
                (fd - g.w[(1, 1)]).abs() < 1e-5,
                "{spectral} {fd} {}",
                g.w[(1, 1)]
            );
        }
    }

    #[test]
    fn weights_follow_dominant_class() {
        // Class 0 outscores everything, so every worst rival pair contains 0.
        let mut net = small_net(9);
        for a in 0..net.hidden_dim() {
            net.v[(0, a)] = 10.0;
        }
        let data = synth_blobs(3, 4, 30, 0.5, 1).unwrap();
        let w = update_pair_weights(&net, &BTreeMap::new(), &data, 0.1).unwrap();
        assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w[&(1, 2)], 0.0);
        assert!(w[&(0, 1)] > 0.0 && w[&(0, 2)] > 0.0);

        let two = synth_blobs(2, 4, 10, 0.5, 1).unwrap();
        let net2 = Network::init_uniform(3, 4, 2, Activation::Relu, &mut stream(0, Stream::Init));
        let w2 = update_pair_weights(&net2, &BTreeMap::new(), &two, 0.1).unwrap();
        assert_eq!(w2[&(0, 1)], 1.0);
    }

    #[test]
    fn c_descent_improves_best() {
        let net = small_net(10);
        let terms = [RegTerm {
            pair: (0, 1),
            coef: 1.0,
        }];
        let mut duals = BTreeMap::from([((0, 1), vec![0.0; net.cert_dim()])]);
        let start = sdp_regularizer(&net, &duals, &terms, &BTreeMap::new())
            .unwrap()
            .0;
        let mut best = start;
        for t in 1..=100 {
            let (r, g, _) = sdp_regularizer(&net, &duals, &terms, &BTreeMap::new()).unwrap();
            best = best.min(r);
            let eta = 0.05 / (t as f64).sqrt();
            for (c, gc) in duals
                .get_mut(&(0, 1))
                .unwrap()
                .iter_mut()
                .zip(&g.duals[&(0, 1)])
            {
                *c -= eta * gc;
            }
        }
        assert!(best < start, "{best} vs {start}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = synth_blobs(3, 4, 24, 0.8, 3).unwrap();
        let config = TrainConfig {
            hidden: 6,
            objective: Objective::SdpDual,
            loss: ClassLoss::Hinge,
            scheme: LambdaScheme::Weighted {
                lambda: 0.05,
                refresh_epochs: 1,
            },
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(&config, &data).unwrap();
        let bytes = out.state.to_bytes();
        let back = TrainState::from_bytes(&bytes).unwrap();
        assert_eq!(back, out.state);
        assert!(matches!(
            TrainState::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Parse { .. })
        ));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(
            TrainState::from_bytes(&bad),
            Err(Error::Parse { offset: 8, .. })
        ));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = synth_blobs(3, 4, 24, 0.8, 3).unwrap();
        let config = TrainConfig {
            hidden: 6,
            objective: Objective::SdpDual,
            scheme: LambdaScheme::Unweighted { lambda: 0.05 },
            epochs: 3,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let full = train(&config, &data).unwrap();
        let first = train(
            &TrainConfig {
                epochs: 1,
                ..config.clone()
            },
            &data,
        )
        .unwrap();
        let restored = TrainState::from_bytes(&first.state.to_bytes()).unwrap();
        let rest = train_from(&config, &data, restored, |_, _| Ok(())).unwrap();
        assert_eq!(rest.state, full.state);
        assert_eq!(rest.log, full.log[1..]);
    }

    #[test]
    fn rejects_bad_config() {
        let bad = |c: TrainConfig| c.validate().is_err();
        assert!(bad(TrainConfig {
            scheme: LambdaScheme::Unweighted { lambda: -1.0 },
            ..TrainConfig::default()
        }));
        assert!(bad(TrainConfig {
            lr: LrSchedule {
                initial: 1e-3,
                decay: 1.5,
                interval: 1
            },
            ..TrainConfig::default()
        }));
        assert!(bad(TrainConfig {
            scheme: LambdaScheme::Weighted {
                lambda: 0.1,
                refresh_epochs: 2
            },
            ..TrainConfig::default()
        }));
    }
}
