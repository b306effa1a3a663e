//! Upper bounds on the worst-case pairwise margin inside an ℓ∞ ball.
//!
//! For a pair `(i, j)` with `v = V_i − V_j`, the certificate matrix packs
//! `y = (1, t, s)` with `t ∈ [−1,1]^d`, `s ∈ [−1,1]^m`:
//!
//! ```text
//!        ⎡ 0           vᵀW           0          ⎤
//!  M  =  ⎢ Wᵀv         0             Wᵀdiag(v)  ⎥
//!        ⎣ 0           diag(v)W      0          ⎦
//! ```
//!
//! so that `¼ yᵀMy = ½ tᵀWᵀdiag(v)(1 + s)`, the bilinear gradient bound after
//! mapping `s ∈ [0,1]^m` to `[−1,1]^m`. The constant coordinate couples to the
//! input block; coupling it to the hidden block instead would bound a different
//! (and in general smaller) quantity.
//!
//! and every `c ∈ ℝ^D` gives the valid bound
//! `max_{P ⪰ 0, diag P ≤ 1} ⟨M, P⟩ ≤ D·λ⁺_max(M − diag c) + 1ᵀmax(c, 0)`.
//! The worst-case margin is then at most `f^{ij}(x) + (ε/4)·β·dual`, with β the
//! activation derivative bound (1 for relu, 1/4 for sigmoid).
//!
//! `M^{ji} = −M^{ij}` and `S M S = −M` for `S = diag(1, −1_d, 1_m)`, so both
//! orientations share one dual value for any `c`. Certificates therefore store
//! unordered pairs `i < j`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, DVectorView};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::linalg::{
    default_max_iter, top_eigenpair_op, DiagShifted, SymMatrix, SymOperator, DEFAULT_TOL,
};
use crate::model::{MarginPair, Network};

/// Largest hidden width accepted by [`qp_vertex_oracle`].
pub const QP_ORACLE_MAX_HIDDEN: usize = 20;

/// Default number of subgradient steps for [`minimize_dual`].
pub const DEFAULT_DUAL_STEPS: usize = 2000;

/// The structured matrix `M^{ij}(V, W)` of one class pair, of size
/// `D = 1 + d + m`. Applied in `O(md)` without forming the dense array.
#[derive(Debug, Clone)]
pub struct PairCertMatrix<'a> {
    pub i: usize,
    pub j: usize,
    w: &'a DMatrix<f64>,
    /// `Wᵀv`, the constant-to-input coupling.
    wt_v: DVector<f64>,
    v: DVector<f64>,
}

impl<'a> PairCertMatrix<'a> {
    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }

    /// Block offsets: index 0 is the constant, `1..=d` the input block,
    /// `1+d..D` the hidden block.
    fn hidden_offset(&self) -> usize {
        1 + self.input_dim()
    }
}

/// Builds `M^{ij}` from `v = V_i − V_j` and `W`.
pub fn build_pair_matrix(net: &Network, i: usize, j: usize) -> Result<PairCertMatrix<'_>> {
    let pair = MarginPair::new(net, i, j)?;
    Ok(pair_matrix_from(net, &pair))
}

pub fn pair_matrix_from<'a>(net: &'a Network, pair: &MarginPair) -> PairCertMatrix<'a> {
    PairCertMatrix {
        i: pair.i,
        j: pair.j,
        w: &net.w,
        wt_v: net.w.tr_mul(&pair.v),
        v: pair.v.clone(),
    }
}

impl SymOperator for PairCertMatrix<'_> {
    fn dim(&self) -> usize {
        1 + self.input_dim() + self.hidden_dim()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.input_dim();
        let h = self.hidden_offset();
        let m = self.hidden_dim();
        let xt = DVectorView::from_slice(&x[1..h], d);
        let xs = &x[h..];
        // Hidden block: v ⊙ (W x_t).
        let wx = self.w * xt;
        for a in 0..m {
            out[h + a] = self.v[a] * wx[a];
        }
        // Constant: vᵀW x_t.
        out[0] = self.v.dot(&wx);
        // Input block: Wᵀ(v ⊙ (x₀·1 + x_s)).
        let gated = DVector::from_fn(m, |a, _| self.v[a] * (x[0] + xs[a]));
        let back = self.w.tr_mul(&gated);
        out[1..h].copy_from_slice(back.as_slice());
    }

    fn to_dense(&self) -> SymMatrix {
        let h = self.hidden_offset();
        let mut m = SymMatrix::zeros(self.dim());
        for b in 0..self.input_dim() {
            m.set(0, 1 + b, self.wt_v[b]);
        }
        for a in 0..self.hidden_dim() {
            for b in 0..self.input_dim() {
                m.set(1 + b, h + a, self.w[(a, b)] * self.v[a]);
            }
        }
        m
    }

    fn is_finite(&self) -> bool {
        self.v.iter().all(|x| x.is_finite()) && self.w.iter().all(|x| x.is_finite())
    }

    fn frobenius_norm(&self) -> f64 {
        let mut sq = self.wt_v.norm_squared();
        for a in 0..self.hidden_dim() {
            sq += self.v[a] * self.v[a] * self.w.row(a).norm_squared();
        }
        (2.0 * sq).sqrt()
    }
}

/// Result of one dual evaluation: the value and the eigenpair behind it.
#[derive(Debug, Clone)]
pub struct DualEval {
    pub value: f64,
    /// Raw `λ_max(M − diag c)`, possibly negative.
    pub lambda: f64,
    pub vector: Vec<f64>,
}

impl DualEval {
    /// Subgradient with respect to `c`: `−D·(u ⊙ u)` while `λ_max > 0`, plus
    /// the indicator of `c_a > 0`.
    pub fn subgradient(&self, c: &[f64]) -> Vec<f64> {
        let dim = c.len() as f64;
        c.iter()
            .zip(&self.vector)
            .map(|(&ca, &ua)| {
                let hinge = if ca > 0.0 { 1.0 } else { 0.0 };
                if self.lambda > 0.0 {
                    hinge - dim * ua * ua
                } else {
                    hinge
                }
            })
            .collect()
    }
}

/// Evaluates `D·λ⁺_max(M − diag c) + 1ᵀmax(c, 0)`, optionally warm-starting the
/// eigen-solver from `start`.
pub fn evaluate_dual<O: SymOperator + ?Sized>(
    m: &O,
    c: &[f64],
    start: Option<&[f64]>,
) -> Result<DualEval> {
    let dim = m.dim();
    if c.len() != dim {
        return invalid(format!(
            "dual vector has length {}, expected {dim}",
            c.len()
        ));
    }
    if !c.iter().all(|x| x.is_finite()) {
        return invalid("dual vector has non-finite entries");
    }
    let shifted = DiagShifted { base: m, c };
    let pair = top_eigenpair_op(&shifted, DEFAULT_TOL, default_max_iter(dim), start)?;
    let hinge: f64 = c.iter().map(|x| x.max(0.0)).sum();
    Ok(DualEval {
        value: dim as f64 * pair.value.max(0.0) + hinge,
        lambda: pair.value,
        vector: pair.vector,
    })
}

/// `D·λ⁺_max(M − diag c) + 1ᵀmax(c, 0)`; an upper bound on the relaxed
/// primal for every `c`.
pub fn dual_value<O: SymOperator + ?Sized>(m: &O, c: &[f64]) -> Result<f64> {
    Ok(evaluate_dual(m, c, None)?.value)
}

/// Step sizes `η_t = η₀/√t`. `eta0 = None` selects `0.1·‖M‖_F/D`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub eta0: Option<f64>,
}

impl StepSchedule {
    pub fn resolve<O: SymOperator + ?Sized>(&self, m: &O) -> f64 {
        self.eta0
            .unwrap_or_else(|| 0.1 * m.frobenius_norm() / m.dim() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    /// Best `c` seen.
    pub c: Vec<f64>,
    /// Dual value at `c`.
    pub value: f64,
    /// Value of every iterate, in order, starting at the initial `c`.
    pub trace: Vec<f64>,
}

/// Subgradient descent on `c ↦ dual_value(M, c)` from `c = 0`.
///
/// Every iterate is itself a valid bound, so the best value seen is returned.
pub fn minimize_dual<O: SymOperator + ?Sized>(
    m: &O,
    steps: usize,
    schedule: &StepSchedule,
) -> Result<DualSolution> {
    minimize_dual_from(m, &vec![0.0; m.dim()], steps, schedule)
}

/// Same as [`minimize_dual`], starting from an arbitrary `c`.
pub fn minimize_dual_from<O: SymOperator + ?Sized>(
    m: &O,
    c0: &[f64],
    steps: usize,
    schedule: &StepSchedule,
) -> Result<DualSolution> {
    if steps == 0 {
        return invalid("minimize_dual needs at least one step");
    }
    let eta0 = schedule.resolve(m);
    let mut c = c0.to_vec();
    let mut eval = evaluate_dual(m, &c, None)?;
    let mut best = DualSolution {
        c: c.clone(),
        value: eval.value,
        trace: vec![eval.value],
    };
    if eta0 == 0.0 || eval.value == 0.0 {
        return Ok(best);
    }
    for t in 1..=steps {
        let g = eval.subgradient(&c);
        let eta = eta0 / (t as f64).sqrt();
        for (ca, ga) in c.iter_mut().zip(&g) {
            *ca -= eta * ga;
        }
        eval = evaluate_dual(m, &c, Some(&eval.vector))?;
        best.trace.push(eval.value);
        if eval.value < best.value {
            best.value = eval.value;
            best.c.clone_from(&c);
        }
    }
    // Ritz values never exceed λ_max, so a misconverged solve errs low. Re-check
    // the reported point from a cold start and keep the larger value.
    best.value = best.value.max(dual_value(m, &best.c)?);
    Ok(best)
}

/// Exact `max_{s ∈ [0,1]^m, t ∈ [−1,1]^d} tᵀ Wᵀ diag(v) s`, i.e.
/// `max_{s ∈ {0,1}^m} ‖Wᵀ diag(v) s‖₁`, by vertex enumeration in Gray-code order.
pub fn qp_vertex_oracle(net: &Network, i: usize, j: usize) -> Result<f64> {
    let m = net.hidden_dim();
    if m > QP_ORACLE_MAX_HIDDEN {
        return Err(Error::Capacity(format!(
            "vertex enumeration needs 2^{m} evaluations; limit is m <= {QP_ORACLE_MAX_HIDDEN}"
        )));
    }
    let pair = MarginPair::new(net, i, j)?;
    let d = net.input_dim();
    let scaled: Vec<Vec<f64>> = (0..m)
        .map(|a| (0..d).map(|b| net.w[(a, b)] * pair.v[a]).collect())
        .collect();
    let mut acc = vec![0.0; d];
    let mut on = vec![false; m];
    let mut best = 0.0f64;
    for step in 1u64..(1u64 << m) {
        let a = step.trailing_zeros() as usize;
        let sign = if on[a] { -1.0 } else { 1.0 };
        on[a] = !on[a];
        for (x, w) in acc.iter_mut().zip(&scaled[a]) {
            *x += sign * w;
        }
        best = best.max(acc.iter().map(|x| x.abs()).sum());
    }
    Ok(best)
}

/// Certificate entry for one unordered class pair `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCertificate {
    pub i: usize,
    pub j: usize,
    pub dual_value: f64,
    pub c: Vec<f64>,
}

/// Dual certificate for all class pairs of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualCertificate {
    pub epsilon: f64,
    pub weight_hash: String,
    pub pairs: Vec<PairCertificate>,
}

impl DualCertificate {
    pub fn get(&self, i: usize, j: usize) -> Option<&PairCertificate> {
        let (lo, hi) = (i.min(j), i.max(j));
        self.pairs.iter().find(|p| p.i == lo && p.j == hi)
    }

    /// Dense `k×k` table of dual values, symmetric, zero on the diagonal.
    pub fn table(&self, k: usize) -> Result<Vec<Vec<f64>>> {
        let mut t = vec![vec![0.0; k]; k];
        let mut seen = 0usize;
        for p in &self.pairs {
            if p.i >= k || p.j >= k || p.i == p.j {
                return Err(Error::InvalidCertificate(format!(
                    "pair ({}, {}) invalid for {k} classes",
                    p.i, p.j
                )));
            }
            t[p.i][p.j] = p.dual_value;
            t[p.j][p.i] = p.dual_value;
            seen += 1;
        }
        if seen != k * (k - 1) / 2 {
            return Err(Error::InvalidCertificate(format!(
                "certificate covers {seen} pairs, expected {}",
                k * (k - 1) / 2
            )));
        }
        Ok(t)
    }

    pub fn check_network(&self, net: &Network) -> Result<()> {
        let hash = net.weight_hash();
        if hash != self.weight_hash {
            return Err(Error::InvalidCertificate(format!(
                "certificate is bound to weights {} but network hashes to {hash}",
                self.weight_hash
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// All unordered pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn unordered_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect()
}

/// Certifies every class pair by [`minimize_dual`] from `c = 0`. Pairs are
/// independent and solved in parallel.
pub fn certify_network(
    net: &Network,
    epsilon: f64,
    steps: usize,
    schedule: &StepSchedule,
) -> Result<DualCertificate> {
    let pairs = unordered_pairs(net.num_classes())
        .into_par_iter()
        .map(|(i, j)| {
            let pm = build_pair_matrix(net, i, j)?;
            let sol = minimize_dual(&pm, steps, schedule)?;
            Ok(PairCertificate {
                i,
                j,
                dual_value: sol.value,
                c: sol.c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DualCertificate {
        epsilon,
        weight_hash: net.weight_hash(),
        pairs,
    })
}

/// Builds a certificate from given dual vectors (e.g. those learned during
/// training), evaluating each dual value exactly once.
pub fn certificate_from_duals(
    net: &Network,
    epsilon: f64,
    duals: &BTreeMap<(usize, usize), Vec<f64>>,
) -> Result<DualCertificate> {
    let pairs = unordered_pairs(net.num_classes())
        .into_par_iter()
        .map(|(i, j)| {
            let c = duals
                .get(&(i, j))
                .cloned()
                .unwrap_or_else(|| vec![0.0; net.cert_dim()]);
            let pm = build_pair_matrix(net, i, j)?;
            Ok(PairCertificate {
                i,
                j,
                dual_value: dual_value(&pm, &c)?,
                c,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DualCertificate {
        epsilon,
        weight_hash: net.weight_hash(),
        pairs,
    })
}

/// A pair entry whose stored dual value is below what its `c` actually gives.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditFailure {
    pub i: usize,
    pub j: usize,
    pub stored: f64,
    pub recomputed: f64,
}

/// Recomputes each pair's dual value from its stored `c`. Stored values may
/// be larger (looser) than the recomputed ones but never smaller.
pub fn audit_certificate(
    net: &Network,
    cert: &DualCertificate,
    rel_tol: f64,
) -> Result<Vec<AuditFailure>> {
    cert.check_network(net)?;
    cert.table(net.num_classes())?;
    let failures = cert
        .pairs
        .par_iter()
        .map(|p| {
            let pm = build_pair_matrix(net, p.i, p.j)?;
            let recomputed = dual_value(&pm, &p.c)?;
            Ok((p, recomputed))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(p, r)| p.dual_value < r - rel_tol * r.abs().max(1.0))
        .map(|(p, r)| AuditFailure {
            i: p.i,
            j: p.j,
            stored: p.dual_value,
            recomputed: r,
        })
        .collect();
    Ok(failures)
}

/// Upper bound on `f^{ij}` over `B_ε(x)` for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifiedMargin {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// `f^{ij}(x) + (ε/4)·β·dual^{ij}`.
pub fn certified_pair_margin(
    net: &Network,
    pair: &MarginPair,
    x: &[f64],
    epsilon: f64,
    cert: &DualCertificate,
) -> Result<CertifiedMargin> {
    cert.check_network(net)?;
    let entry = cert.get(pair.i, pair.j).ok_or_else(|| {
        Error::InvalidCertificate(format!("no entry for pair ({}, {})", pair.i, pair.j))
    })?;
    let beta = net.activation.derivative_bound();
    Ok(CertifiedMargin {
        i: pair.i,
        j: pair.j,
        value: net.margin(pair, x)? + 0.25 * epsilon * beta * entry.dual_value,
    })
}

/// Per-example flag: `true` when the certificate fails to rule out an attack,
/// i.e. `max_{i≠y} f_SDP^{iy}(x) ≥ 0`. Exact zero counts as a failure.
pub fn certified_flags(
    net: &Network,
    data: &LabeledDataset,
    epsilon: f64,
    cert: &DualCertificate,
) -> Result<Vec<bool>> {
    if data.is_empty() {
        return invalid("empty dataset");
    }
    cert.check_network(net)?;
    let table = cert.table(net.num_classes())?;
    let scale = 0.25 * epsilon * net.activation.derivative_bound();
    worst_case_flags(net, data, |i, y| scale * table[i][y])
}

/// Fraction of examples not certified robust at radius ε. Upper-bounds the
/// error of every attack inside `B_ε`. With ε = 0 this is the clean error,
/// counting exact score ties as errors.
pub fn certified_error(
    net: &Network,
    data: &LabeledDataset,
    epsilon: f64,
    cert: &DualCertificate,
) -> Result<f64> {
    Ok(fraction(&certified_flags(net, data, epsilon, cert)?))
}

/// Shared loop: `max_{i≠y} f^{iy}(x) + slack(i, y) ≥ 0`.
pub(crate) fn worst_case_flags(
    net: &Network,
    data: &LabeledDataset,
    slack: impl Fn(usize, usize) -> f64 + Sync,
) -> Result<Vec<bool>> {
    if data.num_classes() > net.num_classes() || data.input_dim() != net.input_dim() {
        return invalid("dataset shape does not match network");
    }
    (0..data.len())
        .into_par_iter()
        .map(|n| {
            let (x, y) = data.example(n);
            let s = net.forward(x)?;
            let worst = (0..s.len())
                .filter(|&i| i != y)
                .map(|i| s[i] - s[y] + slack(i, y))
                .fold(f64::NEG_INFINITY, f64::max);
            Ok(worst >= 0.0)
        })
        .collect()
}

pub(crate) fn fraction(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

/// Norm-based baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Spectral,
    Frobenius,
}

/// Cached `‖W‖₂` and `‖W‖_F` of one network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightNorms {
    pub spectral: f64,
    pub frobenius: f64,
}

impl WeightNorms {
    pub fn of(net: &Network) -> Result<Self> {
        let frobenius = net.w.norm();
        let spectral = spectral_norm(&net.w)?.min(frobenius);
        Ok(Self {
            spectral,
            frobenius,
        })
    }

    pub fn get(&self, which: Baseline) -> f64 {
        match which {
            Baseline::Spectral => self.spectral,
            Baseline::Frobenius => self.frobenius,
        }
    }
}

/// Largest singular value, via the top eigenvalue of the smaller Gram matrix.
pub fn spectral_norm(w: &DMatrix<f64>) -> Result<f64> {
    let gram = if w.nrows() <= w.ncols() {
        w * w.transpose()
    } else {
        w.transpose() * w
    };
    let n = gram.nrows();
    let sym = SymMatrix::from_upper(n, |a, b| 0.5 * (gram[(a, b)] + gram[(b, a)]));
    let top = top_eigenpair_op(&sym, 1e-10, default_max_iter(n), None)?;
    Ok(top.value.max(0.0).sqrt())
}

fn baseline_slack(net: &Network, norm_w: f64, epsilon: f64, i: usize, j: usize) -> f64 {
    let v = net.v.row(i) - net.v.row(j);
    epsilon * (net.input_dim() as f64).sqrt() * norm_w * v.norm()
}

/// `f^{ij}(x) + ε√d‖W‖₂‖V_i − V_j‖₂`.
pub fn spectral_bound(net: &Network, pair: &MarginPair, x: &[f64], epsilon: f64) -> Result<f64> {
    let norm_w = WeightNorms::of(net)?.spectral;
    Ok(net.margin(pair, x)? + baseline_slack(net, norm_w, epsilon, pair.i, pair.j))
}

/// `f^{ij}(x) + ε√d‖W‖_F‖V_i − V_j‖₂`.
pub fn frobenius_bound(net: &Network, pair: &MarginPair, x: &[f64], epsilon: f64) -> Result<f64> {
    let norm_w = net.w.norm();
    Ok(net.margin(pair, x)? + baseline_slack(net, norm_w, epsilon, pair.i, pair.j))
}

/// Fraction of examples a norm baseline fails to certify at radius ε.
pub fn baseline_error(
    net: &Network,
    data: &LabeledDataset,
    epsilon: f64,
    norms: &WeightNorms,
    which: Baseline,
) -> Result<f64> {
    if data.is_empty() {
        return invalid("empty dataset");
    }
    let norm_w = norms.get(which);
    let k = net.num_classes();
    let mut slack = vec![vec![0.0; k]; k];
    for (i, row) in slack.iter_mut().enumerate() {
        for (j, s) in row.iter_mut().enumerate() {
            if i != j {
                *s = baseline_slack(net, norm_w, epsilon, i, j);
            }
        }
    }
    Ok(fraction(&worst_case_flags(net, data, |i, y| slack[i][y])?))
}

/// Hölder bound for a linear binary classifier `f(x) = (w₁ − w₂)ᵀx`:
/// `f(x) + ε‖w₁ − w₂‖₁`, attained by [`linear_attack_witness`].
pub fn gradient_ball_bound_linear(w1: &[f64], w2: &[f64], x: &[f64], epsilon: f64) -> Result<f64> {
    if w1.len() != w2.len() || w1.len() != x.len() {
        return invalid("linear classifier dimensions disagree");
    }
    let f: f64 = w1
        .iter()
        .zip(w2)
        .zip(x)
        .map(|((a, b), xi)| (a - b) * xi)
        .sum();
    let l1: f64 = w1.iter().zip(w2).map(|(a, b)| (a - b).abs()).sum();
    Ok(f + epsilon * l1)
}

/// `x_b + ε·sign(w₁_b − w₂_b)`, with `sign(0) = 0`.
pub fn linear_attack_witness(w1: &[f64], w2: &[f64], x: &[f64], epsilon: f64) -> Vec<f64> {
    x.iter()
        .zip(w1.iter().zip(w2))
        .map(|(xi, (a, b))| xi + epsilon * sign(a - b))
        .collect()
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
