use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use sdpcert::attacks::{attack_dataset, Attack, AttackLoss, PgdConfig};
use sdpcert::bounds::{
    audit_certificate, baseline_error, certified_error, certify_network, Baseline, DualCertificate,
    StepSchedule, WeightNorms, DEFAULT_DUAL_STEPS,
};
use sdpcert::data::{load_idx, synth_blobs, LabeledDataset};
use sdpcert::model::{Activation, Network};
use sdpcert::train::{
    log_csv, train_from, ClassLoss, LambdaScheme, LrSchedule, Objective, TrainConfig, TrainState,
};
use serde::Serialize;

use crate::config::{Config, UsageError};

/// Inputs are inconsistent or a bound was violated (exit code 2).
#[derive(Debug)]
pub struct IntegrityError(pub String);

impl fmt::Display for IntegrityError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for IntegrityError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn integrity<T>(msg: impl Into<String>) -> Result<T> {
    Err(IntegrityError(msg.into()).into())
}

/// Dataset from `images`/`labels` (IDX) or `synth_*` keys, then `skip`/`limit`.
fn dataset(cfg: &Config) -> Result<LabeledDataset> {
    let data = if cfg.has("images") || cfg.has("labels") {
        let images = cfg.existing_path("images")?;
        let labels = cfg.existing_path("labels")?;
        load_idx(&images, &labels)
            .with_context(|| format!("loading IDX data from {}", images.display()))?
    } else if cfg.has("synth_classes") {
        synth_blobs(
            cfg.require("synth_classes")?,
            cfg.require("synth_dim")?,
            cfg.require("synth_count")?,
            cfg.or("synth_separation", 1.0)?,
            cfg.or("synth_seed", 0)?,
        )?
    } else {
        return usage("no dataset: set `images` and `labels`, or the `synth_*` keys");
    };
    let skip: usize = cfg.or("skip", 0)?;
    let limit: Option<usize> = cfg.get("limit")?;
    if skip >= data.len() {
        return usage(format!(
            "skip = {skip} leaves no examples out of {}",
            data.len()
        ));
    }
    let end = limit.map_or(data.len(), |l| (skip + l).min(data.len()));
    if end == skip {
        return usage("limit = 0 selects no examples");
    }
    Ok(data.subset(&(skip..end).collect::<Vec<_>>()))
}

fn epsilon_grid(cfg: &Config, default: &[f64]) -> Result<Vec<f64>> {
    let grid = cfg
        .list::<f64>("epsilons")?
        .unwrap_or_else(|| default.to_vec());
    if grid.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return usage("epsilons must be finite and non-negative");
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return usage("epsilons must be sorted strictly ascending");
    }
    Ok(grid)
}

fn clean_error(net: &Network, data: &LabeledDataset) -> Result<f64> {
    let mut wrong = 0;
    for n in 0..data.len() {
        let (x, y) = data.example(n);
        if net.predict(x)? != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn train_config(cfg: &Config) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let lambda: f64 = cfg.or("lambda", 0.0)?;
    let scheme = match cfg.or("lambda_scheme", "unweighted".to_string())?.as_str() {
        "unweighted" => LambdaScheme::Unweighted { lambda },
        "weighted" => LambdaScheme::Weighted {
            lambda,
            refresh_epochs: cfg.or("refresh_epochs", 20)?,
        },
        other => return usage(format!("unknown lambda_scheme {other:?}")),
    };
    let adversarial = PgdConfig {
        epsilon: cfg.or("adv_epsilon", d.adversarial.epsilon)?,
        step_size: cfg.or("adv_step", d.adversarial.step_size)?,
        iterations: cfg.or("adv_iterations", d.adversarial.iterations)?,
        restarts: cfg.or("adv_restarts", d.adversarial.restarts)?,
        loss: AttackLoss::CrossEntropy,
    };
    let config = TrainConfig {
        hidden: cfg.or("hidden", d.hidden)?,
        activation: cfg.or("activation", Activation::Relu)?,
        objective: cfg.require::<Objective>("objective")?,
        loss: cfg.or("loss", ClassLoss::CrossEntropy)?,
        scheme,
        lr: LrSchedule {
            initial: cfg.or("lr", d.lr.initial)?,
            decay: cfg.or("lr_decay", d.lr.decay)?,
            interval: cfg.or("lr_interval", d.lr.interval)?,
        },
        epochs: cfg.require("epochs")?,
        batch_size: cfg.or("batch_size", d.batch_size)?,
        seed: cfg.or("seed", d.seed)?,
        eval_epsilon: cfg.or("eval_epsilon", d.eval_epsilon)?,
        adversarial,
    };
    config
        .validate()
        .map_err(|e| UsageError(format!("invalid training config: {e}")))?;
    Ok(config)
}

pub fn train(cfg: &Config) -> Result<()> {
    let config = train_config(cfg)?;
    let data = dataset(cfg)?;
    let resume = match cfg.path("resume")? {
        Some(p) => Some(TrainState::load(&p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let every: usize = cfg.or("checkpoint_every", 0)?;
    let out = cfg.require_path("out_dir")?;
    cfg.finish()?;

    let state = match resume {
        Some(s) => s,
        None => TrainState::new(&config, data.input_dim(), data.num_classes())?,
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    if every > 0 {
        fs::create_dir_all(out.join("checkpoints"))?;
    }
    let outcome = train_from(&config, &data, state, |state, row| {
        eprintln!(
            "epoch {:>4}  loss {:.5}  reg {:.5}  clean {:.4}  cert@{} {:.4}",
            row.epoch,
            row.loss,
            row.regularizer,
            row.clean_error,
            config.eval_epsilon,
            row.cert_error
        );
        if every > 0 && row.epoch % every == 0 {
            state.save(
                out.join("checkpoints")
                    .join(format!("epoch_{:04}.bin", row.epoch)),
            )?;
        }
        Ok(())
    })?;

    outcome.state.net.save(out.join("weights.bin"))?;
    outcome.state.save(out.join("checkpoint.bin"))?;
    write(&out.join("train_log.csv"), log_csv(&outcome.log))?;
    if let Some(cert) = &outcome.certificate {
        cert.save(out.join("certificate.json"))?;
    }
    println!("weight_hash {}", outcome.state.net.weight_hash());
    if let Some(last) = outcome.log.last() {
        println!(
            "epochs {}  clean_error {}  cert_error@{} {}",
            last.epoch, last.clean_error, config.eval_epsilon, last.cert_error
        );
    }
    Ok(())
}

fn load_net(cfg: &Config) -> Result<Network> {
    let p = cfg.existing_path("weights")?;
    Network::load(&p).with_context(|| format!("loading weights {}", p.display()))
}

/// Loads a certificate and checks it belongs to `net` and that every stored
/// dual value is reproduced by its `c`.
fn checked_certificate(net: &Network, path: &Path, rel_tol: f64) -> Result<DualCertificate> {
    let cert = DualCertificate::load(path)
        .with_context(|| format!("loading certificate {}", path.display()))?;
    if let Err(e) = cert.check_network(net) {
        return integrity(format!("{}: {e}", path.display()));
    }
    let failures = audit_certificate(net, &cert, rel_tol)?;
    if let Some(f) = failures.first() {
        return integrity(format!(
            "{}: pair ({}, {}) stores dual value {} but its c gives {} ({} pair(s) fail)",
            path.display(),
            f.i,
            f.j,
            f.stored,
            f.recomputed,
            failures.len()
        ));
    }
    Ok(cert)
}

pub fn certify(cfg: &Config) -> Result<()> {
    let net = load_net(cfg)?;
    let data = dataset(cfg)?;
    let grid = epsilon_grid(cfg, &[0.0, 0.1])?;
    let steps: usize = cfg.or("dual_steps", DEFAULT_DUAL_STEPS)?;
    let schedule = StepSchedule {
        eta0: cfg.get("eta0")?,
    };
    let given = if cfg.has("certificate") {
        Some(cfg.existing_path("certificate")?)
    } else {
        None
    };
    let rel_tol: f64 = cfg.or("audit_tolerance", 1e-6)?;
    let out = cfg.require_path("out_dir")?;
    cfg.finish()?;

    let cert = match given {
        Some(p) => checked_certificate(&net, &p, rel_tol)?,
        None => certify_network(&net, *grid.last().unwrap(), steps, &schedule)?,
    };
    let norms = WeightNorms::of(&net)?;
    let clean = clean_error(&net, &data)?;
    let mut csv = String::from("epsilon,clean_error,sdp_error,spectral_error,frobenius_error\n");
    for &eps in &grid {
        let sdp = certified_error(&net, &data, eps, &cert)?;
        let spectral = baseline_error(&net, &data, eps, &norms, Baseline::Spectral)?;
        let frobenius = baseline_error(&net, &data, eps, &norms, Baseline::Frobenius)?;
        csv.push_str(&format!("{eps},{clean},{sdp},{spectral},{frobenius}\n"));
    }
    fs::create_dir_all(&out)?;
    cert.save(out.join("certificate.json"))?;
    write(&out.join("bounds.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub const SUMMARY_HEADER: &str = "weight_hash,data_hash,attack,epsilon,clean_error,error";

pub fn attack(cfg: &Config) -> Result<()> {
    let net = load_net(cfg)?;
    let data = dataset(cfg)?;
    let grid = epsilon_grid(cfg, &[0.1])?;
    let names = cfg
        .list::<String>("attacks")?
        .unwrap_or_else(|| vec!["pgd".to_string()]);
    let loss: AttackLoss = cfg.or("loss", AttackLoss::CrossEntropy)?;
    let standard = PgdConfig::standard(0.0);
    let step: f64 = cfg.or("pgd_step", standard.step_size)?;
    let iterations: usize = cfg.or("pgd_iterations", standard.iterations)?;
    let restarts: usize = cfg.or("pgd_restarts", standard.restarts)?;
    let seed: u64 = cfg.or("seed", 0)?;
    let out = cfg.require_path("out_dir")?;
    cfg.finish()?;

    let mut attacks = Vec::new();
    for name in &names {
        for &epsilon in &grid {
            attacks.push(match name.as_str() {
                "fgsm" => Attack::Fgsm { epsilon, loss },
                "pgd" => {
                    let c = PgdConfig {
                        epsilon,
                        step_size: step,
                        iterations,
                        restarts,
                        loss,
                    };
                    c.validate()
                        .map_err(|e| UsageError(format!("invalid PGD settings: {e}")))?;
                    Attack::Pgd(c)
                }
                other => return usage(format!("unknown attack {other:?} (expected fgsm or pgd)")),
            });
        }
    }

    let (wh, dh) = (net.weight_hash(), data.content_hash());
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut files = Vec::new();
    let mut json_rows = Vec::new();
    for a in &attacks {
        let report = attack_dataset(&net, &data, a, seed)?;
        json_rows.push(SummaryJson {
            attack: *a,
            clean_error: report.clean_error,
            error: report.error,
            examples: report.examples.len(),
        });
        summary.push_str(&format!(
            "{wh},{dh},{},{},{},{}\n",
            a.name(),
            a.epsilon(),
            report.clean_error,
            report.error
        ));
        files.push((
            format!("attack_{}_eps{}.csv", a.name(), a.epsilon()),
            report.to_csv(),
        ));
    }
    fs::create_dir_all(&out)?;
    for (name, body) in files {
        write(&out.join(name), body)?;
    }
    write(&out.join("attack_summary.csv"), &summary)?;
    let json = serde_json::json!({
        "weight_hash": wh,
        "data_hash": dh,
        "seed": seed,
        "results": json_rows,
    });
    write(
        &out.join("attack_summary.json"),
        serde_json::to_string_pretty(&json)? + "\n",
    )?;
    print!("{summary}");
    Ok(())
}

#[derive(Serialize)]
struct SummaryJson {
    attack: Attack,
    clean_error: f64,
    error: f64,
    examples: usize,
}

struct SummaryRow {
    weight_hash: String,
    data_hash: String,
    epsilon: f64,
    error: f64,
}

fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return usage(format!(
            "{}: not an attack summary (bad header)",
            path.display()
        ));
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let bad = || UsageError(format!("{}:{}: malformed row", path.display(), idx + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad().into());
        }
        rows.push(SummaryRow {
            weight_hash: f[0].to_string(),
            data_hash: f[1].to_string(),
            epsilon: f[3].parse().map_err(|_| bad())?,
            error: f[5].parse().map_err(|_| bad())?,
        });
    }
    if rows.is_empty() {
        return usage(format!("{}: no attack rows", path.display()));
    }
    Ok(rows)
}

pub fn report(cfg: &Config) -> Result<()> {
    let net = load_net(cfg)?;
    let data = dataset(cfg)?;
    let cert_path = cfg.existing_path("certificate")?;
    let summary_path = cfg.existing_path("attack_summary")?;
    let rel_tol: f64 = cfg.or("audit_tolerance", 1e-6)?;
    let out = cfg.path("out")?;
    cfg.finish()?;

    let rows = read_summary(&summary_path)?;
    let (wh, dh) = (net.weight_hash(), data.content_hash());
    if let Some(r) = rows.iter().find(|r| r.weight_hash != wh) {
        return integrity(format!(
            "attack summary was produced for weights {}, not {wh}",
            r.weight_hash
        ));
    }
    if let Some(r) = rows.iter().find(|r| r.data_hash != dh) {
        return integrity(format!(
            "attack summary was produced on data {}, not {dh}",
            r.data_hash
        ));
    }
    let cert = checked_certificate(&net, &cert_path, rel_tol)?;

    // Strongest attack per radius.
    let mut lower: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for r in &rows {
        let e = lower
            .entry(r.epsilon.to_bits())
            .or_insert((r.epsilon, r.error));
        e.1 = e.1.max(r.error);
    }
    let clean = clean_error(&net, &data)?;
    let mut csv = String::from("epsilon,clean_error,attack_error,certified_error,sandwich\n");
    let mut violations = Vec::new();
    let mut table: Vec<(f64, f64, f64)> = Vec::new();
    for &(eps, attack_err) in lower.values() {
        let upper = certified_error(&net, &data, eps, &cert)?;
        table.push((eps, attack_err, upper));
    }
    table.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (eps, attack_err, upper) in table {
        let ok = attack_err <= upper;
        if !ok {
            violations.push(eps);
        }
        csv.push_str(&format!(
            "{eps},{clean},{attack_err},{upper},{}\n",
            if ok { "ok" } else { "VIOLATED" }
        ));
    }
    if let Some(p) = out {
        write(&p, &csv)?;
    }
    print!("{csv}");
    if !violations.is_empty() {
        return integrity(format!(
            "attack error exceeds certified error at epsilon {violations:?}"
        ));
    }
    Ok(())
}
