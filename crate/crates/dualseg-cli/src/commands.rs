//! Command implementations. Every command writes a manifest with the
//! effective config into its output directory; manifests carry no
//! timestamps, so reruns with identical seeds produce identical bytes.

use crate::config::{load_config, seeded_train_config, ExperimentConfig};
use anyhow::{bail, Context, Result};
use dualseg::container;
use dualseg::losses::{gradient_check_all, LossComponent};
use dualseg::metrics::{self, MethodResult};
use dualseg::phantom::make_dataset;
use dualseg::pipeline::{locate, predict_volume, Locator};
use dualseg::trainer::{self, TrainConfig};
use dualseg::DualsegError;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

pub fn categorize(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<DualsegError>() {
            return match e {
                DualsegError::Config(_) | DualsegError::Serde(_) => "config",
                DualsegError::Io(_) => "io",
                DualsegError::InvalidInput(_) | DualsegError::ShapeMismatch(_) => "data",
                DualsegError::Checkpoint(_) => "checkpoint",
                DualsegError::NonFinite(_) => "diverged",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "config";
        }
    }
    let msg = format!("{err:#}");
    if msg.contains("config") || msg.contains("schema") || msg.contains("must be") {
        "config"
    } else {
        "internal"
    }
}

pub fn exit_code(category: &str) -> ExitCode {
    match category {
        "config" => ExitCode::from(2),
        "io" => ExitCode::from(3),
        "data" => ExitCode::from(4),
        "checkpoint" => ExitCode::from(5),
        _ => ExitCode::from(1),
    }
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

fn hash_dir(dir: &Path) -> Result<u64> {
    let mut entries: Vec<_> = walk_files(dir)?;
    entries.sort();
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in entries {
        let rel = p.strip_prefix(dir).unwrap_or(&p);
        h = fnv1a(rel.to_string_lossy().as_bytes(), h);
        h = fnv1a(&fs::read(&p)?, h);
    }
    Ok(h)
}

fn walk_files(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().map(|n| n != "manifest.json").unwrap_or(true) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, extra: serde_json::Value) -> Result<()> {
    let manifest = serde_json::json!({
        "tool": "dualseg",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg,
        "extra": extra,
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn ensure_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() && fs::read_dir(out).map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            bail!("output directory {} is not empty (use --force to overwrite)", out.display());
        }
        fs::remove_dir_all(out)?;
    }
    fs::create_dir_all(out)?;
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn gen_data(config: Option<&Path>, out: &Path, force: bool) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    ensure_out_dir(out, force)?;
    let split = make_dataset(
        &cfg.phantom,
        cfg.data.labeled,
        cfg.data.unlabeled,
        cfg.data.validation,
        cfg.data.test,
        cfg.data.seed,
    )?;
    container::write_dataset(out, &split)?;
    let hash = hash_dir(out)?;
    write_manifest(
        out,
        "gen-data",
        &cfg,
        serde_json::json!({
            "counts": {
                "labeled": cfg.data.labeled,
                "unlabeled": cfg.data.unlabeled,
                "validation": cfg.data.validation,
                "test": cfg.data.test,
            },
            "data_hash": format!("{hash:016x}"),
        }),
    )?;
    println!(
        "wrote {} samples to {} (hash {hash:016x})",
        cfg.data.labeled + cfg.data.unlabeled + cfg.data.validation + cfg.data.test,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    resume: bool,
    steps: Option<u64>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let dataset = container::read_dataset(data)
        .with_context(|| format!("loading dataset from {}", data.display()))?;

    if resume {
        let bundle_dir = out.join("checkpoint");
        let (mut state, tcfg) = trainer::load_bundle(&bundle_dir)?;
        let target = steps.unwrap_or(tcfg.steps.max(state.step));
        println!("resuming at step {} toward {target}", state.step);
        while state.step < target {
            let batch = trainer::assemble_batch(&mut state, &dataset, &tcfg)?;
            let r = trainer::training_step(&mut state, &batch, &tcfg)?;
            if state.step % 100 == 0 {
                println!("step {}: total1 {:.4} total2 {:.4}", state.step, r.net1.total, r.net2.total);
            }
        }
        trainer::save_bundle(&mut state, &tcfg, &bundle_dir)?;
        println!("resumed run now at step {}", state.step);
        return Ok(ExitCode::SUCCESS);
    }

    fs::create_dir_all(out)?;
    let run_seed = seed.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(1));
    let mut tcfg = seeded_train_config(&cfg, run_seed);
    cfg.apply_ablation(&mut tcfg);
    let outcome = trainer::train(&tcfg, &dataset, Some(out))?;
    write_manifest(
        out,
        "train",
        &cfg,
        serde_json::json!({
            "run_seed": run_seed,
            "final_step": outcome.state.step,
            "best_val_dsc": outcome.best_val_dsc,
            "best_step": outcome.best_step,
        }),
    )?;
    println!(
        "trained {} steps; best validation DSC {:.4} at step {}",
        outcome.state.step, outcome.best_val_dsc, outcome.best_step
    );
    Ok(ExitCode::SUCCESS)
}

fn load_networks(
    checkpoint: &Path,
) -> Result<(dualseg::backbone::CompactUNet, dualseg::backbone::CompactUNet, TrainConfig)> {
    let bundle = if checkpoint.join("manifest.json").exists() {
        checkpoint.to_path_buf()
    } else {
        checkpoint.join("checkpoint")
    };
    let (state, tcfg) = trainer::load_bundle(&bundle)?;
    // prefer the best-validation snapshot when it exists
    match state.best_networks() {
        Ok((n1, n2)) => Ok((n1, n2, tcfg)),
        Err(_) => Ok((state.net1, state.net2, tcfg)),
    }
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    compare: Option<&Path>,
    use_truth: bool,
) -> Result<ExitCode> {
    let dataset = container::read_dataset(data)?;
    if dataset.test.is_empty() {
        bail!("dataset at {} has no test split", data.display());
    }
    fs::create_dir_all(out)?;

    let rows = if use_truth {
        // pipeline smoke test: score the annotations against themselves
        dataset
            .test
            .iter()
            .map(|s| {
                let d = metrics::dice(&s.mask, &s.mask);
                let h = metrics::hd95(&s.mask, &s.mask);
                (d, h.value)
            })
            .collect::<Vec<_>>()
    } else {
        let (n1, n2, tcfg) = load_networks(checkpoint)?;
        trainer::evaluate_split(&n1, &n2, &dataset.test, &tcfg.locator, 20_077)?
    };

    let mut csv = String::from("# dualseg-eval-v1: volume,dsc,hd95\nvolume,dsc,hd95\n");
    for (i, (d, h)) in rows.iter().enumerate() {
        csv.push_str(&format!("{i},{d:.6},{h:.6}\n"));
    }
    let dscs: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let hds: Vec<f64> = rows.iter().map(|r| r.1).collect();
    csv.push_str(&format!(
        "summary,{:.6}±{:.6},{:.6}±{:.6}\n",
        metrics::mean(&dscs),
        metrics::population_std(&dscs),
        metrics::mean(&hds),
        metrics::population_std(&hds),
    ));
    println!(
        "test DSC {:.4} ± {:.4}, 95HD {:.2} ± {:.2} over {} volumes",
        metrics::mean(&dscs),
        metrics::population_std(&dscs),
        metrics::mean(&hds),
        metrics::population_std(&hds),
        rows.len()
    );

    if let Some(other) = compare {
        let (m1, m2, tcfg) = load_networks(other)?;
        let other_rows = trainer::evaluate_split(&m1, &m2, &dataset.test, &tcfg.locator, 20_077)?;
        let other_dsc: Vec<f64> = other_rows.iter().map(|r| r.0).collect();
        let t = metrics::paired_t_test(&dscs, &other_dsc)?;
        csv.push_str(&format!(
            "t_test,t={:.6},p_one_tailed={:.6}{}\n",
            t.t,
            t.p_one_tailed,
            if t.zero_variance { ",zero_variance" } else { "" }
        ));
        println!(
            "paired one-tailed t-test vs {}: t = {:.3}, p = {:.4}{}",
            other.display(),
            t.t,
            t.p_one_tailed,
            if t.zero_variance { " (zero variance)" } else { "" }
        );
    }
    fs::write(out.join("eval.csv"), csv)?;
    Ok(ExitCode::SUCCESS)
}

pub fn infer(checkpoint: &Path, volume_dir: &Path, out: &Path, render: bool) -> Result<ExitCode> {
    let (vol, mask, meta) = container::read_sample(volume_dir)?;
    let (n1, n2, tcfg) = load_networks(checkpoint)?;
    let mut rng = dualseg::rng::stream(4242, "infer-locator");
    let center = match meta.center {
        Some(c) => locate(&tcfg.locator, &vol, Some(c), &mut rng)?,
        None => locate(&Locator::Centroid, &vol, None, &mut rng)?,
    };
    let (soft, pred) = predict_volume(&n1, &n2, &vol, center)?;

    fs::create_dir_all(out)?;
    let prob_vol = dualseg::core::Volume::new(soft.grid().clone(), vol.spacing())
        .map_err(anyhow::Error::from)?;
    container::write_sample(&out.join("probability"), &prob_vol, Some(&pred), Some(center), None)?;
    if let Some(truth) = &mask {
        let d = metrics::dice(&pred, truth);
        let h = metrics::hd95(&pred, truth);
        println!("DSC vs truth: {d:.4}, 95HD {:.2}", h.value);
    }
    if render {
        render_midslices(&vol, &pred, out)?;
    }
    println!("prediction written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

/// Mid-slice renders: grayscale volume with the predicted mask in red.
fn render_midslices(
    vol: &dualseg::core::Volume,
    mask: &dualseg::core::SegmentationMask,
    out: &Path,
) -> Result<()> {
    let (sx, sy, sz) = vol.shape();
    for (axis, name) in [(0, "x"), (1, "y"), (2, "z")] {
        let (w, h) = match axis {
            0 => (sy, sz),
            1 => (sx, sz),
            _ => (sx, sy),
        };
        let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
        for j in 0..h {
            for i in 0..w {
                let (x, y, z) = match axis {
                    0 => (sx / 2, i, j),
                    1 => (i, sy / 2, j),
                    _ => (i, j, sz / 2),
                };
                let v = (vol.grid().get(x, y, z) * 255.0) as u8;
                if mask.grid().get(x, y, z) == 1 {
                    ppm.extend_from_slice(&[255, v / 2, v / 2]);
                } else {
                    ppm.extend_from_slice(&[v, v, v]);
                }
            }
        }
        fs::write(out.join(format!("midslice_{name}.ppm")), ppm)?;
    }
    Ok(())
}

/// The loss-component ladder, each row trained with identical data seeds.
const ABLATION_LADDER: &[(&str, bool, bool, bool, bool)] = &[
    // name, intra, inter, lcont, ncont
    ("sup", false, false, false, false),
    ("sup+intra", true, false, false, false),
    ("sup+inter", false, true, false, false),
    ("sup+intra+inter", true, true, false, false),
    ("sup+intra+inter+lcont", true, true, true, false),
    ("sup+intra+inter+ncont", true, true, false, true),
    ("sup+intra+inter+lcont+ncont", true, true, true, true),
];

pub fn ablate(config: Option<&Path>, data: &Path, out: &Path, steps: Option<u64>) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let dataset = container::read_dataset(data)?;
    fs::create_dir_all(out)?;

    let mut results: Vec<MethodResult> = Vec::new();
    for (name, intra, inter, lcont, ncont) in ABLATION_LADDER {
        let mut dscs = Vec::new();
        let mut hds = Vec::new();
        for &seed in &cfg.seeds {
            let mut tcfg = seeded_train_config(&cfg, seed);
            tcfg.loss.enable_intra = *intra;
            tcfg.loss.enable_inter = *inter;
            if !intra && !inter {
                tcfg.loss.alpha = 0.0;
            }
            if !lcont {
                tcfg.loss.beta = 0.0;
            }
            if !ncont {
                tcfg.loss.gamma = 0.0;
            }
            let outcome = trainer::train(&tcfg, &dataset, None)?;
            let (n1, n2) = outcome
                .best_networks()
                .unwrap_or_else(|_| panic!("no validation snapshot for {name}"));
            let rows = trainer::evaluate_split(&n1, &n2, &dataset.test, &tcfg.locator, 20_077)?;
            dscs.extend(rows.iter().map(|r| r.0));
            hds.extend(rows.iter().map(|r| r.1));
            println!(
                "{name} seed {seed}: test DSC {:.4}",
                rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64
            );
        }
        results.push(MethodResult {
            method: name.to_string(),
            labeled: dataset.labeled.len(),
            unlabeled: dataset.unlabeled.len(),
            dsc: dscs,
            hd95: hds,
        });
    }
    let table = metrics::summarize(&results);
    fs::write(out.join("ablation.csv"), &table)?;
    write_manifest(out, "ablate", &cfg, serde_json::json!({"rows": ABLATION_LADDER.len()}))?;
    println!("{table}");
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(side: usize, eps: f64, seed: u64, tolerance: f64) -> Result<ExitCode> {
    let reports = gradient_check_all(side, eps, seed);
    let mut ok = true;
    println!("component  max_rel_err    worst_coord  analytic        numeric");
    for r in &reports {
        let pass = r.max_rel_err <= tolerance;
        ok &= pass;
        println!(
            "{:<10} {:<14.3e} {:<12} {:<15.6e} {:<15.6e} {}",
            r.component.name(),
            r.max_rel_err,
            r.worst_index,
            r.analytic_at_worst,
            r.numeric_at_worst,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let _ = LossComponent::ALL;
    if ok {
        println!("all {} components within {tolerance:.0e}", reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        bail!("gradient check failed (tolerance {tolerance:.0e})");
    }
}
