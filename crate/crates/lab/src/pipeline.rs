//! Pipeline stages over a run directory, the full two-phase run, the
//! cross-run report, and grid sweeps.
//!
//! Stage seeds derive from the master seed by name, so stages are
//! independently reproducible: changing `lnl.*` never perturbs data
//! generation or pre-training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use c2d_core::contrast::{pretrain_ssl, pretrain_supervised_proxy};
use c2d_core::data::{
    cyclic_flip_map, gen_gaussian_blobs, gen_train_test, inject_asymmetric_noise,
    inject_symmetric_noise,
};
use c2d_core::divide::{divide_losses, divide_to_csv};
use c2d_core::metrics::{self, loss_histogram};
use c2d_core::mixtrain::{dividemix_train, elr_train, oracle_split_train, LnlMethod};
use c2d_core::model::Model;
use c2d_core::runlog::{LogRow, RunLog, Stage};
use c2d_core::seed::derive_seed;
use c2d_core::warmup::{losses_from_csv, losses_to_csv, run_warmup, warmup_only, InitScheme};

use crate::config::{ExperimentConfig, NoiseKind};
use crate::error::{LabError, Result};
use crate::io::{write_atomic, RunDir};

/// Generate the noisy train split and the clean test split.
pub fn stage_gen_data(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    cfg.validate()?;
    let seed = derive_seed(cfg.seed, "data");
    let (clean_train, test) = gen_train_test(&cfg.train_spec(), cfg.data_per_class_test, seed)?;
    let noise_seed = derive_seed(cfg.seed, "noise");
    let train = match cfg.noise_kind {
        NoiseKind::Symmetric => inject_symmetric_noise(&clean_train, cfg.noise_rate, noise_seed)?,
        NoiseKind::Asymmetric => inject_asymmetric_noise(
            &clean_train,
            cfg.noise_rate,
            &cyclic_flip_map(cfg.data_classes),
            noise_seed,
        )?,
    };
    dir.save_dataset(&dir.train_dataset(), &train)?;
    dir.save_dataset(&dir.test_dataset(), &test)?;
    dir.save_runlog(&RunLog::new())?;
    write_atomic(&dir.config(), cfg.to_text().as_bytes())?;
    Ok(())
}

/// Pre-train the encoder per the configured initialization scheme and write
/// `pretrain.ckpt`. With `warmup.init = random` this stage is a no-op (no
/// checkpoint, no log rows).
pub fn stage_pretrain(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    if cfg.warmup_init == InitScheme::Random {
        return Ok(());
    }
    let train = dir.load_dataset(&dir.train_dataset())?;
    let mut model = Model::init(&cfg.model_config(), derive_seed(cfg.seed, "model-init"))?;
    let rows = match cfg.warmup_init {
        InitScheme::Ssl => {
            // labels are never passed in: the signature takes features only
            let features = train.features_tensor();
            pretrain_ssl(
                &features,
                &mut model,
                &cfg.ssl_config(),
                &cfg.aug_spec(),
                derive_seed(cfg.seed, "pretrain"),
            )?
        }
        InitScheme::Proxy => {
            // a related-but-shifted clean dataset: same dims, different
            // blob layout via a different generator seed
            let proxy = gen_gaussian_blobs(&cfg.train_spec(), derive_seed(cfg.seed, "proxy-data"))?;
            pretrain_supervised_proxy(
                &proxy,
                &mut model,
                &cfg.proxy_config(),
                derive_seed(cfg.seed, "pretrain"),
            )?
        }
        InitScheme::Random => unreachable!("handled above"),
    };
    dir.save_model(&dir.pretrain_ckpt(), &model)?;
    let mut log = dir.load_runlog()?;
    log.replace_stage(Stage::Pretrain, rows)?;
    dir.save_runlog(&log)?;
    write_atomic(&dir.config(), cfg.to_text().as_bytes())?;
    Ok(())
}

fn load_init_model(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Model> {
    if cfg.warmup_init == InitScheme::Random {
        Ok(Model::init(
            &cfg.model_config(),
            derive_seed(cfg.seed, "model-init"),
        )?)
    } else {
        dir.load_model(&dir.pretrain_ckpt())
    }
}

/// Instrumented warm-up from the configured initialization; writes the
/// warm-up checkpoint, the per-sample loss dump, and the loss histogram.
pub fn stage_warmup(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let train = dir.load_dataset(&dir.train_dataset())?;
    let test = dir.load_dataset(&dir.test_dataset())?;
    let mut model = load_init_model(cfg, dir)?;
    let out = run_warmup(
        &train,
        &test,
        &mut model,
        &cfg.warmup_config(),
        derive_seed(cfg.seed, "warmup"),
    )?;
    dir.save_model(&dir.warmup_ckpt(), &model)?;
    let final_losses = out.trace.final_losses();
    write_atomic(
        &dir.losses(),
        losses_to_csv(&train, final_losses)?.as_bytes(),
    )?;
    let hist = loss_histogram(final_losses, train.noise_flags(), cfg.warmup_hist_bins)?;
    write_atomic(&dir.histogram(), hist.to_csv().as_bytes())?;
    let mut log = dir.load_runlog()?;
    log.replace_stage(Stage::Warmup, out.rows)?;
    dir.save_runlog(&log)?;
    write_atomic(&dir.config(), cfg.to_text().as_bytes())?;
    Ok(())
}

/// Fit the loss mixture and write the labeled/unlabeled assignment.
pub fn stage_divide(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    divide_file(&dir.losses(), &dir.divide(), cfg.resolved_lnl_tau())
}

/// The `divide` CLI verb: losses file in, assignment file out.
pub fn divide_file(losses_path: &Path, out_path: &Path, tau: f64) -> Result<()> {
    let text = fs::read_to_string(losses_path)?;
    let losses = losses_from_csv(&text)?;
    let (_, result) = divide_losses(&losses, tau)?;
    write_atomic(out_path, divide_to_csv(&result).as_bytes())?;
    Ok(())
}

/// Semi-supervised refinement per the configured method. DivideMix builds
/// its second network from the same initialization with a fresh classifier
/// and its own warm-up, then the two networks co-divide.
pub fn stage_train(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    let train = dir.load_dataset(&dir.train_dataset())?;
    let test = dir.load_dataset(&dir.test_dataset())?;
    let model_a = dir.load_model(&dir.warmup_ckpt())?;
    let lnl = cfg.lnl_config();
    let seed = derive_seed(cfg.seed, "train");

    let rows = match cfg.lnl_method {
        LnlMethod::DivideMix => {
            let mut model_b = load_init_model(cfg, dir)?;
            model_b.reinit_classifier(derive_seed(cfg.seed, "net-b-classifier"));
            warmup_only(
                &train,
                &mut model_b,
                &cfg.warmup_config(),
                derive_seed(cfg.seed, "warmup-b"),
            )?;
            let (a, b, rows) = dividemix_train(&train, &test, model_a, model_b, &lnl, seed)?;
            dir.save_model(&dir.final_ckpt(), &a)?;
            dir.save_model(&dir.train_b_ckpt(), &b)?;
            rows
        }
        LnlMethod::Elr => {
            let mut model = model_a;
            let rows = elr_train(&train, &test, &mut model, &lnl, seed)?;
            dir.save_model(&dir.final_ckpt(), &model)?;
            rows
        }
        LnlMethod::OracleMixMatch => {
            let mut model = model_a;
            let rows = oracle_split_train(&train, &test, &mut model, &lnl, seed)?;
            dir.save_model(&dir.final_ckpt(), &model)?;
            rows
        }
    };

    // the exact per-epoch train table, plus the shared run log
    let mut table = String::from("epoch,method,test_acc,train_loss,roc_auc,eff_noise_rate,labeled_frac\n");
    for r in &rows {
        let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        table.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch,
            r.method.clone().unwrap_or_default(),
            cell(r.test_acc),
            cell(r.train_loss),
            cell(r.roc_auc),
            cell(r.eff_noise_rate),
            cell(r.labeled_frac),
        ));
    }
    write_atomic(&dir.train_log(), table.as_bytes())?;
    let mut log = dir.load_runlog()?;
    log.replace_stage(Stage::Train, rows)?;
    dir.save_runlog(&log)?;
    write_atomic(&dir.config(), cfg.to_text().as_bytes())?;
    Ok(())
}

/// Probe the final encoder (clean labels, held-out accuracy) and export its
/// features.
pub fn stage_probe(_cfg: &ExperimentConfig, dir: &RunDir, checkpoint: Option<&Path>) -> Result<()> {
    let train = dir.load_dataset(&dir.train_dataset())?;
    let test = dir.load_dataset(&dir.test_dataset())?;
    let model = match checkpoint {
        Some(p) => dir.load_model(p)?,
        None => {
            let candidates = [dir.final_ckpt(), dir.warmup_ckpt(), dir.pretrain_ckpt()];
            let found = candidates.iter().find(|p| p.exists()).ok_or_else(|| {
                LabError::Io("no checkpoint in run directory; pass --checkpoint".into())
            })?;
            dir.load_model(found)?
        }
    };
    let probe = c2d_core::warmup::probe_feature_quality(&model, &train, &test)?;
    let feats = metrics::encoder_features(&model, &train)?;
    write_atomic(
        &dir.features(),
        metrics::features_to_csv(&train, &feats)?.as_bytes(),
    )?;
    let mut log = dir.load_runlog()?;
    let mut row = LogRow::new(Stage::Probe, 1);
    row.probe_acc = Some(probe.accuracy);
    row.probe_converged = Some(probe.converged);
    row.test_acc = Some(metrics::test_accuracy(&model, &test)?);
    log.replace_stage(Stage::Probe, vec![row])?;
    dir.save_runlog(&log)?;
    Ok(())
}

/// The full two-phase pipeline. Every stage error is tagged with the stage
/// name; artifacts written before a failure are retained.
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &RunDir) -> Result<()> {
    stage_gen_data(cfg, dir).map_err(|e| e.in_stage("gen-data"))?;
    stage_pretrain(cfg, dir).map_err(|e| e.in_stage("pretrain"))?;
    stage_warmup(cfg, dir).map_err(|e| e.in_stage("warmup"))?;
    stage_divide(cfg, dir).map_err(|e| e.in_stage("divide"))?;
    stage_train(cfg, dir).map_err(|e| e.in_stage("train"))?;
    stage_probe(cfg, dir, None).map_err(|e| e.in_stage("probe"))?;
    Ok(())
}

// ---- report ---------------------------------------------------------------

/// Align several runs' logs on their common (stage, epoch) grid and emit
/// one wide CSV with per-run roc_auc / probe_acc / test_acc columns, plus
/// `peak` and `final` summary rows per column.
pub fn compare_report(run_dirs: &[&Path]) -> Result<String> {
    if run_dirs.len() < 2 {
        return Err(LabError::Config(
            "report needs at least two run directories".into(),
        ));
    }
    struct Run {
        name: String,
        rows: BTreeMap<(String, usize), (Option<f64>, Option<f64>, Option<f64>)>,
        order: Vec<(String, usize)>,
    }
    let mut runs = Vec::new();
    for (i, path) in run_dirs.iter().enumerate() {
        let text = fs::read_to_string(RunDir::new(*path).runlog())?;
        let log = RunLog::from_csv(&text)?;
        let base = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("run{i}"));
        let name = format!("{base}_{i}");
        let mut rows = BTreeMap::new();
        let mut order = Vec::new();
        for r in log.rows() {
            let key = (r.stage.as_str().to_string(), r.epoch);
            if rows
                .insert(key.clone(), (r.roc_auc, r.probe_acc, r.test_acc))
                .is_none()
            {
                order.push(key);
            }
        }
        runs.push(Run { name, rows, order });
    }

    // intersection of epoch grids, in first-run order
    let common: Vec<(String, usize)> = runs[0]
        .order
        .iter()
        .filter(|k| runs.iter().all(|r| r.rows.contains_key(*k)))
        .cloned()
        .collect();
    let dropped = runs[0].order.len() - common.len();
    if dropped > 0 || runs.iter().any(|r| r.order.len() != common.len()) {
        eprintln!(
            "report: epoch grids differ; aligned on {} common rows",
            common.len()
        );
    }

    let mut header = String::from("stage,epoch");
    for r in &runs {
        header.push_str(&format!(
            ",{0}_roc_auc,{0}_probe_acc,{0}_test_acc",
            r.name
        ));
    }
    let mut out = header;
    out.push('\n');
    let cell = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for key in &common {
        out.push_str(&format!("{},{}", key.0, key.1));
        for r in &runs {
            let (roc, probe, test) = r.rows[key];
            out.push_str(&format!(",{},{},{}", cell(roc), cell(probe), cell(test)));
        }
        out.push('\n');
    }

    // peak (max over every logged epoch) and final (last logged epoch)
    let mut peak_line = String::from("peak,");
    let mut final_line = String::from("final,");
    for r in &runs {
        let mut peak = (None::<f64>, None::<f64>, None::<f64>);
        let mut fin = (None, None, None);
        for key in &r.order {
            let (roc, probe, test) = r.rows[key];
            let upd = |p: &mut Option<f64>, v: Option<f64>| {
                if let Some(v) = v {
                    *p = Some(p.map_or(v, |x: f64| x.max(v)));
                }
            };
            upd(&mut peak.0, roc);
            upd(&mut peak.1, probe);
            upd(&mut peak.2, test);
            if roc.is_some() {
                fin.0 = roc;
            }
            if probe.is_some() {
                fin.1 = probe;
            }
            if test.is_some() {
                fin.2 = test;
            }
        }
        peak_line.push_str(&format!(
            ",{},{},{}",
            cell(peak.0),
            cell(peak.1),
            cell(peak.2)
        ));
        final_line.push_str(&format!(",{},{},{}", cell(fin.0), cell(fin.1), cell(fin.2)));
    }
    out.push_str(&peak_line);
    out.push('\n');
    out.push_str(&final_line);
    out.push('\n');
    Ok(out)
}

// ---- sweep -----------------------------------------------------------------

/// Cartesian sweep over noise rates and init schemes. Each combination gets
/// its own run directory and a config derived from the base. Runs execute
/// in parallel worker threads, at most `C2D_LAB_THREADS` of them (default
/// 1).
pub fn sweep(
    base: &ExperimentConfig,
    noise_rates: &[f64],
    inits: &[InitScheme],
    out_root: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    if noise_rates.is_empty() || inits.is_empty() {
        return Err(LabError::Config("sweep needs at least one combination".into()));
    }
    let threads = std::env::var("C2D_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1);

    let mut jobs = Vec::new();
    for &rate in noise_rates {
        for &init in inits {
            let mut cfg = base.clone();
            cfg.noise_rate = rate;
            cfg.warmup_init = init;
            let name = format!("noise{rate}_{}", init.as_str());
            jobs.push((cfg, out_root.join(name)));
        }
    }

    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in jobs.chunks(jobs.len().div_ceil(threads)) {
            handles.push(scope.spawn(move || {
                chunk
                    .iter()
                    .map(|(cfg, path)| run_pipeline(cfg, &RunDir::new(path)))
                    .collect::<Vec<_>>()
            }));
        }
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    for r in results {
        r?;
    }
    Ok(jobs.into_iter().map(|(_, p)| p).collect())
}
