//! Noisy warm-up: short supervised training on all observed labels, with
//! per-sample loss recording and per-epoch instrumentation of the two
//! quantities the later division depends on — loss separability (GMM
//! noise-detection ROC-AUC) and feature quality (linear probe on clean
//! labels).
//!
//! Per-sample losses feeding the divide phase are always computed in eval
//! mode on un-augmented, un-mixed inputs; mixup-perturbed losses would not
//! correspond to per-sample labels.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::data::LabeledDataset;
use crate::divide;
use crate::error::{invalid, CoreError, Result};
use crate::graph::{Tape, Var};
use crate::math;
use crate::metrics;
use crate::model::{Model, TrainScope};
use crate::optim::{SgdConfig, SgdState};
use crate::runlog::{LogRow, Stage};
use crate::seed::{derive_seed_indexed, rng_from};
use crate::tensor::Tensor;

/// How a warm-up (or a full pipeline) initializes the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    Random,
    Ssl,
    Proxy,
}

impl InitScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitScheme::Random => "random",
            InitScheme::Ssl => "ssl",
            InitScheme::Proxy => "proxy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitScheme::Random),
            "ssl" => Ok(InitScheme::Ssl),
            "proxy" => Ok(InitScheme::Proxy),
            other => Err(invalid(alloc::format!("unknown init scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupConfig {
    pub epochs: usize,
    /// 0 disables mixup.
    pub mixup_alpha: f64,
    pub batch_size: usize,
    pub opt: SgdConfig,
    pub freeze_encoder: bool,
    /// Threshold used by the per-epoch divide diagnostics.
    pub tau: f64,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            epochs: 5,
            mixup_alpha: 0.0,
            batch_size: 64,
            opt: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            freeze_encoder: false,
            tau: 0.03,
        }
    }
}

impl WarmupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("warm-up needs at least one epoch"));
        }
        if self.mixup_alpha < 0.0 {
            return Err(invalid("mixup_alpha must be nonnegative"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch_size must be at least 2"));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(invalid("tau must be in (0, 1)"));
        }
        Ok(())
    }
}

/// Per-sample cross-entropy losses for every epoch of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    losses: Vec<Vec<f64>>,
}

impl LossTrace {
    pub fn new() -> Self {
        LossTrace { losses: Vec::new() }
    }

    pub fn push_epoch(&mut self, losses: Vec<f64>) -> Result<()> {
        if losses.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CoreError::NonFinite("per-sample losses"));
        }
        if let Some(first) = self.losses.first() {
            if first.len() != losses.len() {
                return Err(invalid("loss trace width changed between epochs"));
            }
        }
        self.losses.push(losses);
        Ok(())
    }

    pub fn epochs(&self) -> usize {
        self.losses.len()
    }

    pub fn epoch(&self, e: usize) -> &[f64] {
        &self.losses[e]
    }

    pub fn final_losses(&self) -> &[f64] {
        self.losses.last().expect("at least one epoch")
    }
}

impl Default for LossTrace {
    fn default() -> Self {
        Self::new()
    }
}

// ---- cross-entropy ---------------------------------------------------------

fn validate_distribution_rows(t: &Tensor, what: &str) -> Result<()> {
    let (m, n) = t.dims2();
    for i in 0..m {
        let row = &t.data()[i * n..(i + 1) * n];
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < -1e-9) || (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(alloc::format!(
                "{what} row {i} is not a distribution (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of -sum_c target_c * ln(max(prob_c, 1e-12)).
/// Targets may be soft labels; both arguments must be row distributions.
pub fn cross_entropy(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    validate_distribution_rows(probs, "probs")?;
    validate_distribution_rows(targets, "targets")?;
    if probs.dims2() != targets.dims2() {
        return Err(CoreError::ShapeMismatch {
            op: "cross_entropy",
            lhs: probs.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let (m, n) = probs.dims2();
    let mut total = 0.0;
    for i in 0..m * n {
        if targets.data()[i] != 0.0 {
            total -= targets.data()[i] * math::ln_floored(probs.data()[i], 1e-12);
        }
    }
    Ok(total / m as f64)
}

/// Differentiable cross-entropy given an in-graph probability matrix and a
/// constant (possibly soft) target matrix.
pub fn cross_entropy_graph(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    validate_distribution_rows(tape.value(probs), "probs")?;
    validate_distribution_rows(targets, "targets")?;
    let (m, _) = tape.value(probs).dims2();
    if tape.value(probs).dims2() != targets.dims2() {
        return Err(CoreError::ShapeMismatch {
            op: "cross_entropy",
            lhs: tape.value(probs).shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let t = tape.leaf(targets.clone());
    let lp = tape.ln(probs, 1e-12)?;
    let weighted = tape.mul(t, lp)?;
    let total = tape.sum_all(weighted)?;
    tape.scale(total, -1.0 / m as f64)
}

// ---- mixup -----------------------------------------------------------------

/// lambda ~ Beta(alpha, alpha), folded so lambda >= 1/2 and the first
/// argument of the mix dominates. alpha == 0 disables mixing (lambda = 1).
pub fn mixup_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if alpha < 0.0 {
        return Err(invalid("mixup alpha must be nonnegative"));
    }
    if alpha == 0.0 {
        return Ok(1.0);
    }
    let beta = Beta::new(alpha, alpha).map_err(|_| invalid("bad Beta parameters"))?;
    let l: f64 = beta.sample(rng);
    Ok(l.max(1.0 - l))
}

/// Mix one pair of samples and their (soft) labels.
pub fn mixup(
    x1: &[f64],
    y1: &[f64],
    x2: &[f64],
    y2: &[f64],
    alpha: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if x1.len() != x2.len() || y1.len() != y2.len() {
        return Err(invalid("mixup operands must have matching lengths"));
    }
    let mut rng = rng_from(seed);
    let l = mixup_lambda(alpha, &mut rng)?;
    let x = x1
        .iter()
        .zip(x2)
        .map(|(&a, &b)| l * a + (1.0 - l) * b)
        .collect();
    let y = y1
        .iter()
        .zip(y2)
        .map(|(&a, &b)| l * a + (1.0 - l) * b)
        .collect();
    Ok((x, y, l))
}

/// Batch mixup, one lambda per batch, partners drawn as a permutation of
/// the batch itself. With alpha == 0 the batch passes through untouched
/// and the RNG is not consumed.
pub fn mixup_batch(
    x: &Tensor,
    y: &Tensor,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor, f64)> {
    if alpha == 0.0 {
        return Ok((x.clone(), y.clone(), 1.0));
    }
    let (b, _) = x.dims2();
    let l = mixup_lambda(alpha, rng)?;
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(rng);
    let mix = |t: &Tensor| {
        let (rows, cols) = t.dims2();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let pi = perm[i];
            for j in 0..cols {
                data.push(l * t.data()[i * cols + j] + (1.0 - l) * t.data()[pi * cols + j]);
            }
        }
        Tensor::new(t.shape().to_vec(), data).expect("shape")
    };
    Ok((mix(x), mix(y), l))
}

// ---- training steps --------------------------------------------------------

/// One supervised minibatch step: CE on (possibly soft, possibly mixed)
/// targets, backward, SGD. Returns the batch loss.
pub(crate) fn supervised_step(
    model: &mut Model,
    scope: TrainScope,
    x: &Tensor,
    targets: &Tensor,
    sgd: &mut SgdState,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let feats = bound.encode(&mut tape, xv)?;
    let logits = bound.classify(&mut tape, feats)?;
    let probs = tape.softmax_rows(logits)?;
    let loss = cross_entropy_graph(&mut tape, probs, targets)?;
    let loss_val = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = model.scope_grads(&tape, &bound, scope)?;
    let mut params = model.named_params_mut(scope);
    let mut refs: Vec<(&str, &mut Tensor)> = params
        .iter_mut()
        .map(|(n, t)| (n.as_str(), &mut **t))
        .collect();
    sgd.step(&mut refs, &grads)?;
    Ok(loss_val)
}

/// Eval-mode per-sample cross-entropy losses against observed labels.
pub fn eval_per_sample_losses(model: &Model, ds: &LabeledDataset) -> Result<Vec<f64>> {
    let probs = model.predict_probs(&ds.features_tensor())?;
    let c = ds.num_classes();
    Ok(ds
        .observed_labels()
        .iter()
        .enumerate()
        .map(|(i, &l)| -math::ln_floored(probs.data()[i * c + l], 1e-12))
        .collect())
}

/// `index,true_label,observed_label,is_noisy,loss_epoch_final` rows.
pub fn losses_to_csv(ds: &LabeledDataset, final_losses: &[f64]) -> Result<String> {
    if final_losses.len() != ds.len() {
        return Err(invalid("loss vector length disagrees with dataset"));
    }
    let mut out = String::from("index,true_label,observed_label,is_noisy,loss_epoch_final\n");
    for i in 0..ds.len() {
        out.push_str(&alloc::format!(
            "{i},{},{},{},{}\n",
            ds.true_labels()[i],
            ds.observed_labels()[i],
            ds.noise_flags()[i],
            final_losses[i]
        ));
    }
    Ok(out)
}

pub fn losses_from_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == "index,true_label,observed_label,is_noisy,loss_epoch_final" => {}
        _ => {
            return Err(CoreError::Parse {
                line: 1,
                msg: String::from("bad losses header"),
            })
        }
    }
    let mut out = Vec::new();
    for (lineno0, row) in lines {
        let line = lineno0 + 1;
        if row.is_empty() {
            continue;
        }
        let last = row.rsplit(',').next().ok_or(CoreError::Parse {
            line,
            msg: String::from("empty row"),
        })?;
        out.push(last.parse::<f64>().map_err(|_| CoreError::Parse {
            line,
            msg: alloc::format!("bad loss `{last}`"),
        })?);
    }
    Ok(out)
}

pub struct WarmupOutput {
    pub trace: LossTrace,
    pub rows: Vec<LogRow>,
}

/// The full instrumented warm-up. Also see [`warmup_only`], the identical
/// training loop without the per-epoch diagnostics (the instrumentation is
/// eval-only and consumes no randomness, so both produce bit-identical
/// models under the same seed).
pub fn run_warmup(
    train: &LabeledDataset,
    test: &LabeledDataset,
    model: &mut Model,
    cfg: &WarmupConfig,
    seed: u64,
) -> Result<WarmupOutput> {
    warmup_impl(train, Some(test), model, cfg, seed)
}

/// Warm-up without instrumentation; used for the second network of the
/// co-divide pair and anywhere the diagnostics are not needed.
pub fn warmup_only(
    train: &LabeledDataset,
    model: &mut Model,
    cfg: &WarmupConfig,
    seed: u64,
) -> Result<LossTrace> {
    Ok(warmup_impl(train, None, model, cfg, seed)?.trace)
}

fn warmup_impl(
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    model: &mut Model,
    cfg: &WarmupConfig,
    seed: u64,
) -> Result<WarmupOutput> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    let scope = if cfg.freeze_encoder {
        TrainScope::ClassifierOnly
    } else {
        TrainScope::EncoderClassifier
    };
    let mut sgd = SgdState::new(cfg.opt);
    let mut trace = LossTrace::new();
    let mut rows = Vec::new();

    for epoch in 1..=cfg.epochs {
        let mut rng = rng_from(derive_seed_indexed(seed, "epoch", epoch as u64));
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            let x = train.gather_features(chunk);
            let y = train.observed_onehot(chunk);
            let (x, y, _) = mixup_batch(&x, &y, cfg.mixup_alpha, &mut rng)?;
            let loss = supervised_step(model, scope, &x, &y, &mut sgd).map_err(|e| match e {
                CoreError::NonFinite(_) => CoreError::Diverged {
                    stage: "warmup",
                    epoch,
                },
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
        }

        let losses = eval_per_sample_losses(model, train)?;
        trace.push_epoch(losses.clone())?;

        let mut row = LogRow::new(Stage::Warmup, epoch);
        row.train_loss = Some(loss_sum / batches.max(1) as f64);
        if let Some(test) = test {
            instrument_division(&mut row, &losses, train, cfg.tau);
            let probe = probe_feature_quality(model, train, test)?;
            row.probe_acc = Some(probe.accuracy);
            row.probe_converged = Some(probe.converged);
            row.test_acc = Some(metrics::test_accuracy(model, test)?);
        }
        rows.push(row);
    }

    Ok(WarmupOutput { trace, rows })
}

/// GMM-based separability diagnostics for one epoch's losses. Absent cells
/// (e.g. ROC-AUC on a noise-free dataset) stay `None`.
pub(crate) fn instrument_division(
    row: &mut LogRow,
    losses: &[f64],
    train: &LabeledDataset,
    tau: f64,
) {
    if let Ok((_, result)) = divide::divide_losses(losses, tau) {
        let noisy_scores: Vec<f64> = result.w.iter().map(|w| 1.0 - w).collect();
        row.roc_auc = metrics::roc_auc(&noisy_scores, train.noise_flags()).ok();
        row.eff_noise_rate =
            metrics::effective_noise_rate(&result.labeled_idx, train.noise_flags()).ok();
        row.labeled_frac = Some(result.labeled_idx.len() as f64 / train.len() as f64);
    }
}

/// Linear probe on frozen encoder features: clean train labels, held-out
/// accuracy.
pub fn probe_feature_quality(
    model: &Model,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<metrics::ProbeResult> {
    let train_feats = metrics::encoder_features(model, train)?;
    let test_feats = metrics::encoder_features(model, test)?;
    metrics::linear_probe(
        &train_feats,
        train.true_labels(),
        &test_feats,
        test.true_labels(),
        train.num_classes(),
    )
}
