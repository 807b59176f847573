//! Divide phase: semi-supervised refinement on the clean/noisy split.
//!
//! Three methods share one mixmatch-style inner loop:
//!   - `dividemix`: two networks; each trains on the partition computed
//!     from the *other* network's losses (co-divide), with label
//!     co-refinement on the labeled batch and co-guessing on the unlabeled
//!     batch, mixup across the pooled batch, and `L_X + lambda_u * L_U`.
//!   - `oracle`: the noise flags replace the GMM (simulation-only upper
//!     bound); single network, w == 1 on the truly clean set.
//!   - `elr`: single network, no split; cross-entropy plus the
//!     early-learning regularizer pulling predictions toward a running
//!     average of themselves.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_with, AugmentationSpec, LabeledDataset};
use crate::divide::{divide_losses, DivideResult};
use crate::error::{invalid, CoreError, Result};
use crate::graph::Tape;
use crate::math;
use crate::metrics;
use crate::model::{Model, TrainScope};
use crate::optim::{SgdConfig, SgdState};
use crate::runlog::{LogRow, Stage};
use crate::seed::{derive_seed_indexed, rng_from};
use crate::tensor::Tensor;
use crate::warmup::{cross_entropy_graph, eval_per_sample_losses, instrument_division, mixup_batch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LnlMethod {
    DivideMix,
    Elr,
    OracleMixMatch,
}

impl LnlMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            LnlMethod::DivideMix => "dividemix",
            LnlMethod::Elr => "elr",
            LnlMethod::OracleMixMatch => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dividemix" => Ok(LnlMethod::DivideMix),
            "elr" => Ok(LnlMethod::Elr),
            "oracle" | "oracle-mixmatch" => Ok(LnlMethod::OracleMixMatch),
            other => Err(invalid(alloc::format!("unknown LNL method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnlConfig {
    pub method: LnlMethod,
    /// Weight of the unlabeled (consistency) loss.
    pub lambda_u: f64,
    /// Sharpening temperature for refined and guessed labels.
    pub sharpen_t: f64,
    pub mixup_alpha: f64,
    /// Clean-posterior threshold for the per-epoch refit.
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub elr_lambda: f64,
    pub elr_beta: f64,
    pub opt: SgdConfig,
    /// Augmentations used when guessing labels for unlabeled samples.
    pub aug: AugmentationSpec,
    /// Number of augmented views per model in a co-guess.
    pub guess_augments: usize,
}

impl Default for LnlConfig {
    fn default() -> Self {
        LnlConfig {
            method: LnlMethod::DivideMix,
            lambda_u: 25.0,
            sharpen_t: 0.5,
            mixup_alpha: 4.0,
            tau: 0.03,
            epochs: 30,
            batch_size: 64,
            elr_lambda: 3.0,
            elr_beta: 0.7,
            opt: SgdConfig {
                learning_rate: 0.02,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            aug: AugmentationSpec::default(),
            guess_augments: 2,
        }
    }
}

impl LnlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sharpen_t > 0.0) {
            return Err(invalid("sharpen_t must be positive"));
        }
        if self.lambda_u < 0.0 || self.mixup_alpha < 0.0 || self.elr_lambda < 0.0 {
            return Err(invalid("loss weights must be nonnegative"));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(invalid("tau must be in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.elr_beta) {
            return Err(invalid("elr_beta must be in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size < 2 || self.guess_augments == 0 {
            return Err(invalid("epochs >= 1, batch_size >= 2, guess_augments >= 1"));
        }
        self.aug.validate()
    }
}

// ---- label surgery ----------------------------------------------------------

/// Temperature sharpening: q_c = p_c^(1/T) / sum_k p_k^(1/T).
pub fn sharpen(p: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(invalid("sharpen temperature must be positive"));
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| v < -1e-9) || (sum - 1.0).abs() > 1e-6 {
        return Err(invalid("sharpen input is not a distribution"));
    }
    let powed: Vec<f64> = p.iter().map(|&v| math::pow(v.max(0.0), 1.0 / t)).collect();
    let z: f64 = powed.iter().sum();
    if z <= 0.0 || !z.is_finite() {
        return Err(CoreError::NonFinite("sharpen normalizer"));
    }
    Ok(powed.iter().map(|&v| v / z).collect())
}

/// Label co-refinement: blend the observed one-hot with the model's own
/// prediction by the clean probability, then sharpen.
pub fn co_refine(
    observed_onehot: &[f64],
    w: f64,
    model_probs: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&w) {
        return Err(invalid("clean probability w must be in [0, 1]"));
    }
    if observed_onehot.len() != model_probs.len() {
        return Err(invalid("co_refine operand lengths disagree"));
    }
    let blended: Vec<f64> = observed_onehot
        .iter()
        .zip(model_probs)
        .map(|(&y, &p)| w * y + (1.0 - w) * p)
        .collect();
    sharpen(&blended, t)
}

/// Co-guessing for an unlabeled sample: average both models' predictions
/// over `k` augmented views each, then sharpen.
pub fn co_guess(
    x: &[f64],
    model_a: &Model,
    model_b: &Model,
    aug: &AugmentationSpec,
    k: usize,
    t: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(invalid("co_guess needs at least one augmentation"));
    }
    let c = model_a.num_classes();
    let mut acc = alloc::vec![0.0; c];
    for model in [model_a, model_b] {
        for _ in 0..k {
            let view = augment_with(x, aug, rng);
            let xt = Tensor::new(alloc::vec![1, x.len()], view)?;
            let probs = model.predict_probs(&xt)?;
            for (a, &p) in acc.iter_mut().zip(probs.data()) {
                *a += p;
            }
        }
    }
    let denom = (2 * k) as f64;
    for a in acc.iter_mut() {
        *a /= denom;
    }
    sharpen(&acc, t)
}

// ---- the shared mixmatch pass -------------------------------------------------

/// One epoch of mixmatch-style training for one network.
///
/// `w` carries per-dataset-index clean probabilities; `None` means the
/// oracle convention w == 1. `other` is the co-guessing partner; `None`
/// makes the network guess with itself (single-network MixMatch).
#[allow(clippy::too_many_arguments)]
fn mixmatch_pass(
    primary: &mut Model,
    other: Option<&Model>,
    train: &LabeledDataset,
    labeled_idx: &[usize],
    w: Option<&[f64]>,
    unlabeled_idx: &[usize],
    cfg: &LnlConfig,
    rng: &mut ChaCha8Rng,
    sgd: &mut SgdState,
) -> Result<f64> {
    if labeled_idx.is_empty() {
        return Err(CoreError::EmptyLabeledSet { tau: cfg.tau });
    }
    let c = train.num_classes();
    let mut order = labeled_idx.to_vec();
    order.shuffle(rng);

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let bl = chunk.len();
        let xl = train.gather_features(chunk);
        let yobs = train.observed_onehot(chunk);
        // refinement uses eval-mode predictions on un-augmented inputs
        let probs = primary.predict_probs(&xl)?;
        let mut y_ref = Vec::with_capacity(bl * c);
        for (row, &i) in chunk.iter().enumerate() {
            let wi = w.map_or(1.0, |w| w[i]);
            let refined = co_refine(
                &yobs.data()[row * c..(row + 1) * c],
                wi,
                probs.row(row),
                cfg.sharpen_t,
            )?;
            y_ref.extend_from_slice(&refined);
        }
        let y_ref = Tensor::new(alloc::vec![bl, c], y_ref)?;

        // an unlabeled batch of the same size, guessed labels
        let (x_pool, y_pool, bu) = if unlabeled_idx.is_empty() {
            (xl, y_ref, 0)
        } else {
            let partner = other.unwrap_or(primary);
            let mut xu = Vec::with_capacity(bl * train.dim());
            let mut qu = Vec::with_capacity(bl * c);
            for _ in 0..bl {
                let i = unlabeled_idx[rng.random_range(0..unlabeled_idx.len())];
                let x = train.feature_row(i);
                xu.extend_from_slice(x);
                let q = co_guess(
                    x,
                    primary,
                    partner,
                    &cfg.aug,
                    cfg.guess_augments,
                    cfg.sharpen_t,
                    rng,
                )?;
                qu.extend_from_slice(&q);
            }
            let xu = Tensor::new(alloc::vec![bl, train.dim()], xu)?;
            let qu = Tensor::new(alloc::vec![bl, c], qu)?;
            let mut x_pool = xl.clone();
            let mut y_pool = y_ref.clone();
            x_pool = Tensor::new(
                alloc::vec![2 * bl, train.dim()],
                [x_pool.data(), xu.data()].concat(),
            )?;
            y_pool = Tensor::new(alloc::vec![2 * bl, c], [y_pool.data(), qu.data()].concat())?;
            (x_pool, y_pool, bl)
        };

        let (x_mix, y_mix, _) = mixup_batch(&x_pool, &y_pool, cfg.mixup_alpha, rng)?;

        let mut tape = Tape::new();
        let bound = primary.bind(&mut tape);
        let xv = tape.leaf(x_mix);
        let feats = bound.encode(&mut tape, xv)?;
        let logits = bound.classify(&mut tape, feats)?;
        let probs_all = tape.softmax_rows(logits)?;
        let probs_l = tape.slice_rows(probs_all, 0, bl)?;
        let y_l = Tensor::new(alloc::vec![bl, c], y_mix.data()[..bl * c].to_vec())?;
        let lx = cross_entropy_graph(&mut tape, probs_l, &y_l)?;
        let loss = if bu > 0 {
            let probs_u = tape.slice_rows(probs_all, bl, bl + bu)?;
            let q_u = tape.leaf(Tensor::new(
                alloc::vec![bu, c],
                y_mix.data()[bl * c..].to_vec(),
            )?);
            let diff = tape.sub(probs_u, q_u)?;
            let sq = tape.mul(diff, diff)?;
            let lu = tape.mean_all(sq)?;
            let weighted = tape.scale(lu, cfg.lambda_u)?;
            tape.add(lx, weighted)?
        } else {
            lx
        };
        let loss_val = tape.value(loss).data()[0];
        tape.backward(loss)?;
        let grads = primary.scope_grads(&tape, &bound, TrainScope::EncoderClassifier)?;
        let mut params = primary.named_params_mut(TrainScope::EncoderClassifier);
        let mut refs: Vec<(&str, &mut Tensor)> = params
            .iter_mut()
            .map(|(nm, t)| (nm.as_str(), &mut **t))
            .collect();
        sgd.step(&mut refs, &grads)?;
        loss_sum += loss_val;
        batches += 1;
    }
    Ok(loss_sum / batches.max(1) as f64)
}

// ---- dividemix ---------------------------------------------------------------

/// Division diagnostics for one epoch of co-divide training.
struct CoDivide {
    /// Partition network A trains with (from B's losses).
    for_a: DivideResult,
    /// Partition network B trains with (from A's losses).
    for_b: DivideResult,
    roc_auc: Option<f64>,
    eff_noise_rate: Option<f64>,
    labeled_frac: f64,
}

fn co_divide(a: &Model, b: &Model, train: &LabeledDataset, tau: f64) -> Result<CoDivide> {
    let losses_a = eval_per_sample_losses(a, train)?;
    let losses_b = eval_per_sample_losses(b, train)?;
    let (_, from_a) = divide_losses(&losses_a, tau)?;
    let (_, from_b) = divide_losses(&losses_b, tau)?;

    let scores: Vec<f64> = from_a
        .w
        .iter()
        .zip(&from_b.w)
        .map(|(wa, wb)| 1.0 - (wa + wb) / 2.0)
        .collect();
    let roc_auc = metrics::roc_auc(&scores, train.noise_flags()).ok();
    let eff_a = metrics::effective_noise_rate(&from_a.labeled_idx, train.noise_flags()).ok();
    let eff_b = metrics::effective_noise_rate(&from_b.labeled_idx, train.noise_flags()).ok();
    let eff_noise_rate = match (eff_a, eff_b) {
        (Some(x), Some(y)) => Some((x + y) / 2.0),
        _ => None,
    };
    let labeled_frac = (from_a.labeled_idx.len() + from_b.labeled_idx.len()) as f64
        / (2 * train.len()) as f64;
    Ok(CoDivide {
        for_a: from_b,
        for_b: from_a,
        roc_auc,
        eff_noise_rate,
        labeled_frac,
    })
}

/// One co-divide epoch: network A trains on the partition from B's losses
/// and vice versa. Exposed for dependency-injection tests; the usual entry
/// point is [`dividemix_train`].
pub fn dividemix_epoch(
    train: &LabeledDataset,
    models: (&mut Model, &mut Model),
    divides: (&DivideResult, &DivideResult),
    cfg: &LnlConfig,
    states: (&mut SgdState, &mut SgdState),
    epoch_seed: u64,
) -> Result<f64> {
    let mut rng = rng_from(epoch_seed);
    let (a, b) = models;
    let partner_b: &Model = &b.clone();
    let la = mixmatch_pass(
        a,
        Some(partner_b),
        train,
        &divides.0.labeled_idx,
        Some(&divides.0.w),
        &divides.0.unlabeled_idx,
        cfg,
        &mut rng,
        states.0,
    )?;
    let partner_a: &Model = &a.clone();
    let lb = mixmatch_pass(
        b,
        Some(partner_a),
        train,
        &divides.1.labeled_idx,
        Some(&divides.1.w),
        &divides.1.unlabeled_idx,
        cfg,
        &mut rng,
        states.1,
    )?;
    Ok((la + lb) / 2.0)
}

/// Full DivideMix-style training from two warmed-up networks.
pub fn dividemix_train(
    train: &LabeledDataset,
    test: &LabeledDataset,
    mut model_a: Model,
    mut model_b: Model,
    cfg: &LnlConfig,
    seed: u64,
) -> Result<(Model, Model, Vec<LogRow>)> {
    cfg.validate()?;
    let mut sgd_a = SgdState::new(cfg.opt);
    let mut sgd_b = SgdState::new(cfg.opt);
    let mut division = co_divide(&model_a, &model_b, train, cfg.tau)?;
    let mut rows = Vec::new();

    for epoch in 1..=cfg.epochs {
        let train_loss = dividemix_epoch(
            train,
            (&mut model_a, &mut model_b),
            (&division.for_a, &division.for_b),
            cfg,
            (&mut sgd_a, &mut sgd_b),
            derive_seed_indexed(seed, "epoch", epoch as u64),
        )
        .map_err(|e| match e {
            CoreError::NonFinite(_) => CoreError::Diverged {
                stage: "train",
                epoch,
            },
            other => other,
        })?;

        division = co_divide(&model_a, &model_b, train, cfg.tau)?;
        let mut row = LogRow::new(Stage::Train, epoch);
        row.method = Some(String::from("dividemix"));
        row.train_loss = Some(train_loss);
        row.test_acc = Some(metrics::ensemble_test_accuracy(&model_a, &model_b, test)?);
        row.roc_auc = division.roc_auc;
        row.eff_noise_rate = division.eff_noise_rate;
        row.labeled_frac = Some(division.labeled_frac);
        rows.push(row);
    }
    Ok((model_a, model_b, rows))
}

// ---- oracle split --------------------------------------------------------------

/// MixMatch with the noise detector replaced by an oracle: the labeled set
/// is exactly the truly clean samples (w == 1), the rest lose their labels.
/// Simulation-only upper bound.
pub fn oracle_split_train(
    train: &LabeledDataset,
    test: &LabeledDataset,
    model: &mut Model,
    cfg: &LnlConfig,
    seed: u64,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let labeled_idx: Vec<usize> = (0..train.len()).filter(|&i| !train.noise_flags()[i]).collect();
    let unlabeled_idx: Vec<usize> =
        (0..train.len()).filter(|&i| train.noise_flags()[i]).collect();
    if labeled_idx.is_empty() {
        return Err(invalid("oracle split found no clean samples"));
    }

    let mut sgd = SgdState::new(cfg.opt);
    let mut rows = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_from(derive_seed_indexed(seed, "epoch", epoch as u64));
        let train_loss = mixmatch_pass(
            model,
            None,
            train,
            &labeled_idx,
            None,
            &unlabeled_idx,
            cfg,
            &mut rng,
            &mut sgd,
        )
        .map_err(|e| match e {
            CoreError::NonFinite(_) => CoreError::Diverged {
                stage: "train",
                epoch,
            },
            other => other,
        })?;

        let mut row = LogRow::new(Stage::Train, epoch);
        row.method = Some(String::from("oracle"));
        row.train_loss = Some(train_loss);
        row.test_acc = Some(metrics::test_accuracy(model, test)?);
        // GMM separability is still worth logging, but the effective noise
        // rate and labeled fraction describe the oracle's split
        let losses = eval_per_sample_losses(model, train)?;
        instrument_division(&mut row, &losses, train, cfg.tau);
        row.eff_noise_rate =
            metrics::effective_noise_rate(&labeled_idx, train.noise_flags()).ok();
        row.labeled_frac = Some(labeled_idx.len() as f64 / train.len() as f64);
        rows.push(row);
    }
    Ok(rows)
}

// ---- ELR ------------------------------------------------------------------------

/// Running targets for early-learning regularization: an exponential
/// moving average of the model's own (detached) probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ElrState {
    targets: Tensor,
    beta: f64,
}

impl ElrState {
    pub fn new(n: usize, num_classes: usize, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(invalid("elr_beta must be in [0, 1)"));
        }
        Ok(ElrState {
            targets: Tensor::zeros(alloc::vec![n, num_classes]),
            beta,
        })
    }

    pub fn targets(&self) -> &Tensor {
        &self.targets
    }

    /// Rows for a batch, [B, C].
    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let (_, c) = self.targets.dims2();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.targets.row(i));
        }
        Tensor::new(alloc::vec![idx.len(), c], data).expect("shape")
    }

    /// t_i <- beta * t_i + (1 - beta) * p_i.
    pub fn update(&mut self, idx: &[usize], probs: &Tensor) {
        let (_, c) = self.targets.dims2();
        for (row, &i) in idx.iter().enumerate() {
            for j in 0..c {
                let t = &mut self.targets.data_mut()[i * c + j];
                *t = self.beta * *t + (1.0 - self.beta) * probs.data()[row * c + j];
            }
        }
    }
}

/// One ELR step: loss = CE(p, observed) + lambda * mean(ln(1 - clamp(<p, t>)))
/// computed with the *current* targets, then the targets are updated from
/// the detached probabilities. The log term is <= 0; minimizing it pulls
/// predictions toward the running targets.
pub fn elr_step(
    model: &mut Model,
    train: &LabeledDataset,
    chunk: &[usize],
    state: &mut ElrState,
    elr_lambda: f64,
    sgd: &mut SgdState,
) -> Result<f64> {
    let x = train.gather_features(chunk);
    let onehot = train.observed_onehot(chunk);
    let t_rows = state.rows(chunk);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.leaf(x);
    let feats = bound.encode(&mut tape, xv)?;
    let logits = bound.classify(&mut tape, feats)?;
    let probs = tape.softmax_rows(logits)?;

    let ce = cross_entropy_graph(&mut tape, probs, &onehot)?;
    let tv = tape.leaf(t_rows);
    let weighted = tape.mul(probs, tv)?;
    let inner = tape.row_sum(weighted)?;
    let clamped = tape.clamp(inner, 0.0, 1.0 - 1e-6)?;
    let ones = tape.leaf(Tensor::new(
        alloc::vec![chunk.len(), 1],
        alloc::vec![1.0; chunk.len()],
    )?);
    let one_minus = tape.sub(ones, clamped)?;
    let lg = tape.ln(one_minus, 1e-12)?;
    let reg = tape.mean_all(lg)?;
    let reg_weighted = tape.scale(reg, elr_lambda)?;
    let loss = tape.add(ce, reg_weighted)?;

    let loss_val = tape.value(loss).data()[0];
    let probs_val = tape.value(probs).clone();
    tape.backward(loss)?;
    let grads = model.scope_grads(&tape, &bound, TrainScope::EncoderClassifier)?;
    let mut params = model.named_params_mut(TrainScope::EncoderClassifier);
    let mut refs: Vec<(&str, &mut Tensor)> = params
        .iter_mut()
        .map(|(nm, t)| (nm.as_str(), &mut **t))
        .collect();
    sgd.step(&mut refs, &grads)?;
    state.update(chunk, &probs_val);
    Ok(loss_val)
}

/// Single-network training with early-learning regularization.
pub fn elr_train(
    train: &LabeledDataset,
    test: &LabeledDataset,
    model: &mut Model,
    cfg: &LnlConfig,
    seed: u64,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let mut state = ElrState::new(train.len(), train.num_classes(), cfg.elr_beta)?;
    let mut sgd = SgdState::new(cfg.opt);
    let mut rows = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_from(derive_seed_indexed(seed, "epoch", epoch as u64));
        let mut idx: Vec<usize> = (0..train.len()).collect();
        idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            let loss = elr_step(model, train, chunk, &mut state, cfg.elr_lambda, &mut sgd)
                .map_err(|e| match e {
                    CoreError::NonFinite(_) => CoreError::Diverged {
                        stage: "train",
                        epoch,
                    },
                    other => other,
                })?;
            loss_sum += loss;
            batches += 1;
        }
        let mut row = LogRow::new(Stage::Train, epoch);
        row.method = Some(String::from("elr"));
        row.train_loss = Some(loss_sum / batches.max(1) as f64);
        row.test_acc = Some(metrics::test_accuracy(model, test)?);
        let losses = eval_per_sample_losses(model, train)?;
        instrument_division(&mut row, &losses, train, cfg.tau);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_blobs, inject_symmetric_noise, DatasetSpec};
    use crate::model::ModelConfig;
    use crate::testutil::{assert_grad_close, finite_diff_grad};
    use crate::warmup::{warmup_only, WarmupConfig};
    use proptest::prelude::*;

    #[test]
    fn sharpen_t_one_is_identity() {
        let p = [0.3, 0.2, 0.5];
        assert_eq!(sharpen(&p, 1.0).unwrap(), p.to_vec());
    }

    #[test]
    fn sharpen_uniform_is_fixed_point() {
        let p = [0.25; 4];
        for t in [0.3, 0.5, 2.0] {
            let q = sharpen(&p, t).unwrap();
            for v in &q {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sharpen_hand_value() {
        let q = sharpen(&[0.8, 0.2], 0.5).unwrap();
        assert!((q[0] - 0.64 / 0.68).abs() < 1e-12, "{q:?}");
        assert!((q[1] - 0.04 / 0.68).abs() < 1e-12, "{q:?}");
    }

    #[test]
    fn co_refine_extremes() {
        let y = [0.0, 1.0, 0.0];
        let p = [0.2, 0.5, 0.3];
        assert_eq!(co_refine(&y, 1.0, &p, 1.0).unwrap(), y.to_vec());
        assert_eq!(co_refine(&y, 0.0, &p, 1.0).unwrap(), p.to_vec());
    }

    fn tiny_model(seed: u64) -> Model {
        Model::init(
            &ModelConfig {
                input_dim: 6,
                hidden_dims: alloc::vec![16],
                feature_dim: 8,
                projection_dim: 4,
                num_classes: 3,
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_data(noise: f64) -> (LabeledDataset, LabeledDataset) {
        let spec = DatasetSpec {
            num_classes: 3,
            per_class: 40,
            dim: 6,
            separation: 6.0,
        };
        let train = gen_gaussian_blobs(&spec, 5).unwrap();
        let train = if noise > 0.0 {
            inject_symmetric_noise(&train, noise, 6).unwrap()
        } else {
            train
        };
        let test = gen_gaussian_blobs(
            &DatasetSpec {
                per_class: 20,
                ..spec
            },
            7,
        )
        .unwrap();
        (train, test)
    }

    #[test]
    fn co_guess_identical_models_no_augmentation_is_sharpened_prediction() {
        let model = tiny_model(3);
        let (train, _) = tiny_data(0.0);
        let x = train.feature_row(0);
        let mut rng = rng_from(1);
        let guess = co_guess(
            x,
            &model,
            &model,
            &AugmentationSpec::disabled(),
            2,
            0.5,
            &mut rng,
        )
        .unwrap();
        let xt = Tensor::new(alloc::vec![1, 6], x.to_vec()).unwrap();
        let probs = model.predict_probs(&xt).unwrap();
        let expect = sharpen(probs.data(), 0.5).unwrap();
        for (g, e) in guess.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn co_guess_symmetric_under_model_swap() {
        let a = tiny_model(3);
        let b = tiny_model(4);
        let (train, _) = tiny_data(0.0);
        let x = train.feature_row(5);
        let aug = AugmentationSpec::disabled();
        let mut rng1 = rng_from(9);
        let mut rng2 = rng_from(9);
        let g1 = co_guess(x, &a, &b, &aug, 2, 0.5, &mut rng1).unwrap();
        let g2 = co_guess(x, &b, &a, &aug, 2, 0.5, &mut rng2).unwrap();
        for (u, v) in g1.iter().zip(&g2) {
            assert!((u - v).abs() < 1e-12);
        }
        let sum: f64 = g1.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn elr_initial_state_has_zero_regularizer() {
        let (train, _) = tiny_data(0.2);
        let model = tiny_model(8);
        let chunk: Vec<usize> = (0..10).collect();
        let state = ElrState::new(train.len(), 3, 0.7).unwrap();

        // loss with zero targets must equal the plain CE value
        let x = train.gather_features(&chunk);
        let onehot = train.observed_onehot(&chunk);
        let probs = model.predict_probs(&x).unwrap();
        let plain_ce = crate::warmup::cross_entropy(&probs, &onehot).unwrap();

        let mut m = model.clone();
        let mut st = state.clone();
        let mut sgd = SgdState::new(SgdConfig::new(1e-9, 0.0, 0.0).unwrap());
        let loss = elr_step(&mut m, &train, &chunk, &mut st, 3.0, &mut sgd).unwrap();
        assert_eq!(loss, plain_ce);
    }

    #[test]
    fn elr_loss_finite_when_inner_product_saturates() {
        let (train, _) = tiny_data(0.0);
        let chunk: Vec<usize> = (0..8).collect();
        let mut model = tiny_model(8);
        let mut state = ElrState::new(train.len(), 3, 0.7).unwrap();
        // force targets to the model's own confident predictions repeatedly
        let x = train.gather_features(&chunk);
        for _ in 0..60 {
            let probs = model.predict_probs(&x).unwrap();
            state.update(&chunk, &probs);
        }
        let mut sgd = SgdState::new(SgdConfig::new(1e-4, 0.0, 0.0).unwrap());
        let loss = elr_step(&mut model, &train, &chunk, &mut state, 3.0, &mut sgd).unwrap();
        assert!(loss.is_finite());
    }

    #[test]
    fn elr_gradient_matches_fd_with_targets_fixed() {
        let mut rng = rng_from(21);
        let c = 4;
        let b = 3;
        let onehot = Tensor::new(
            alloc::vec![b, c],
            alloc::vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let targets = Tensor::new(
            alloc::vec![b, c],
            (0..b * c).map(|_| rng.random_range(0.05..0.2)).collect(),
        )
        .unwrap();
        let lambda = 3.0;
        let eval = |flat: &[f64]| {
            let mut tape = Tape::new();
            let lv = tape.leaf(Tensor::new(alloc::vec![b, c], flat.to_vec()).unwrap());
            let probs = tape.softmax_rows(lv).unwrap();
            let ce = cross_entropy_graph(&mut tape, probs, &onehot).unwrap();
            let tv = tape.leaf(targets.clone());
            let weighted = tape.mul(probs, tv).unwrap();
            let inner = tape.row_sum(weighted).unwrap();
            let clamped = tape.clamp(inner, 0.0, 1.0 - 1e-6).unwrap();
            let ones = tape.leaf(Tensor::new(alloc::vec![b, 1], alloc::vec![1.0; b]).unwrap());
            let om = tape.sub(ones, clamped).unwrap();
            let lg = tape.ln(om, 1e-12).unwrap();
            let reg = tape.mean_all(lg).unwrap();
            let rw = tape.scale(reg, lambda).unwrap();
            let loss = tape.add(ce, rw).unwrap();
            tape.value(loss).data()[0]
        };
        for _ in 0..5 {
            let logits: Vec<f64> = (0..b * c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fd = finite_diff_grad(eval, &logits, 1e-5);
            // autodiff via the same graph
            let mut tape = Tape::new();
            let lv = tape.leaf(Tensor::new(alloc::vec![b, c], logits.clone()).unwrap());
            let probs = tape.softmax_rows(lv).unwrap();
            let ce = cross_entropy_graph(&mut tape, probs, &onehot).unwrap();
            let tv = tape.leaf(targets.clone());
            let weighted = tape.mul(probs, tv).unwrap();
            let inner = tape.row_sum(weighted).unwrap();
            let clamped = tape.clamp(inner, 0.0, 1.0 - 1e-6).unwrap();
            let ones = tape.leaf(Tensor::new(alloc::vec![b, 1], alloc::vec![1.0; b]).unwrap());
            let om = tape.sub(ones, clamped).unwrap();
            let lg = tape.ln(om, 1e-12).unwrap();
            let reg = tape.mean_all(lg).unwrap();
            let rw = tape.scale(reg, lambda).unwrap();
            let loss = tape.add(ce, rw).unwrap();
            tape.backward(loss).unwrap();
            let ad = tape.grad(lv).unwrap().data().to_vec();
            assert_grad_close(&ad, &fd, 1e-4, "elr");
        }
    }

    #[test]
    fn elr_targets_converge_geometrically_to_constant_predictions() {
        let beta = 0.7;
        let mut state = ElrState::new(2, 3, beta).unwrap();
        let p = Tensor::new(alloc::vec![2, 3], alloc::vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3]).unwrap();
        let idx = [0usize, 1];
        let mut expected_gap = 1.0; // sup-norm of t - p starts at max|p|
        let start_gap: f64 = p
            .data()
            .iter()
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        expected_gap *= start_gap;
        for _ in 0..12 {
            state.update(&idx, &p);
            expected_gap *= beta;
            let gap: f64 = state
                .targets()
                .data()
                .iter()
                .zip(p.data())
                .map(|(t, v)| (t - v).abs())
                .fold(0.0, f64::max);
            assert!(
                (gap - expected_gap).abs() < 1e-12,
                "gap {gap} vs beta^k {expected_gap}"
            );
        }
    }

    #[test]
    fn lambda_u_zero_contributes_nothing_to_gradients() {
        // same graph with and without the weighted unlabeled term
        let model = tiny_model(12);
        let (train, _) = tiny_data(0.0);
        let chunk: Vec<usize> = (0..8).collect();
        let x = train.gather_features(&chunk);
        let y = train.observed_onehot(&chunk);
        let xu = train.gather_features(&(8..16).collect::<Vec<_>>());
        let qu = train.observed_onehot(&(8..16).collect::<Vec<_>>());

        let grads_with = {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let all = Tensor::new(
                alloc::vec![16, 6],
                [x.data(), xu.data()].concat(),
            )
            .unwrap();
            let xv = tape.leaf(all);
            let feats = bound.encode(&mut tape, xv).unwrap();
            let logits = bound.classify(&mut tape, feats).unwrap();
            let probs = tape.softmax_rows(logits).unwrap();
            let pl = tape.slice_rows(probs, 0, 8).unwrap();
            let lx = cross_entropy_graph(&mut tape, pl, &y).unwrap();
            let pu = tape.slice_rows(probs, 8, 16).unwrap();
            let qv = tape.leaf(qu.clone());
            let d = tape.sub(pu, qv).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let lu = tape.mean_all(sq).unwrap();
            let luw = tape.scale(lu, 0.0).unwrap();
            let loss = tape.add(lx, luw).unwrap();
            tape.backward(loss).unwrap();
            model
                .scope_grads(&tape, &bound, TrainScope::EncoderClassifier)
                .unwrap()
        };
        let grads_without = {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xv = tape.leaf(x.clone());
            let feats = bound.encode(&mut tape, xv).unwrap();
            let logits = bound.classify(&mut tape, feats).unwrap();
            let probs = tape.softmax_rows(logits).unwrap();
            let lx = cross_entropy_graph(&mut tape, probs, &y).unwrap();
            tape.backward(lx).unwrap();
            model
                .scope_grads(&tape, &bound, TrainScope::EncoderClassifier)
                .unwrap()
        };
        for (gw, go) in grads_with.iter().zip(&grads_without) {
            for (a, b) in gw.data().iter().zip(go.data()) {
                assert!((a - b) == 0.0, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn oracle_with_zero_noise_reproduces_warmup_bit_for_bit() {
        // with no noise the oracle labeled set is the full dataset, the
        // unlabeled set is empty, and w == 1 with one-hot labels makes
        // refinement exact; the remaining loop must be the warm-up loop
        let (train, test) = tiny_data(0.0);
        let base = tiny_model(30);
        let warm_cfg = WarmupConfig {
            epochs: 3,
            mixup_alpha: 4.0,
            batch_size: 32,
            tau: 0.5,
            ..WarmupConfig::default()
        };
        let lnl_cfg = LnlConfig {
            method: LnlMethod::OracleMixMatch,
            lambda_u: 25.0,
            sharpen_t: 0.5,
            mixup_alpha: 4.0,
            tau: 0.5,
            epochs: 3,
            batch_size: 32,
            opt: warm_cfg.opt,
            ..LnlConfig::default()
        };
        let mut warmed = base.clone();
        warmup_only(&train, &mut warmed, &warm_cfg, 555).unwrap();
        let mut oracle = base.clone();
        let rows = oracle_split_train(&train, &test, &mut oracle, &lnl_cfg, 555).unwrap();
        assert_eq!(warmed, oracle);
        // oracle labeled set is exactly clean: effective noise rate 0
        for r in &rows {
            assert_eq!(r.eff_noise_rate, Some(0.0));
            assert_eq!(r.labeled_frac, Some(1.0));
        }
    }

    #[test]
    fn co_divide_uses_the_other_networks_losses() {
        let (train, _) = tiny_data(0.5);
        let mut a = tiny_model(31);
        let mut b = tiny_model(32);
        let warm = WarmupConfig {
            epochs: 2,
            tau: 0.5,
            ..WarmupConfig::default()
        };
        warmup_only(&train, &mut a, &warm, 1).unwrap();
        warmup_only(&train, &mut b, &warm, 2).unwrap();

        let division = co_divide(&a, &b, &train, 0.5).unwrap();
        let la = eval_per_sample_losses(&a, &train).unwrap();
        let lb = eval_per_sample_losses(&b, &train).unwrap();
        let (_, from_a) = divide_losses(&la, 0.5).unwrap();
        let (_, from_b) = divide_losses(&lb, 0.5).unwrap();
        assert_eq!(division.for_a.labeled_idx, from_b.labeled_idx);
        assert_eq!(division.for_b.labeled_idx, from_a.labeled_idx);
        assert_ne!(
            from_a.labeled_idx, from_b.labeled_idx,
            "test needs the two networks to disagree somewhere"
        );
    }

    #[test]
    fn dividemix_train_is_deterministic_and_logs() {
        let (train, test) = tiny_data(0.5);
        let warm = WarmupConfig {
            epochs: 2,
            tau: 0.5,
            ..WarmupConfig::default()
        };
        let mut a = tiny_model(41);
        let mut b = tiny_model(42);
        warmup_only(&train, &mut a, &warm, 1).unwrap();
        warmup_only(&train, &mut b, &warm, 2).unwrap();
        let cfg = LnlConfig {
            epochs: 2,
            batch_size: 32,
            tau: 0.5,
            ..LnlConfig::default()
        };
        let (a1, b1, rows1) = dividemix_train(&train, &test, a.clone(), b.clone(), &cfg, 9).unwrap();
        let (a2, b2, rows2) = dividemix_train(&train, &test, a, b, &cfg, 9).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(rows1, rows2);
        assert_eq!(rows1.len(), 2);
        for r in &rows1 {
            assert!(r.test_acc.unwrap() > 0.0);
            assert!(r.labeled_frac.unwrap() > 0.0);
        }
    }

    proptest! {
        #[test]
        fn sharpen_outputs_valid_distributions(
            raw in proptest::collection::vec(0.01f64..5.0, 2..8),
            t in 0.2f64..3.0,
        ) {
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let q = sharpen(&p, t).unwrap();
            let qsum: f64 = q.iter().sum();
            prop_assert!((qsum - 1.0).abs() < 1e-9);
            prop_assert!(q.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn co_refine_outputs_valid_distributions(
            raw in proptest::collection::vec(0.01f64..5.0, 3),
            w in 0.0f64..1.0,
            class in 0usize..3,
        ) {
            let sum: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let mut y = alloc::vec![0.0; 3];
            y[class] = 1.0;
            let q = co_refine(&y, w, &p, 0.5).unwrap();
            let qsum: f64 = q.iter().sum();
            prop_assert!((qsum - 1.0).abs() < 1e-9);
            prop_assert!(q.iter().all(|&v| v >= 0.0));
        }
    }
}
