//! Contrast phase: self-supervised pre-training of the encoder on the
//! training features with labels discarded, plus a supervised proxy
//! pre-training mode for the comparison arm.
//!
//! [`pretrain_ssl`] takes a bare feature matrix, never a labeled dataset —
//! label blindness is enforced by the signature, not by discipline.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::data::{augment_with, AugmentationSpec, LabeledDataset};
use crate::error::{invalid, CoreError, Result};
use crate::graph::{Tape, Var};
use crate::math;
use crate::model::{Model, TrainScope};
use crate::optim::{SgdConfig, SgdState};
use crate::runlog::{LogRow, Stage};
use crate::seed::{derive_seed, derive_seed_indexed, rng_from};
use crate::tensor::Tensor;
use crate::warmup::supervised_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslMethod {
    SimClr,
    BarlowTwins,
}

impl SslMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SslMethod::SimClr => "simclr",
            SslMethod::BarlowTwins => "barlow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(SslMethod::SimClr),
            "barlow" | "barlow-twins" => Ok(SslMethod::BarlowTwins),
            other => Err(invalid(alloc::format!("unknown SSL method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    pub method: SslMethod,
    /// NT-Xent temperature.
    pub temperature: f64,
    /// Barlow Twins off-diagonal weight.
    pub offdiag_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: SgdConfig,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            method: SslMethod::SimClr,
            temperature: 0.5,
            offdiag_weight: 0.005,
            epochs: 200,
            batch_size: 128,
            opt: SgdConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if !(self.offdiag_weight > 0.0) {
            return Err(invalid("offdiag_weight must be positive"));
        }
        if self.batch_size < 2 {
            return Err(invalid("SSL batch_size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(invalid("SSL needs at least one epoch"));
        }
        Ok(())
    }
}

// ---- NT-Xent ----------------------------------------------------------------

fn check_paired_rows(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let (rows, p) = t.dims2();
    if rows < 2 || rows % 2 != 0 {
        return Err(invalid(alloc::format!(
            "{op} needs an even number (>= 2) of paired rows, got {rows}"
        )));
    }
    Ok((rows, p))
}

/// NT-Xent over interleaved pairs: rows 2k and 2k+1 are the two views of
/// sample k. Every row must be unit-norm (cosine similarity = dot product).
///
/// Average over all 2B anchors of
/// `-ln( exp(sim(anchor,positive)/T) / sum_{other != anchor} exp(sim(anchor,other)/T) )`.
pub fn nt_xent_graph(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let (rows, _) = check_paired_rows(tape.value(z), "nt_xent")?;
    for i in 0..rows {
        let norm: f64 = tape.value(z).row(i).iter().map(|v| v * v).sum::<f64>();
        if (math::sqrt(norm) - 1.0).abs() > 1e-6 {
            return Err(invalid(alloc::format!(
                "nt_xent row {i} is not unit-norm (|x| = {})",
                math::sqrt(norm)
            )));
        }
    }

    let zt = tape.transpose(z)?;
    let sims = tape.matmul(z, zt)?;
    let scaled = tape.scale(sims, 1.0 / temperature)?;
    // self-similarities must not act as negatives
    let diag_mask = Tensor::eye_with(rows, -1e9, 0.0);
    let masked = {
        let m = tape.leaf(diag_mask);
        tape.add(scaled, m)?
    };
    let log_probs = tape.log_softmax_rows(masked)?;
    // pick each anchor's positive: partner of row i is row i^1
    let mut pos = Tensor::zeros(alloc::vec![rows, rows]);
    for i in 0..rows {
        pos.data_mut()[i * rows + (i ^ 1)] = 1.0;
    }
    let pos = tape.leaf(pos);
    let picked = tape.mul(pos, log_probs)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// Plain evaluation of the NT-Xent loss.
pub fn nt_xent_loss(projections: &Tensor, temperature: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(projections.clone());
    let loss = nt_xent_graph(&mut tape, z, temperature)?;
    Ok(tape.value(loss).data()[0])
}

// ---- Barlow Twins -------------------------------------------------------------

/// Batch standardization per dimension (mean 0, std 1 over the batch),
/// eps-guarded, differentiable.
pub fn standardize_cols_graph(tape: &mut Tape, z: Var, eps: f64) -> Result<Var> {
    let (b, _) = tape.value(z).dims2();
    if b < 2 {
        return Err(invalid("batch standardization needs at least 2 rows"));
    }
    let mu = tape.col_mean(z)?;
    let centered = tape.sub(z, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.col_mean(sq)?;
    let var_eps = tape.add_scalar(var, eps)?;
    let std = tape.sqrt(var_eps)?;
    tape.div(centered, std)
}

const BT_STANDARDIZE_EPS: f64 = 1e-5;

/// Barlow Twins redundancy-reduction loss. The two inputs are
/// batch-standardized per dimension (eps 1e-5) inside the graph, then
/// `C = z1^T z2 / B` and the loss is
/// `sum_i (1 - C_ii)^2 + offdiag_weight * sum_{i != j} C_ij^2`.
pub fn barlow_twins_graph(
    tape: &mut Tape,
    z1: Var,
    z2: Var,
    offdiag_weight: f64,
) -> Result<Var> {
    let (b, p) = tape.value(z1).dims2();
    if tape.value(z2).dims2() != (b, p) {
        return Err(CoreError::ShapeMismatch {
            op: "barlow_twins",
            lhs: tape.value(z1).shape().to_vec(),
            rhs: tape.value(z2).shape().to_vec(),
        });
    }
    if b < 2 {
        return Err(invalid(
            "barlow_twins needs a batch of at least 2 (std undefined)",
        ));
    }
    let s1 = standardize_cols_graph(tape, z1, BT_STANDARDIZE_EPS)?;
    let s2 = standardize_cols_graph(tape, z2, BT_STANDARDIZE_EPS)?;
    let s1t = tape.transpose(s1)?;
    let cross = tape.matmul(s1t, s2)?;
    let c = tape.scale(cross, 1.0 / b as f64)?;
    let eye = tape.leaf(Tensor::eye_with(p, 1.0, 0.0));
    let d = tape.sub(c, eye)?;
    let d2 = tape.mul(d, d)?;
    let weights = tape.leaf(Tensor::eye_with(p, 1.0, offdiag_weight));
    let weighted = tape.mul(weights, d2)?;
    tape.sum_all(weighted)
}

/// Plain evaluation of the Barlow Twins loss.
pub fn barlow_twins_loss(z1: &Tensor, z2: &Tensor, offdiag_weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(z1.clone());
    let b = tape.leaf(z2.clone());
    let loss = barlow_twins_graph(&mut tape, a, b, offdiag_weight)?;
    Ok(tape.value(loss).data()[0])
}

// ---- pre-training loops --------------------------------------------------------

/// Self-supervised pre-training of encoder + projection head on a bare
/// [N, D] feature matrix. Emits one log row per epoch with the mean SSL
/// loss.
pub fn pretrain_ssl(
    features: &Tensor,
    model: &mut Model,
    cfg: &SslConfig,
    aug: &AugmentationSpec,
    seed: u64,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    aug.validate()?;
    let (n, d) = features.dims2();
    if n == 0 {
        return Err(invalid("empty feature matrix"));
    }
    if d != model.input_dim() {
        return Err(CoreError::ShapeMismatch {
            op: "pretrain_ssl",
            lhs: features.shape().to_vec(),
            rhs: alloc::vec![model.input_dim()],
        });
    }

    let mut sgd = SgdState::new(cfg.opt);
    let mut rows = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_from(derive_seed_indexed(seed, "epoch", epoch as u64));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let loss = ssl_batch_step(features, model, cfg, aug, chunk, &mut rng, &mut sgd)
                .map_err(|e| match e {
                    CoreError::NonFinite(_) => CoreError::Diverged {
                        stage: "pretrain",
                        epoch,
                    },
                    other => other,
                })?;
            loss_sum += loss;
            batches += 1;
        }

        let mut row = LogRow::new(Stage::Pretrain, epoch);
        row.method = Some(String::from(cfg.method.as_str()));
        row.train_loss = Some(loss_sum / batches.max(1) as f64);
        rows.push(row);
    }
    Ok(rows)
}

fn ssl_batch_step(
    features: &Tensor,
    model: &mut Model,
    cfg: &SslConfig,
    aug: &AugmentationSpec,
    chunk: &[usize],
    rng: &mut rand_chacha::ChaCha8Rng,
    sgd: &mut SgdState,
) -> Result<f64> {
    let (_, d) = features.dims2();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let loss = match cfg.method {
        SslMethod::SimClr => {
            // interleaved views: rows 2k, 2k+1 belong to sample k
            let mut data = Vec::with_capacity(chunk.len() * 2 * d);
            for &i in chunk {
                let x = &features.data()[i * d..(i + 1) * d];
                data.extend_from_slice(&augment_with(x, aug, rng));
                data.extend_from_slice(&augment_with(x, aug, rng));
            }
            let batch = Tensor::new(alloc::vec![chunk.len() * 2, d], data)?;
            let xv = tape.leaf(batch);
            let feats = bound.encode(&mut tape, xv)?;
            let proj = bound.project(&mut tape, feats)?;
            let z = tape.l2_normalize_rows(proj)?;
            nt_xent_graph(&mut tape, z, cfg.temperature)?
        }
        SslMethod::BarlowTwins => {
            let mut d1 = Vec::with_capacity(chunk.len() * d);
            let mut d2 = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                let x = &features.data()[i * d..(i + 1) * d];
                d1.extend_from_slice(&augment_with(x, aug, rng));
                d2.extend_from_slice(&augment_with(x, aug, rng));
            }
            let v1 = tape.leaf(Tensor::new(alloc::vec![chunk.len(), d], d1)?);
            let v2 = tape.leaf(Tensor::new(alloc::vec![chunk.len(), d], d2)?);
            let f1 = bound.encode(&mut tape, v1)?;
            let f2 = bound.encode(&mut tape, v2)?;
            let p1 = bound.project(&mut tape, f1)?;
            let p2 = bound.project(&mut tape, f2)?;
            barlow_twins_graph(&mut tape, p1, p2, cfg.offdiag_weight)?
        }
    };
    let loss_val = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = model.scope_grads(&tape, &bound, TrainScope::EncoderProjection)?;
    let mut params = model.named_params_mut(TrainScope::EncoderProjection);
    let mut refs: Vec<(&str, &mut Tensor)> = params
        .iter_mut()
        .map(|(nm, t)| (nm.as_str(), &mut **t))
        .collect();
    sgd.step(&mut refs, &grads)?;
    Ok(loss_val)
}

/// Supervised pre-training on a clean proxy dataset (the comparison arm):
/// cross-entropy on encoder + classifier, then the classifier is
/// re-initialized so only the encoder transfers.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: SgdConfig,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            epochs: 40,
            batch_size: 64,
            opt: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
        }
    }
}

pub fn pretrain_supervised_proxy(
    proxy: &LabeledDataset,
    model: &mut Model,
    cfg: &ProxyConfig,
    seed: u64,
) -> Result<Vec<LogRow>> {
    if proxy.dim() != model.input_dim() {
        return Err(CoreError::ShapeMismatch {
            op: "pretrain_supervised_proxy",
            lhs: alloc::vec![proxy.len(), proxy.dim()],
            rhs: alloc::vec![model.input_dim()],
        });
    }
    if proxy.num_classes() != model.num_classes() {
        return Err(invalid("proxy class count disagrees with the model"));
    }
    if cfg.epochs == 0 || cfg.batch_size < 2 {
        return Err(invalid("proxy pre-training needs epochs >= 1, batch >= 2"));
    }
    let mut sgd = SgdState::new(cfg.opt);
    let mut rows = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut rng = rng_from(derive_seed_indexed(seed, "epoch", epoch as u64));
        let mut idx: Vec<usize> = (0..proxy.len()).collect();
        idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in idx.chunks(cfg.batch_size) {
            let x = proxy.gather_features(chunk);
            let y = proxy.observed_onehot(chunk);
            let loss = supervised_step(model, TrainScope::EncoderClassifier, &x, &y, &mut sgd)
                .map_err(|e| match e {
                    CoreError::NonFinite(_) => CoreError::Diverged {
                        stage: "pretrain",
                        epoch,
                    },
                    other => other,
                })?;
            loss_sum += loss;
            batches += 1;
        }
        let mut row = LogRow::new(Stage::Pretrain, epoch);
        row.method = Some(String::from("proxy"));
        row.train_loss = Some(loss_sum / batches.max(1) as f64);
        rows.push(row);
    }
    // only the encoder transfers
    model.reinit_classifier(derive_seed(seed, "proxy-classifier-reinit"));
    Ok(rows)
}
