//! Diagnostics: noise-detection ROC-AUC, effective noise rate, linear-probe
//! feature quality, loss histograms, and feature export.
//!
//! Everything here is pure. The probe deliberately takes feature matrices
//! rather than a model, so it is structurally unable to touch encoder
//! weights.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::LabeledDataset;
use crate::error::{invalid, CoreError, Result};
use crate::math;
use crate::model::Model;
use crate::tensor::{softmax_rows, Tensor};

/// One epoch's instrumentation, all fields in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub roc_auc: f64,
    pub eff_noise_rate: f64,
    pub probe_acc: f64,
    pub test_acc: f64,
}

impl MetricRow {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("roc_auc", self.roc_auc),
            ("eff_noise_rate", self.eff_noise_rate),
            ("probe_acc", self.probe_acc),
            ("test_acc", self.test_acc),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name}={v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Probability that a uniformly random noisy sample scores above a
/// uniformly random clean one, ties counted one half. Computed with the
/// Mann-Whitney rank statistic and midrank tie handling; exact, and
/// O(N log N).
pub fn roc_auc(scores: &[f64], is_noisy: &[bool]) -> Result<f64> {
    if scores.len() != is_noisy.len() {
        return Err(invalid("scores/flags length mismatch"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("roc scores"));
    }
    let pos = is_noisy.iter().filter(|&&f| f).count();
    let neg = is_noisy.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid("roc_auc needs at least one noisy and one clean sample"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));

    // midranks over tie groups, then sum positive ranks
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if is_noisy[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let m = pos as f64;
    let n = neg as f64;
    let u = rank_sum_pos - m * (m + 1.0) / 2.0;
    Ok(u / (m * n))
}

/// Share of truly mislabeled samples inside the labeled subset.
pub fn effective_noise_rate(labeled_idx: &[usize], noise_flags: &[bool]) -> Result<f64> {
    if labeled_idx.is_empty() {
        return Err(invalid("effective noise rate of an empty labeled set"));
    }
    let mut noisy = 0usize;
    for &i in labeled_idx {
        if *noise_flags.get(i).ok_or_else(|| invalid("labeled index out of range"))? {
            noisy += 1;
        }
    }
    Ok(noisy as f64 / labeled_idx.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub converged: bool,
    pub iterations: usize,
}

const PROBE_MAX_ITERS: usize = 5000;
const PROBE_GRAD_TOL: f64 = 1e-5;

/// Multinomial logistic regression on frozen features, trained by
/// full-batch gradient descent with a backtracking (monotone) step size to
/// convergence (gradient norm < 1e-5) or 5000 iterations. Trains on the
/// clean labels of the train split, reports accuracy on the test split.
pub fn linear_probe(
    train_features: &Tensor,
    train_labels: &[usize],
    test_features: &Tensor,
    test_labels: &[usize],
    num_classes: usize,
) -> Result<ProbeResult> {
    let (n, f) = train_features.dims2();
    let (n_test, f_test) = test_features.dims2();
    if n != train_labels.len() || n_test != test_labels.len() {
        return Err(invalid("probe feature/label counts disagree"));
    }
    if f != f_test {
        return Err(CoreError::ShapeMismatch {
            op: "linear_probe",
            lhs: train_features.shape().to_vec(),
            rhs: test_features.shape().to_vec(),
        });
    }
    if num_classes < 2 {
        return Err(invalid("probe needs at least two classes"));
    }

    // standardize on train statistics
    let mut mean = vec![0.0; f];
    let mut std = vec![0.0; f];
    for i in 0..n {
        for j in 0..f {
            mean[j] += train_features.data()[i * f + j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    for i in 0..n {
        for j in 0..f {
            std[j] += math::sq(train_features.data()[i * f + j] - mean[j]);
        }
    }
    for s in std.iter_mut() {
        *s = math::sqrt(*s / n as f64).max(1e-8);
    }
    let standardize = |t: &Tensor| {
        let (rows, _) = t.dims2();
        let mut data = Vec::with_capacity(rows * f);
        for i in 0..rows {
            for j in 0..f {
                data.push((t.data()[i * f + j] - mean[j]) / std[j]);
            }
        }
        Tensor::new(vec![rows, f], data).expect("shape")
    };
    let x = standardize(train_features);
    let x_test = standardize(test_features);

    let c = num_classes;
    let mut onehot = vec![0.0; n * c];
    for (i, &l) in train_labels.iter().enumerate() {
        if l >= c {
            return Err(invalid("probe label out of range"));
        }
        onehot[i * c + l] = 1.0;
    }
    let y = Tensor::new(vec![n, c], onehot)?;

    let mut w = Tensor::zeros(vec![f, c]);
    let mut b = Tensor::zeros(vec![c]);

    let loss_of = |w: &Tensor, b: &Tensor| -> f64 {
        let logits = crate::tensor::add_row_broadcast(&x.matmul(w).expect("shape"), b)
            .expect("shape");
        let probs = softmax_rows(&logits);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..c {
                if y.data()[i * c + j] > 0.0 {
                    total -= math::ln_floored(probs.data()[i * c + j], 1e-12);
                }
            }
        }
        total / n as f64
    };

    let mut lr = 1.0;
    let mut loss = loss_of(&w, &b);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..PROBE_MAX_ITERS {
        iterations += 1;
        let logits = crate::tensor::add_row_broadcast(&x.matmul(&w)?, &b)?;
        let probs = softmax_rows(&logits);
        // d loss / d logits = (P - Y)/n
        let mut delta = probs.clone();
        for (d, t) in delta.data_mut().iter_mut().zip(y.data()) {
            *d = (*d - t) / n as f64;
        }
        let gw = x.transpose().matmul(&delta)?;
        let mut gb = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                gb[j] += delta.data()[i * c + j];
            }
        }
        let grad_norm = math::sqrt(
            gw.data().iter().map(|v| v * v).sum::<f64>() + gb.iter().map(|v| v * v).sum::<f64>(),
        );
        if grad_norm < PROBE_GRAD_TOL {
            converged = true;
            break;
        }
        // backtracking keeps the descent monotone on this convex objective
        let mut accepted = false;
        for _ in 0..40 {
            let mut w_try = w.clone();
            let mut b_try = b.clone();
            for (p, g) in w_try.data_mut().iter_mut().zip(gw.data()) {
                *p -= lr * g;
            }
            for (p, g) in b_try.data_mut().iter_mut().zip(&gb) {
                *p -= lr * g;
            }
            let new_loss = loss_of(&w_try, &b_try);
            if new_loss <= loss {
                w = w_try;
                b = b_try;
                loss = new_loss;
                accepted = true;
                lr *= 1.1;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break; // step size underflowed; gradient noise floor reached
        }
    }

    let acc_of = |feats: &Tensor, labels: &[usize]| -> f64 {
        let logits = crate::tensor::add_row_broadcast(&feats.matmul(&w).expect("shape"), &b)
            .expect("shape");
        let (rows, _) = logits.dims2();
        let mut correct = 0usize;
        for i in 0..rows {
            let row = logits.row(i);
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
                .map(|(j, _)| j)
                .expect("nonempty");
            if pred == labels[i] {
                correct += 1;
            }
        }
        correct as f64 / rows as f64
    };

    Ok(ProbeResult {
        accuracy: acc_of(&x_test, test_labels),
        train_accuracy: acc_of(&x, train_labels),
        converged,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossHistogram {
    /// bins+1 edges, equal width over [min, max].
    pub edges: Vec<f64>,
    pub clean: Vec<u64>,
    pub noisy: Vec<u64>,
}

impl LossHistogram {
    /// `bin_lo,bin_hi,clean_count,noisy_count` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,clean_count,noisy_count\n");
        for i in 0..self.clean.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.edges[i],
                self.edges[i + 1],
                self.clean[i],
                self.noisy[i]
            ));
        }
        out
    }
}

/// Equal-width histogram of losses, split by the noise flag.
pub fn loss_histogram(losses: &[f64], noise_flags: &[bool], bins: usize) -> Result<LossHistogram> {
    if bins < 2 {
        return Err(invalid("need at least 2 bins"));
    }
    if losses.len() != noise_flags.len() {
        return Err(invalid("losses/flags length mismatch"));
    }
    if losses.is_empty() {
        return Err(invalid("empty loss vector"));
    }
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(f64::MIN_POSITIVE);
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut clean = vec![0u64; bins];
    let mut noisy = vec![0u64; bins];
    for (&v, &flag) in losses.iter().zip(noise_flags) {
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        if flag {
            noisy[idx] += 1;
        } else {
            clean[idx] += 1;
        }
    }
    Ok(LossHistogram { edges, clean, noisy })
}

/// Eval-mode encoder features of a whole dataset, [N, F].
pub fn encoder_features(model: &Model, ds: &LabeledDataset) -> Result<Tensor> {
    model.encode_eval(&ds.features_tensor())
}

/// `index,true_label,observed_label,feat_0..feat_{F-1}` rows.
pub fn features_to_csv(ds: &LabeledDataset, features: &Tensor) -> Result<String> {
    let (n, f) = features.dims2();
    if n != ds.len() {
        return Err(invalid("feature rows disagree with dataset size"));
    }
    let cols: Vec<String> = (0..f).map(|j| format!("feat_{j}")).collect();
    let mut out = format!("index,true_label,observed_label,{}\n", cols.join(","));
    for i in 0..n {
        let feats: Vec<String> = features.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!(
            "{i},{},{},{}\n",
            ds.true_labels()[i],
            ds.observed_labels()[i],
            feats.join(",")
        ));
    }
    Ok(out)
}

/// Classifier accuracy against true labels.
pub fn test_accuracy(model: &Model, ds: &LabeledDataset) -> Result<f64> {
    let probs = model.predict_probs(&ds.features_tensor())?;
    Ok(accuracy_from_probs(&probs, ds.true_labels()))
}

/// Accuracy of the averaged predictions of two networks.
pub fn ensemble_test_accuracy(a: &Model, b: &Model, ds: &LabeledDataset) -> Result<f64> {
    let pa = a.predict_probs(&ds.features_tensor())?;
    let pb = b.predict_probs(&ds.features_tensor())?;
    let mut avg = pa.clone();
    for (x, y) in avg.data_mut().iter_mut().zip(pb.data()) {
        *x = (*x + y) / 2.0;
    }
    Ok(accuracy_from_probs(&avg, ds.true_labels()))
}

pub fn accuracy_from_probs(probs: &Tensor, labels: &[usize]) -> f64 {
    let (n, _) = probs.dims2();
    let mut correct = 0usize;
    for i in 0..n {
        let row = probs.row(i);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
            .map(|(j, _)| j)
            .expect("nonempty");
        if pred == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
