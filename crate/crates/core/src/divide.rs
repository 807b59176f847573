//! Clean/noisy division: fit a two-component 1-D Gaussian mixture to
//! per-sample losses and threshold the clean posterior at tau.
//!
//! Losses are min-max normalized before the fit so the threshold stays
//! comparable across epochs. Component 0 is always the low-mean (clean)
//! component.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, CoreError, Result};
use crate::math;

pub const DEFAULT_MAX_ITER: usize = 200;
pub const DEFAULT_TOL: f64 = 1e-7;
/// M-step variance floor; prevents delta collapse on near-duplicate losses.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    /// Sorted ascending; index 0 is the clean (low-loss) component.
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood after every EM iteration (for monotonicity checks).
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivideResult {
    /// Posterior probability of the clean component per sample.
    pub w: Vec<f64>,
    pub tau: f64,
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
}

/// Min-max normalize to [0, 1]. All-equal input carries no signal and is
/// rejected.
pub fn normalize_losses(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.len() < 2 {
        return Err(invalid("need at least two loss values"));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("loss vector"));
    }
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Err(CoreError::Degenerate(String::from("degenerate loss vector")));
    }
    Ok(losses.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = (p * (sorted.len() - 1) as f64) as usize;
    sorted[idx]
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * math::ln(core::f64::consts::TAU * var) - math::sq(x - mean) / (2.0 * var)
}

/// EM for a two-component 1-D mixture. Deterministic initialization: the
/// component means seed at the 25th and 75th percentiles, both variances
/// at the global variance, weights at one half.
pub fn fit_gmm2(values: &[f64], max_iter: usize, tol: f64) -> Result<GmmFit> {
    let n = values.len();
    if n < 4 {
        return Err(invalid("need at least 4 values to fit a 2-component GMM"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("gmm input"));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let global_mean = values.iter().sum::<f64>() / n as f64;
    let global_var = (values.iter().map(|v| math::sq(v - global_mean)).sum::<f64>() / n as f64)
        .max(VARIANCE_FLOOR);

    let mut means = [percentile(&sorted, 0.25), percentile(&sorted, 0.75)];
    if means[0] == means[1] {
        // pathological but legal input (single tight cluster); nudge apart
        means[1] = means[0] + math::sqrt(global_var);
    }
    let mut variances = [global_var, global_var];
    let mut weights = [0.5, 0.5];

    let mut resp = alloc::vec![0.0; n]; // responsibility of component 0
    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iter {
        // E-step (log-domain for tail stability), accumulating the LL
        let mut ll = 0.0;
        for (i, &v) in values.iter().enumerate() {
            let l0 = math::ln(weights[0]) + log_normal_pdf(v, means[0], variances[0]);
            let l1 = math::ln(weights[1]) + log_normal_pdf(v, means[1], variances[1]);
            let mx = l0.max(l1);
            let e0 = math::exp(l0 - mx);
            let e1 = math::exp(l1 - mx);
            resp[i] = e0 / (e0 + e1);
            ll += mx + math::ln(e0 + e1);
        }
        trace.push(ll);
        iterations += 1;

        // EM guarantees a non-decreasing likelihood; a real drop means a bug.
        if ll < prev_ll - 1e-9 * (1.0 + prev_ll.abs()) {
            return Err(CoreError::Degenerate(alloc::format!(
                "EM log-likelihood decreased from {prev_ll} to {ll}"
            )));
        }
        if (ll - prev_ll).abs() < tol && prev_ll.is_finite() {
            converged = true;
            break;
        }
        prev_ll = ll;

        // M-step
        for k in 0..2 {
            let mut rsum = 0.0;
            let mut msum = 0.0;
            for (i, &v) in values.iter().enumerate() {
                let r = if k == 0 { resp[i] } else { 1.0 - resp[i] };
                rsum += r;
                msum += r * v;
            }
            if rsum < 1e-12 {
                // component died; leave its parameters, zero its weight
                weights[k] = rsum / n as f64;
                continue;
            }
            let mean = msum / rsum;
            let mut vsum = 0.0;
            for (i, &v) in values.iter().enumerate() {
                let r = if k == 0 { resp[i] } else { 1.0 - resp[i] };
                vsum += r * math::sq(v - mean);
            }
            means[k] = mean;
            variances[k] = (vsum / rsum).max(VARIANCE_FLOOR);
            weights[k] = rsum / n as f64;
        }
        let wsum = weights[0] + weights[1];
        weights[0] /= wsum;
        weights[1] /= wsum;
    }

    // canonical order: component 0 has the lower mean
    if means[0] > means[1] {
        means.swap(0, 1);
        variances.swap(0, 1);
        weights.swap(0, 1);
    }

    Ok(GmmFit {
        means,
        variances,
        weights,
        log_likelihood: *trace.last().expect("at least one iteration"),
        iterations,
        converged,
        log_likelihood_trace: trace,
    })
}

/// Posterior of the clean (low-mean) component for each value.
pub fn posterior_clean(fit: &GmmFit, values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .map(|&v| {
            let l0 = math::ln(fit.weights[0].max(1e-300))
                + log_normal_pdf(v, fit.means[0], fit.variances[0]);
            let l1 = math::ln(fit.weights[1].max(1e-300))
                + log_normal_pdf(v, fit.means[1], fit.variances[1]);
            let mx = l0.max(l1);
            let e0 = math::exp(l0 - mx);
            let e1 = math::exp(l1 - mx);
            e0 / (e0 + e1)
        })
        .collect()
}

/// Threshold the clean posteriors: labeled = { i : w_i >= tau }.
pub fn split(w: &[f64], tau: f64) -> Result<DivideResult> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(invalid("tau must be in (0, 1)"));
    }
    let mut labeled_idx = Vec::new();
    let mut unlabeled_idx = Vec::new();
    for (i, &wi) in w.iter().enumerate() {
        if wi >= tau {
            labeled_idx.push(i);
        } else {
            unlabeled_idx.push(i);
        }
    }
    if labeled_idx.is_empty() {
        return Err(CoreError::EmptyLabeledSet { tau });
    }
    Ok(DivideResult {
        w: w.to_vec(),
        tau,
        labeled_idx,
        unlabeled_idx,
    })
}

/// Normalize losses, fit the mixture, and threshold in one call.
pub fn divide_losses(losses: &[f64], tau: f64) -> Result<(GmmFit, DivideResult)> {
    let norm = normalize_losses(losses)?;
    let fit = fit_gmm2(&norm, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let w = posterior_clean(&fit, &norm);
    let result = split(&w, tau)?;
    Ok((fit, result))
}

/// `index,w_clean,assigned` rows for the divide output file.
pub fn divide_to_csv(result: &DivideResult) -> String {
    let mut out = String::from("index,w_clean,assigned\n");
    for (i, &wi) in result.w.iter().enumerate() {
        let assigned = if wi >= result.tau { "labeled" } else { "unlabeled" };
        out.push_str(&alloc::format!("{i},{wi},{assigned}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn normalize_simple_cases() {
        assert_eq!(normalize_losses(&[1.0, 3.0]).unwrap(), alloc::vec![0.0, 1.0]);
        assert_eq!(
            normalize_losses(&[0.2, 0.4, 0.6]).unwrap(),
            alloc::vec![0.0, 0.5000000000000001, 1.0]
        );
    }

    #[test]
    fn normalize_rejects_degenerate() {
        let err = normalize_losses(&[2.0, 2.0, 2.0]).unwrap_err();
        assert!(alloc::format!("{err}").contains("degenerate loss vector"));
    }

    fn two_cluster_sample(n_each: usize, m0: f64, m1: f64, std: f64, seed: u64) -> (Vec<f64>, Vec<bool>) {
        let mut rng = rng_from(seed);
        let d0 = Normal::new(m0, std).unwrap();
        let d1 = Normal::new(m1, std).unwrap();
        let mut values = Vec::new();
        let mut from_high = Vec::new();
        for _ in 0..n_each {
            values.push(d0.sample(&mut rng));
            from_high.push(false);
        }
        for _ in 0..n_each {
            values.push(d1.sample(&mut rng));
            from_high.push(true);
        }
        (values, from_high)
    }

    #[test]
    fn em_recovers_tight_bimodal_mixture() {
        let (values, _) = two_cluster_sample(500, 0.1, 0.9, 0.001, 3);
        let fit = fit_gmm2(&values, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        assert!((fit.means[0] - 0.1).abs() < 1e-3, "{:?}", fit.means);
        assert!((fit.means[1] - 0.9).abs() < 1e-3, "{:?}", fit.means);
        assert!((fit.weights[0] - 0.5).abs() < 0.02);
        assert!((fit.weights[1] - 0.5).abs() < 0.02);
    }

    #[test]
    fn em_log_likelihood_non_decreasing() {
        let (values, _) = two_cluster_sample(300, 0.2, 0.7, 0.08, 5);
        let fit = fit_gmm2(&values, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        for pair in fit.log_likelihood_trace.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-9 * (1.0 + pair[0].abs()),
                "LL dropped: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        assert!(fit.converged);
    }

    #[test]
    fn single_tight_cluster_engages_variance_floor() {
        let mut rng = rng_from(8);
        let d = Normal::new(0.5, 0.001).unwrap();
        let values: Vec<f64> = (0..200).map(|_| d.sample(&mut rng)).collect();
        let fit = fit_gmm2(&values, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let sigma = libm::sqrt(fit.variances[0].max(fit.variances[1]));
        for m in fit.means {
            assert!(
                (m - 0.5).abs() <= 2.0 * sigma.max(0.001),
                "mean {m} far from cluster"
            );
        }
        assert!(fit.variances.iter().all(|&v| v >= VARIANCE_FLOOR));
    }

    #[test]
    fn posterior_midpoint_is_half() {
        let fit = GmmFit {
            means: [0.2, 0.8],
            variances: [0.01, 0.01],
            weights: [0.5, 0.5],
            log_likelihood: 0.0,
            iterations: 0,
            converged: true,
            log_likelihood_trace: alloc::vec![],
        };
        let w = posterior_clean(&fit, &[0.5]);
        assert!((w[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_far_tail_saturates() {
        let fit = GmmFit {
            means: [0.3, 0.7],
            variances: [0.01, 0.01],
            weights: [0.5, 0.5],
            log_likelihood: 0.0,
            iterations: 0,
            converged: true,
            log_likelihood_trace: alloc::vec![],
        };
        // 10 sigma below the clean mean
        let w = posterior_clean(&fit, &[0.3 - 10.0 * 0.1]);
        assert!(w[0] > 0.999, "{}", w[0]);
    }

    #[test]
    fn posterior_matches_direct_density_oracle() {
        let fit = GmmFit {
            means: [0.25, 0.75],
            variances: [0.02, 0.05],
            weights: [0.6, 0.4],
            log_likelihood: 0.0,
            iterations: 0,
            converged: true,
            log_likelihood_trace: alloc::vec![],
        };
        let values: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let w = posterior_clean(&fit, &values);
        for (i, &v) in values.iter().enumerate() {
            // brute-force densities
            let pdf = |x: f64, m: f64, var: f64| {
                libm::exp(-(x - m) * (x - m) / (2.0 * var))
                    / libm::sqrt(core::f64::consts::TAU * var)
            };
            let p0 = fit.weights[0] * pdf(v, fit.means[0], fit.variances[0]);
            let p1 = fit.weights[1] * pdf(v, fit.means[1], fit.variances[1]);
            let expect = p0 / (p0 + p1);
            assert!((w[i] - expect).abs() <= 1e-12, "at {v}: {} vs {expect}", w[i]);
        }
    }

    #[test]
    fn split_basic_and_monotone() {
        let w = [0.9, 0.01];
        let r = split(&w, 0.03).unwrap();
        assert_eq!(r.labeled_idx, alloc::vec![0]);
        assert_eq!(r.unlabeled_idx, alloc::vec![1]);

        let w: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let low = split(&w, 0.03).unwrap();
        let high = split(&w, 0.5).unwrap();
        for i in &high.labeled_idx {
            assert!(low.labeled_idx.contains(i), "tau monotonicity violated");
        }
    }

    #[test]
    fn split_empty_labeled_advises_lower_tau() {
        let err = split(&[0.0, 0.01], 0.5).unwrap_err();
        assert!(alloc::format!("{err}").contains("lower"));
    }

    #[test]
    fn split_recovers_known_mixture_membership() {
        let (values, from_high) = two_cluster_sample(500, 0.1, 0.9, 0.05, 7);
        let norm = normalize_losses(&values).unwrap();
        let fit = fit_gmm2(&norm, DEFAULT_MAX_ITER, DEFAULT_TOL).unwrap();
        let w = posterior_clean(&fit, &norm);
        let result = split(&w, 0.5).unwrap();
        // labeled should be the low-mean component
        let mut agree = 0;
        for i in 0..values.len() {
            let said_clean = result.labeled_idx.binary_search(&i).is_ok();
            if said_clean == !from_high[i] {
                agree += 1;
            }
        }
        let frac = agree as f64 / values.len() as f64;
        assert!(frac >= 0.99, "component agreement {frac}");
    }

    proptest! {
        #[test]
        fn normalize_is_affine_invariant(
            xs in proptest::collection::vec(-50.0f64..50.0, 3..40),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            prop_assume!(xs.iter().cloned().fold(f64::INFINITY, f64::min)
                < xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            let base = normalize_losses(&xs).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|v| a * v + b).collect();
            let scaled_norm = normalize_losses(&scaled).unwrap();
            for (x, y) in base.iter().zip(&scaled_norm) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn split_is_a_partition(
            w in proptest::collection::vec(0.0f64..1.0, 1..50),
            tau in 0.01f64..0.99,
        ) {
            prop_assume!(w.iter().any(|&v| v >= tau));
            let r = split(&w, tau).unwrap();
            let mut all: Vec<usize> = r.labeled_idx.iter().chain(&r.unlabeled_idx).cloned().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..w.len()).collect::<Vec<_>>());
            for i in &r.labeled_idx {
                prop_assert!(!r.unlabeled_idx.contains(i));
            }
        }
    }
}
