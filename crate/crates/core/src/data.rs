//! Synthetic datasets, label-noise injection, and stochastic views.
//!
//! The benchmark is Gaussian blobs: one isotropic unit-variance cluster per
//! class, class means pairwise at least `separation` apart. All generators
//! are pure functions of their inputs and a 64-bit seed; datasets are
//! immutable once built.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, CoreError, Result};
use crate::seed::rng_from;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
}

/// The default desk-scale benchmark (training split). Small enough for
/// minutes-scale runs, separated enough that a clean linear probe clears
/// 95%, hard enough that label noise hurts.
impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            per_class: 250,
            dim: 16,
            separation: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    true_labels: Vec<usize>,
    observed_labels: Vec<usize>,
    noise_flags: Vec<bool>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Build a dataset; `noise_flags` are always recomputed from the two
    /// label vectors so the flag invariant cannot be violated.
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        true_labels: Vec<usize>,
        observed_labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = true_labels.len();
        if dim == 0 || num_classes < 2 {
            return Err(invalid("dim must be positive and num_classes >= 2"));
        }
        if features.len() != n * dim || observed_labels.len() != n {
            return Err(invalid("feature/label lengths disagree"));
        }
        if true_labels
            .iter()
            .chain(observed_labels.iter())
            .any(|&l| l >= num_classes)
        {
            return Err(invalid("class index out of range"));
        }
        let noise_flags = true_labels
            .iter()
            .zip(&observed_labels)
            .map(|(t, o)| t != o)
            .collect();
        Ok(LabeledDataset {
            features,
            dim,
            true_labels,
            observed_labels,
            noise_flags,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed_labels
    }

    pub fn noise_flags(&self) -> &[bool] {
        &self.noise_flags
    }

    pub fn noise_fraction(&self) -> f64 {
        self.noise_flags.iter().filter(|&&f| f).count() as f64 / self.len() as f64
    }

    /// All features as an [N, D] tensor.
    pub fn features_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.features.clone()).expect("consistent")
    }

    /// Gather the given rows into a [B, D] tensor.
    pub fn gather_features(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.feature_row(i));
        }
        Tensor::new(vec![idx.len(), self.dim], data).expect("consistent")
    }

    /// One-hot observed labels for the given rows, [B, C].
    pub fn observed_onehot(&self, idx: &[usize]) -> Tensor {
        let c = self.num_classes;
        let mut data = vec![0.0; idx.len() * c];
        for (row, &i) in idx.iter().enumerate() {
            data[row * c + self.observed_labels[i]] = 1.0;
        }
        Tensor::new(vec![idx.len(), c], data).expect("consistent")
    }

    fn with_observed(&self, observed: Vec<usize>) -> Result<Self> {
        LabeledDataset::new(
            self.features.clone(),
            self.dim,
            self.true_labels.clone(),
            observed,
            self.num_classes,
        )
    }

    // ---- CSV codec ------------------------------------------------------

    /// `# classes=C`, a header row, then one row per sample.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# classes={}\n", self.num_classes);
        let cols: Vec<String> = (0..self.dim).map(|j| format!("feat_{j}")).collect();
        out.push_str(&cols.join(","));
        out.push_str(",true_label,observed_label\n");
        for i in 0..self.len() {
            let feats: Vec<String> = self.feature_row(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&feats.join(","));
            out.push_str(&format!(
                ",{},{}\n",
                self.true_labels[i], self.observed_labels[i]
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, meta) = lines.next().ok_or(CoreError::Parse {
            line: 1,
            msg: String::from("empty dataset file"),
        })?;
        let num_classes = meta
            .strip_prefix("# classes=")
            .and_then(|s| s.trim().parse::<usize>().ok())
            .ok_or(CoreError::Parse {
                line: 1,
                msg: String::from("expected `# classes=C`"),
            })?;
        let (_, header) = lines.next().ok_or(CoreError::Parse {
            line: 2,
            msg: String::from("missing header row"),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3
            || cols[cols.len() - 2] != "true_label"
            || cols[cols.len() - 1] != "observed_label"
        {
            return Err(CoreError::Parse {
                line: 2,
                msg: String::from("bad header row"),
            });
        }
        let dim = cols.len() - 2;
        let mut features = Vec::new();
        let mut true_labels = Vec::new();
        let mut observed_labels = Vec::new();
        for (lineno0, row) in lines {
            let line = lineno0 + 1;
            if row.is_empty() {
                continue;
            }
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(CoreError::Parse {
                    line,
                    msg: format!("expected {} fields, got {}", dim + 2, fields.len()),
                });
            }
            for f in &fields[..dim] {
                features.push(f.parse::<f64>().map_err(|_| CoreError::Parse {
                    line,
                    msg: format!("bad float `{f}`"),
                })?);
            }
            for (slot, f) in [(&mut true_labels, fields[dim]), (&mut observed_labels, fields[dim + 1])]
            {
                let l = f.parse::<usize>().map_err(|_| CoreError::Parse {
                    line,
                    msg: format!("bad label `{f}`"),
                })?;
                if l >= num_classes {
                    return Err(CoreError::Parse {
                        line,
                        msg: format!("label {l} out of range for {num_classes} classes"),
                    });
                }
                slot.push(l);
            }
        }
        LabeledDataset::new(features, dim, true_labels, observed_labels, num_classes)
    }
}

/// Class means used by [`gen_gaussian_blobs`]: a scaled one-hot frame
/// (pairwise distance exactly `separation`, up to rounding) passed through
/// a seeded random rotation, so different seeds give genuinely different
/// blob layouts while preserving all pairwise distances.
pub fn blob_means(spec: &DatasetSpec, seed: u64) -> Result<Vec<Vec<f64>>> {
    if spec.num_classes < 2 || spec.per_class < 1 {
        return Err(invalid("need num_classes >= 2 and per_class >= 1"));
    }
    if !(spec.separation > 0.0) {
        return Err(invalid("separation must be positive"));
    }
    if spec.dim < spec.num_classes {
        return Err(invalid(
            "dim must be >= num_classes to place equidistant class means",
        ));
    }
    // tiny margin keeps distances >= separation after rotation rounding
    let r = spec.separation / libm::sqrt(2.0) * (1.0 + 1e-9);
    let mut means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| {
            let mut m = vec![0.0; spec.dim];
            m[c] = r;
            m
        })
        .collect();
    let mut rng = rng_from(seed);
    for _ in 0..4 * spec.dim {
        let i = rng.random_range(0..spec.dim);
        let mut j = rng.random_range(0..spec.dim - 1);
        if j >= i {
            j += 1;
        }
        let theta: f64 = rng.random_range(0.0..core::f64::consts::TAU);
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        for m in means.iter_mut() {
            let (a, b) = (m[i], m[j]);
            m[i] = c * a - s * b;
            m[j] = s * a + c * b;
        }
    }
    Ok(means)
}

/// Isotropic unit-variance Gaussian blobs, one per class, clean labels.
pub fn gen_gaussian_blobs(spec: &DatasetSpec, seed: u64) -> Result<LabeledDataset> {
    let means = blob_means(spec, seed)?;
    let mut rng = rng_from(crate::seed::derive_seed(seed, "blob-samples"));
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let n = spec.num_classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &mu in mean {
                features.push(mu + normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(features, spec.dim, labels.clone(), labels, spec.num_classes)
}

/// Train and test splits drawn from the same blob layout: identical class
/// means, disjoint sample streams. The test split is always clean and is
/// what every reported accuracy is measured on.
pub fn gen_train_test(
    spec: &DatasetSpec,
    test_per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if test_per_class == 0 {
        return Err(invalid("test_per_class must be positive"));
    }
    let means = blob_means(spec, seed)?;
    let mut rng = rng_from(crate::seed::derive_seed(seed, "blob-samples"));
    let normal = Normal::new(0.0, 1.0).expect("valid");
    let mut train_feats = Vec::with_capacity(spec.num_classes * spec.per_class * spec.dim);
    let mut train_labels = Vec::new();
    let mut test_feats = Vec::with_capacity(spec.num_classes * test_per_class * spec.dim);
    let mut test_labels = Vec::new();
    for (c, mean) in means.iter().enumerate() {
        for k in 0..spec.per_class + test_per_class {
            let (feats, labels) = if k < spec.per_class {
                (&mut train_feats, &mut train_labels)
            } else {
                (&mut test_feats, &mut test_labels)
            };
            for &mu in mean {
                feats.push(mu + normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    let train = LabeledDataset::new(
        train_feats,
        spec.dim,
        train_labels.clone(),
        train_labels,
        spec.num_classes,
    )?;
    let test = LabeledDataset::new(
        test_feats,
        spec.dim,
        test_labels.clone(),
        test_labels,
        spec.num_classes,
    )?;
    Ok((train, test))
}

/// Redraw the observed labels of exactly `round(rate * N)` samples,
/// selected uniformly without replacement, uniformly over all classes
/// (the true label is allowed, so the realized mislabel fraction
/// concentrates on `rate * (1 - 1/C)`).
pub fn inject_symmetric_noise(
    ds: &LabeledDataset,
    rate: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid("noise rate must be in [0, 1]"));
    }
    let n = ds.len();
    let m = libm::round(rate * n as f64) as usize;
    let mut rng = rng_from(seed);
    let mut observed = ds.observed_labels.clone();
    let picked = rand::seq::index::sample(&mut rng, n, m);
    for i in picked {
        observed[i] = rng.random_range(0..ds.num_classes);
    }
    ds.with_observed(observed)
}

/// Each sample independently flips to `flip_map[true_label]` with
/// probability `rate`.
pub fn inject_asymmetric_noise(
    ds: &LabeledDataset,
    rate: f64,
    flip_map: &[usize],
    seed: u64,
) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(invalid("noise rate must be in [0, 1]"));
    }
    if flip_map.len() != ds.num_classes {
        return Err(invalid("flip_map must cover every class"));
    }
    for (c, &t) in flip_map.iter().enumerate() {
        if t >= ds.num_classes {
            return Err(invalid("flip_map target out of range"));
        }
        if t == c {
            return Err(invalid(
                "flip_map must not map a class to itself (would silently reduce the rate)",
            ));
        }
    }
    let mut rng = rng_from(seed);
    let mut observed = ds.observed_labels.clone();
    for (i, o) in observed.iter_mut().enumerate() {
        if rng.random::<f64>() < rate {
            *o = flip_map[ds.true_labels[i]];
        }
    }
    ds.with_observed(observed)
}

/// The default asymmetric confusion: class c flips to (c+1) mod C.
pub fn cyclic_flip_map(num_classes: usize) -> Vec<usize> {
    (0..num_classes).map(|c| (c + 1) % num_classes).collect()
}

/// Vector-data stand-ins for image augmentations: Gaussian jitter, a random
/// global scale, and random coordinate masking.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub jitter_sigma: f64,
    pub scale_range: (f64, f64),
    pub mask_fraction: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            jitter_sigma: 0.5,
            scale_range: (0.9, 1.1),
            mask_fraction: 0.125,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.jitter_sigma < 0.0 {
            return Err(invalid("jitter_sigma must be nonnegative"));
        }
        let (lo, hi) = self.scale_range;
        if !(0.0 < lo && lo <= hi) {
            return Err(invalid("scale_range must satisfy 0 < lo <= hi"));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(invalid("mask_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    /// The identity augmentation (both views equal the input).
    pub fn disabled() -> Self {
        AugmentationSpec {
            jitter_sigma: 0.0,
            scale_range: (1.0, 1.0),
            mask_fraction: 0.0,
        }
    }
}

/// One stochastic view: mask(scale(x + jitter)).
pub fn augment_with(x: &[f64], spec: &AugmentationSpec, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, spec.jitter_sigma).expect("validated");
    let mut v: Vec<f64> = x.iter().map(|&xi| xi + normal.sample(rng)).collect();
    let (lo, hi) = spec.scale_range;
    let s: f64 = rng.random_range(lo..=hi);
    for vi in v.iter_mut() {
        *vi *= s;
    }
    if spec.mask_fraction > 0.0 {
        for vi in v.iter_mut() {
            if rng.random::<f64>() < spec.mask_fraction {
                *vi = 0.0;
            }
        }
    }
    v
}

/// Two independently augmented views of one sample.
pub fn make_views(x: &[f64], spec: &AugmentationSpec, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    spec.validate()?;
    let mut rng = rng_from(seed);
    let v1 = augment_with(x, spec, &mut rng);
    let v2 = augment_with(x, spec, &mut rng);
    Ok((v1, v2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            num_classes: 2,
            per_class: 1,
            dim: 2,
            separation: 10.0,
        }
    }

    #[test]
    fn blobs_have_clean_labels() {
        let ds = gen_gaussian_blobs(&small_spec(), 7).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.noise_flags().iter().all(|&f| !f));
    }

    #[test]
    fn blobs_deterministic_under_seed() {
        let a = gen_gaussian_blobs(&DatasetSpec::default(), 42).unwrap();
        let b = gen_gaussian_blobs(&DatasetSpec::default(), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn blob_means_respect_separation() {
        for seed in [0u64, 3, 9] {
            let spec = DatasetSpec::default();
            let means = blob_means(&spec, seed).unwrap();
            for i in 0..means.len() {
                for j in 0..i {
                    let d2: f64 = means[i]
                        .iter()
                        .zip(&means[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    assert!(
                        libm::sqrt(d2) >= spec.separation,
                        "seed {seed}: classes {i},{j} at distance {}",
                        libm::sqrt(d2)
                    );
                }
            }
        }
    }

    #[test]
    fn blob_means_depend_on_seed() {
        let spec = DatasetSpec::default();
        assert_ne!(blob_means(&spec, 1).unwrap(), blob_means(&spec, 2).unwrap());
    }

    #[test]
    fn nearest_centroid_accuracy_on_wide_separation() {
        // Monte-Carlo: ~10k samples at separation 10, unit sigma.
        let spec = DatasetSpec {
            num_classes: 4,
            per_class: 2500,
            dim: 8,
            separation: 10.0,
        };
        let ds = gen_gaussian_blobs(&spec, 123).unwrap();
        // empirical centroids from true labels
        let mut centroids = vec![vec![0.0; spec.dim]; spec.num_classes];
        let mut counts = vec![0usize; spec.num_classes];
        for i in 0..ds.len() {
            let c = ds.true_labels()[i];
            counts[c] += 1;
            for (acc, v) in centroids[c].iter_mut().zip(ds.feature_row(i)) {
                *acc += v;
            }
        }
        for (c, cen) in centroids.iter_mut().enumerate() {
            for v in cen.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        let mut correct = 0;
        for i in 0..ds.len() {
            let x = ds.feature_row(i);
            let best = (0..spec.num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&centroids[a]).map(|(v, m)| (v - m) * (v - m)).sum();
                    let db: f64 = x.iter().zip(&centroids[b]).map(|(v, m)| (v - m) * (v - m)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == ds.true_labels()[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn symmetric_noise_rate_zero_is_identity() {
        let ds = gen_gaussian_blobs(&DatasetSpec::default(), 1).unwrap();
        let noisy = inject_symmetric_noise(&ds, 0.0, 2).unwrap();
        assert_eq!(noisy, ds);
    }

    #[test]
    fn symmetric_noise_flag_fraction_matches_theory() {
        // E[flagged] = r(1 - 1/C); Monte-Carlo over seeds, 3-sigma band.
        let spec = DatasetSpec {
            num_classes: 10,
            per_class: 1000,
            dim: 10,
            separation: 6.0,
        };
        let ds = gen_gaussian_blobs(&spec, 5).unwrap();
        let n = ds.len() as f64;
        let r = 0.9;
        let q = 1.0 - 1.0 / spec.num_classes as f64;
        let seeds = 10;
        let mean: f64 = (0..seeds)
            .map(|s| inject_symmetric_noise(&ds, r, s).unwrap().noise_fraction())
            .sum::<f64>()
            / seeds as f64;
        let m = libm::round(r * n);
        let sigma = libm::sqrt(m * q * (1.0 - q)) / n / libm::sqrt(seeds as f64);
        let expect = r * q;
        assert!(
            (mean - expect).abs() <= 3.0 * sigma,
            "mean {mean} vs {expect} (3s = {})",
            3.0 * sigma
        );
    }

    #[test]
    fn symmetric_full_noise_two_classes_flags_half() {
        let spec = DatasetSpec {
            num_classes: 2,
            per_class: 5000,
            dim: 4,
            separation: 6.0,
        };
        let ds = gen_gaussian_blobs(&spec, 8).unwrap();
        let n = ds.len() as f64;
        let seeds = 10;
        let mean: f64 = (0..seeds)
            .map(|s| inject_symmetric_noise(&ds, 1.0, s).unwrap().noise_fraction())
            .sum::<f64>()
            / seeds as f64;
        let sigma = libm::sqrt(n * 0.25) / n / libm::sqrt(seeds as f64);
        assert!((mean - 0.5).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn symmetric_noise_touches_exactly_round_rn_samples() {
        let ds = gen_gaussian_blobs(&DatasetSpec::default(), 3).unwrap();
        let r = 0.37;
        let noisy = inject_symmetric_noise(&ds, r, 11).unwrap();
        let changed = ds
            .observed_labels()
            .iter()
            .zip(noisy.observed_labels())
            .filter(|(a, b)| a != b)
            .count();
        let m = libm::round(r * ds.len() as f64) as usize;
        // redrawn labels can coincide with the original, so changed <= m
        assert!(changed <= m);
        assert!(changed > m / 2, "suspiciously few changes: {changed} of {m}");
        assert_eq!(noisy.true_labels(), ds.true_labels());
        assert_eq!(noisy.features_tensor(), ds.features_tensor());
    }

    #[test]
    fn asymmetric_noise_rate_matches_theory() {
        let spec = DatasetSpec {
            num_classes: 5,
            per_class: 2000,
            dim: 8,
            separation: 6.0,
        };
        let ds = gen_gaussian_blobs(&spec, 4).unwrap();
        let n = ds.len() as f64;
        let r = 0.4;
        let map = cyclic_flip_map(spec.num_classes);
        let seeds = 10;
        let mean: f64 = (0..seeds)
            .map(|s| {
                inject_asymmetric_noise(&ds, r, &map, s)
                    .unwrap()
                    .noise_fraction()
            })
            .sum::<f64>()
            / seeds as f64;
        let sigma = libm::sqrt(n * r * (1.0 - r)) / n / libm::sqrt(seeds as f64);
        assert!((mean - r).abs() <= 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn asymmetric_extremes() {
        let spec = DatasetSpec {
            num_classes: 2,
            per_class: 50,
            dim: 2,
            separation: 6.0,
        };
        let ds = gen_gaussian_blobs(&spec, 4).unwrap();
        let map = cyclic_flip_map(2);
        assert_eq!(inject_asymmetric_noise(&ds, 0.0, &map, 1).unwrap(), ds);
        let full = inject_asymmetric_noise(&ds, 1.0, &map, 1).unwrap();
        assert!(full.noise_flags().iter().all(|&f| f));
    }

    #[test]
    fn self_mapping_flip_map_rejected() {
        let ds = gen_gaussian_blobs(&small_spec(), 7).unwrap();
        let err = inject_asymmetric_noise(&ds, 0.5, &[0, 0], 1).unwrap_err();
        assert!(format!("{err}").contains("itself"));
    }

    #[test]
    fn csv_round_trip() {
        let ds = gen_gaussian_blobs(&DatasetSpec::default(), 21).unwrap();
        let noisy = inject_symmetric_noise(&ds, 0.5, 22).unwrap();
        let back = LabeledDataset::from_csv(&noisy.to_csv()).unwrap();
        assert_eq!(noisy, back);
    }

    #[test]
    fn csv_rejects_out_of_range_label() {
        let text = "# classes=2\nfeat_0,true_label,observed_label\n0.5,0,2\n";
        let err = LabeledDataset::from_csv(text).unwrap_err();
        assert_eq!(
            err,
            CoreError::Parse {
                line: 3,
                msg: String::from("label 2 out of range for 2 classes")
            }
        );
    }

    #[test]
    fn csv_rejects_truncated_row_with_line_number() {
        let text = "# classes=2\nfeat_0,feat_1,true_label,observed_label\n0.5,0.1,0,1\n0.5,0\n";
        match LabeledDataset::from_csv(text).unwrap_err() {
            CoreError::Parse { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn degenerate_augmentation_is_identity() {
        let x = [1.0, -2.0, 3.0];
        let (v1, v2) = make_views(&x, &AugmentationSpec::disabled(), 9).unwrap();
        assert_eq!(v1, x.to_vec());
        assert_eq!(v2, x.to_vec());
    }

    #[test]
    fn jittered_views_differ() {
        let x = [1.0, -2.0, 3.0];
        let spec = AugmentationSpec {
            jitter_sigma: 0.3,
            scale_range: (1.0, 1.0),
            mask_fraction: 0.0,
        };
        let (v1, v2) = make_views(&x, &spec, 9).unwrap();
        assert_ne!(v1, v2);
        assert_ne!(v1, x.to_vec());
    }

    #[test]
    fn jitter_std_matches_sigma() {
        // per-coordinate std over 10k draws within 5% of sigma
        let sigma = 0.7;
        let spec = AugmentationSpec {
            jitter_sigma: sigma,
            scale_range: (1.0, 1.0),
            mask_fraction: 0.0,
        };
        let x = [0.0; 4];
        let mut rng = rng_from(13);
        let trials = 10_000;
        let mut sums = [0.0; 4];
        let mut sumsq = [0.0; 4];
        for _ in 0..trials {
            let v = augment_with(&x, &spec, &mut rng);
            for j in 0..4 {
                sums[j] += v[j];
                sumsq[j] += v[j] * v[j];
            }
        }
        for j in 0..4 {
            let mean = sums[j] / trials as f64;
            let var = sumsq[j] / trials as f64 - mean * mean;
            let std = libm::sqrt(var);
            assert!(
                (std - sigma).abs() / sigma < 0.05,
                "coord {j}: std {std} vs sigma {sigma}"
            );
        }
    }
}
