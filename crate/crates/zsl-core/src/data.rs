//! Dataset model: precomputed features, per-class semantic descriptors,
//! and a seen/unseen class split. Includes validation and a deterministic
//! synthetic generator for known-answer tests.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array1, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, SeedStream};

/// Integer class identifier.
pub type ClassId = i64;
/// Integer sample identifier.
pub type SampleId = i64;

/// Dataset metadata: dimensions, class inventory, split, and the relative
/// paths of the backing files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub feature_dim: usize,
    pub descriptor_dim: usize,
    pub class_ids: Vec<ClassId>,
    pub seen_class_ids: Vec<ClassId>,
    pub unseen_class_ids: Vec<ClassId>,
    pub feature_file: String,
    pub descriptor_file: String,
}

impl Manifest {
    /// Position of `class` in the canonical class order.
    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn is_seen(&self, class: ClassId) -> bool {
        self.seen_class_ids.contains(&class)
    }
}

/// An in-memory dataset. Immutable after construction; descriptor rows
/// follow `manifest.class_ids` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub sample_ids: Vec<SampleId>,
    /// N x d feature matrix.
    pub features: Array2<f64>,
    /// N class labels.
    pub labels: Vec<ClassId>,
    /// |class_ids| x s descriptor matrix.
    pub descriptors: Array2<f64>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.ncols()
    }

    /// Descriptor row for `class`, if the class is listed in the manifest.
    pub fn descriptor_row(&self, class: ClassId) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.manifest.class_index(class).map(|i| self.descriptors.row(i))
    }

    /// Descriptor matrix restricted to `classes`, rows in argument order.
    pub fn descriptors_for(&self, classes: &[ClassId]) -> Result<Array2<f64>> {
        let s = self.descriptor_dim();
        let mut out = Array2::zeros((classes.len(), s));
        for (r, &c) in classes.iter().enumerate() {
            let row = self.descriptor_row(c).ok_or(Error::InvalidData {
                reason: format!("class {c} not in manifest"),
            })?;
            out.row_mut(r).assign(&row);
        }
        Ok(out)
    }

    /// Row indices of samples labeled with any class in `classes`.
    pub fn rows_with_labels(&self, classes: &[ClassId]) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect()
    }
}

/// A single validation violation. Findings are data, not failures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FindingKind {
    DuplicateClass,
    SplitOverlap,
    SplitIncomplete,
    UnknownLabel,
    ShapeMismatch,
    NonFinite,
}

fn finding(kind: FindingKind, message: String) -> Finding {
    Finding { kind, message }
}

/// Checks every dataset invariant, returning one finding per violation.
/// An empty list means the dataset is well-formed.
pub fn validate_dataset(ds: &Dataset) -> Vec<Finding> {
    let mut out = Vec::new();
    let m = &ds.manifest;

    for (i, &c) in m.class_ids.iter().enumerate() {
        if m.class_ids[..i].contains(&c) {
            out.push(finding(
                FindingKind::DuplicateClass,
                format!("class id {c} appears more than once in the manifest"),
            ));
        }
    }
    for &c in &m.seen_class_ids {
        if m.unseen_class_ids.contains(&c) {
            out.push(finding(
                FindingKind::SplitOverlap,
                format!("class {c} is listed as both seen and unseen"),
            ));
        }
        if !m.class_ids.contains(&c) {
            out.push(finding(
                FindingKind::SplitIncomplete,
                format!("seen class {c} is not in class_ids"),
            ));
        }
    }
    for &c in &m.unseen_class_ids {
        if !m.class_ids.contains(&c) {
            out.push(finding(
                FindingKind::SplitIncomplete,
                format!("unseen class {c} is not in class_ids"),
            ));
        }
    }
    for &c in &m.class_ids {
        if !m.seen_class_ids.contains(&c) && !m.unseen_class_ids.contains(&c) {
            out.push(finding(
                FindingKind::SplitIncomplete,
                format!("class {c} is in neither the seen nor the unseen split"),
            ));
        }
    }

    if ds.features.nrows() != ds.labels.len() {
        out.push(finding(
            FindingKind::ShapeMismatch,
            format!(
                "feature row count {} does not match label count {}",
                ds.features.nrows(),
                ds.labels.len()
            ),
        ));
    }
    if ds.sample_ids.len() != ds.labels.len() {
        out.push(finding(
            FindingKind::ShapeMismatch,
            format!(
                "sample id count {} does not match label count {}",
                ds.sample_ids.len(),
                ds.labels.len()
            ),
        ));
    }
    if ds.features.ncols() != m.feature_dim {
        out.push(finding(
            FindingKind::ShapeMismatch,
            format!(
                "feature dimension {} does not match manifest feature_dim {}",
                ds.features.ncols(),
                m.feature_dim
            ),
        ));
    }
    if ds.descriptors.ncols() != m.descriptor_dim {
        out.push(finding(
            FindingKind::ShapeMismatch,
            format!(
                "descriptor dimension {} does not match manifest descriptor_dim {}",
                ds.descriptors.ncols(),
                m.descriptor_dim
            ),
        ));
    }
    if ds.descriptors.nrows() != m.class_ids.len() {
        out.push(finding(
            FindingKind::ShapeMismatch,
            format!(
                "descriptor row count {} does not match class count {}",
                ds.descriptors.nrows(),
                m.class_ids.len()
            ),
        ));
    }

    for (row, &label) in ds.labels.iter().enumerate() {
        if !m.class_ids.contains(&label) {
            out.push(finding(
                FindingKind::UnknownLabel,
                format!("row {row}: label {label} is not in the manifest class list"),
            ));
        }
    }
    for ((r, c), &v) in ds.features.indexed_iter() {
        if !v.is_finite() {
            out.push(finding(
                FindingKind::NonFinite,
                format!("feature row {r}, column {c}: value {v} is not finite"),
            ));
        }
    }
    for ((r, c), &v) in ds.descriptors.indexed_iter() {
        if !v.is_finite() {
            out.push(finding(
                FindingKind::NonFinite,
                format!("descriptor row {r}, column {c}: value {v} is not finite"),
            ));
        }
    }

    out
}

/// Arithmetic mean of the feature rows of each requested class, rows in
/// argument order. Errors if a requested class has no samples.
pub fn class_means(ds: &Dataset, classes: &[ClassId]) -> Result<Array2<f64>> {
    let d = ds.feature_dim();
    let mut out = Array2::zeros((classes.len(), d));
    for (r, &class) in classes.iter().enumerate() {
        let mut count = 0usize;
        for (i, &label) in ds.labels.iter().enumerate() {
            if label == class {
                let row = ds.features.row(i);
                for j in 0..d {
                    out[[r, j]] += row[j];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyClass { class });
        }
        for j in 0..d {
            out[[r, j]] /= count as f64;
        }
    }
    Ok(out)
}

/// Scales every row of `m` to unit Euclidean norm. Zero rows are left
/// unchanged.
pub fn l2_normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = crate::math::sqrt(row.iter().map(|v| v * v).sum());
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

/// Configuration for the synthetic GZSL generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub descriptor_dim: usize,
    /// Within-class standard deviation of feature coordinates.
    pub cluster_spread: f64,
    /// Standard deviation of additive descriptor noise.
    pub descriptor_noise: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            ("seen_classes", self.seen_classes),
            ("unseen_classes", self.unseen_classes),
            ("samples_per_class", self.samples_per_class),
            ("feature_dim", self.feature_dim),
            ("descriptor_dim", self.descriptor_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig {
                    reason: format!("{name} must be positive"),
                });
            }
        }
        if !(self.cluster_spread >= 0.0) || !(self.descriptor_noise >= 0.0) {
            return Err(Error::InvalidConfig {
                reason: String::from("cluster_spread and descriptor_noise must be >= 0"),
            });
        }
        Ok(())
    }
}

/// Generating parameters behind a synthetic dataset. Class centers and
/// noiseless descriptors are both affine images of a shared low-rank
/// latent code, so the descriptor-to-feature regression has an exact
/// affine solution recoverable from the seen classes alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    /// Latent code per class, |class_ids| x k, manifest order.
    pub latents: Array2<f64>,
    /// d x k map from latent space to feature space.
    pub feature_map: Array2<f64>,
    pub feature_shift: Array1<f64>,
    /// s x k map from latent space to descriptor space.
    pub descriptor_map: Array2<f64>,
    pub descriptor_shift: Array1<f64>,
    /// True class centers, |class_ids| x d, manifest order.
    pub centers: Array2<f64>,
}

impl SyntheticTruth {
    /// Maps descriptor rows back to feature-space centers through the
    /// generating affine maps (least-squares inversion of the descriptor
    /// map). At zero descriptor noise this reproduces `centers` exactly.
    pub fn affine_preimage(&self, descriptors: ArrayView2<'_, f64>) -> Array2<f64> {
        let n = descriptors.nrows();
        let k = self.descriptor_map.ncols();
        let d = self.feature_map.nrows();
        let mut out = Array2::zeros((n, d));
        for r in 0..n {
            let centered: Array1<f64> = (&descriptors.row(r) - &self.descriptor_shift).to_owned();
            let z = lstsq(&self.descriptor_map, &centered, k);
            let center = self.feature_map.dot(&z) + &self.feature_shift;
            out.row_mut(r).assign(&center);
        }
        out
    }
}

// Minimum-norm least squares via normal equations; the latent rank is
// tiny, so plain Gaussian elimination with partial pivoting suffices.
fn lstsq(a: &Array2<f64>, b: &Array1<f64>, k: usize) -> Array1<f64> {
    let ata = a.t().dot(a);
    let atb = a.t().dot(b);
    let mut m = ata;
    let mut rhs = atb;
    for col in 0..k {
        let mut pivot = col;
        for r in col + 1..k {
            if crate::math::abs(m[[r, col]]) > crate::math::abs(m[[pivot, col]]) {
                pivot = r;
            }
        }
        if m[[pivot, col]] == 0.0 {
            continue;
        }
        if pivot != col {
            for j in 0..k {
                m.swap([pivot, j], [col, j]);
            }
            rhs.swap(pivot, col);
        }
        for r in col + 1..k {
            let f = m[[r, col]] / m[[col, col]];
            for j in col..k {
                m[[r, j]] -= f * m[[col, j]];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut z = Array1::zeros(k);
    for col in (0..k).rev() {
        let mut acc = rhs[col];
        for j in col + 1..k {
            acc -= m[[col, j]] * z[j];
        }
        z[col] = if m[[col, col]] != 0.0 { acc / m[[col, col]] } else { 0.0 };
    }
    z
}

/// Deterministic synthetic GZSL data: `train` holds only seen-class
/// samples; `test` holds samples of every class. Same config, same bits.
pub fn synthesize_dataset(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    synthesize_with_truth(cfg).map(|(train, test, _)| (train, test))
}

/// [`synthesize_dataset`] plus the generating parameters, for
/// known-answer tests.
pub fn synthesize_with_truth(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset, SyntheticTruth)> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, SeedStream::Synthesis);
    let mut normal = |scale: f64| -> f64 {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * scale
    };

    let n_classes = cfg.seen_classes + cfg.unseen_classes;
    let (d, s) = (cfg.feature_dim, cfg.descriptor_dim);
    // Latent rank is capped by the seen-class count so the affine
    // descriptor-to-feature relationship is identifiable from seen data.
    let k = cfg
        .seen_classes
        .saturating_sub(1)
        .max(1)
        .min(s)
        .min(d);

    let mut latents = Array2::zeros((n_classes, k));
    for c in 0..n_classes {
        for j in 0..k {
            latents[[c, j]] = normal(1.0);
        }
    }
    let mut feature_map = Array2::zeros((d, k));
    for i in 0..d {
        for j in 0..k {
            feature_map[[i, j]] = normal(1.0);
        }
    }
    let feature_shift = Array1::from_iter((0..d).map(|_| normal(1.0)));
    let mut descriptor_map = Array2::zeros((s, k));
    for i in 0..s {
        for j in 0..k {
            descriptor_map[[i, j]] = normal(1.0);
        }
    }
    let descriptor_shift = Array1::from_iter((0..s).map(|_| normal(1.0)));

    let mut centers = Array2::zeros((n_classes, d));
    for c in 0..n_classes {
        let center = feature_map.dot(&latents.row(c)) + &feature_shift;
        centers.row_mut(c).assign(&center);
    }
    let mut descriptors = Array2::zeros((n_classes, s));
    for c in 0..n_classes {
        let clean = descriptor_map.dot(&latents.row(c)) + &descriptor_shift;
        for j in 0..s {
            descriptors[[c, j]] = clean[j] + normal(cfg.descriptor_noise);
        }
    }

    let class_ids: Vec<ClassId> = (0..n_classes as ClassId).collect();
    let seen_ids: Vec<ClassId> = class_ids[..cfg.seen_classes].to_vec();
    let unseen_ids: Vec<ClassId> = class_ids[cfg.seen_classes..].to_vec();

    let per = cfg.samples_per_class;
    let mut sample_features = |classes: &[ClassId], next_id: &mut SampleId| {
        let n = classes.len() * per;
        let mut feats = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        let mut row = 0;
        for &class in classes {
            let center = centers.row(class as usize);
            for _ in 0..per {
                for j in 0..d {
                    feats[[row, j]] = center[j] + normal(cfg.cluster_spread);
                }
                labels.push(class);
                ids.push(*next_id);
                *next_id += 1;
                row += 1;
            }
        }
        (feats, labels, ids)
    };

    let mut next_id: SampleId = 0;
    let (train_feats, train_labels, train_ids) = sample_features(&seen_ids, &mut next_id);
    let (test_feats, test_labels, test_ids) = sample_features(&class_ids, &mut next_id);

    let manifest_for = |suffix: &str, feature_file: String| Manifest {
        name: format!("synthetic-{}-{suffix}", cfg.seed),
        feature_dim: d,
        descriptor_dim: s,
        class_ids: class_ids.clone(),
        seen_class_ids: seen_ids.clone(),
        unseen_class_ids: unseen_ids.clone(),
        feature_file,
        descriptor_file: String::from("descriptors.csv"),
    };

    let train = Dataset {
        manifest: manifest_for("train", String::from("features_train.csv")),
        sample_ids: train_ids,
        features: train_feats,
        labels: train_labels,
        descriptors: descriptors.clone(),
    };
    let test = Dataset {
        manifest: manifest_for("test", String::from("features_test.csv")),
        sample_ids: test_ids,
        features: test_feats,
        labels: test_labels,
        descriptors,
    };
    let truth = SyntheticTruth {
        latents,
        feature_map,
        feature_shift,
        descriptor_map,
        descriptor_shift,
        centers,
    };
    Ok((train, test, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny_dataset() -> Dataset {
        let manifest = Manifest {
            name: String::from("tiny"),
            feature_dim: 2,
            descriptor_dim: 2,
            class_ids: vec![1, 2],
            seen_class_ids: vec![1],
            unseen_class_ids: vec![2],
            feature_file: String::from("f.csv"),
            descriptor_file: String::from("a.csv"),
        };
        Dataset {
            manifest,
            sample_ids: vec![0, 1, 2],
            features: Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 3.0, 2.0, 5.0, 5.0]).unwrap(),
            labels: vec![1, 1, 2],
            descriptors: Array2::from_shape_vec((2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
        }
    }

    #[test]
    fn well_formed_dataset_has_no_findings() {
        assert!(validate_dataset(&tiny_dataset()).is_empty());
    }

    #[test]
    fn nan_feature_yields_exactly_one_finding_with_location() {
        let mut ds = tiny_dataset();
        ds.features[[1, 0]] = f64::NAN;
        let findings = validate_dataset(&ds);
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, FindingKind::NonFinite);
        assert!(findings[0].message.contains("row 1"));
        assert!(findings[0].message.contains("column 0"));
    }

    #[test]
    fn duplicate_class_id_yields_one_finding() {
        let mut ds = tiny_dataset();
        ds.manifest.class_ids = vec![1, 2, 1];
        // Keep shapes consistent so only the duplicate is reported.
        ds.descriptors =
            Array2::from_shape_vec((3, 2), vec![0.1, 0.2, 0.3, 0.4, 0.1, 0.2]).unwrap();
        let findings = validate_dataset(&ds);
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, FindingKind::DuplicateClass);
    }

    #[test]
    fn unknown_label_names_the_offending_row() {
        let mut ds = tiny_dataset();
        ds.labels[2] = 9;
        let findings = validate_dataset(&ds);
        assert_eq!(findings.len(), 1);
        assert_eq!(findings[0].kind, FindingKind::UnknownLabel);
        assert!(findings[0].message.contains("row 2"));
        assert!(findings[0].message.contains("label 9"));
    }

    #[test]
    fn class_means_matches_hand_arithmetic() {
        let ds = tiny_dataset();
        let means = class_means(&ds, &[1]).unwrap();
        assert_eq!(means[[0, 0]], 2.0);
        assert_eq!(means[[0, 1]], 1.0);
    }

    #[test]
    fn single_sample_class_mean_is_that_sample() {
        let ds = tiny_dataset();
        let means = class_means(&ds, &[2]).unwrap();
        assert_eq!(means[[0, 0]], 5.0);
        assert_eq!(means[[0, 1]], 5.0);
    }

    #[test]
    fn empty_class_is_an_error() {
        let ds = tiny_dataset();
        assert_eq!(
            class_means(&ds, &[7]).unwrap_err(),
            Error::EmptyClass { class: 7 }
        );
    }

    #[test]
    fn class_means_concatenates_over_disjoint_subsets() {
        let ds = tiny_dataset();
        let joint = class_means(&ds, &[1, 2]).unwrap();
        let a = class_means(&ds, &[1]).unwrap();
        let b = class_means(&ds, &[2]).unwrap();
        assert_eq!(joint.row(0), a.row(0));
        assert_eq!(joint.row(1), b.row(0));
    }

    fn desk_cfg() -> SyntheticConfig {
        SyntheticConfig {
            seen_classes: 3,
            unseen_classes: 2,
            samples_per_class: 5,
            feature_dim: 6,
            descriptor_dim: 4,
            cluster_spread: 0.1,
            descriptor_noise: 0.0,
            seed: 11,
        }
    }

    #[test]
    fn synthesis_is_deterministic() {
        let (tr1, te1) = synthesize_dataset(&desk_cfg()).unwrap();
        let (tr2, te2) = synthesize_dataset(&desk_cfg()).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(te1, te2);
    }

    #[test]
    fn synthesis_counts_match_config() {
        let (train, test) = synthesize_dataset(&desk_cfg()).unwrap();
        assert_eq!(train.n_samples(), 15);
        assert_eq!(test.n_samples(), 25);
        let unseen_rows = test.rows_with_labels(&test.manifest.unseen_class_ids);
        assert_eq!(unseen_rows.len(), 10);
        assert!(validate_dataset(&train).is_empty());
        assert!(validate_dataset(&test).is_empty());
    }

    #[test]
    fn zero_spread_puts_every_sample_on_its_center() {
        let mut cfg = desk_cfg();
        cfg.cluster_spread = 0.0;
        let (train, _, truth) = synthesize_with_truth(&cfg).unwrap();
        for (i, &label) in train.labels.iter().enumerate() {
            let center = truth.centers.row(label as usize);
            for j in 0..cfg.feature_dim {
                assert_eq!(train.features[[i, j]], center[j]);
            }
        }
    }

    #[test]
    fn zero_noise_means_equal_affine_preimage_of_descriptors() {
        let mut cfg = desk_cfg();
        cfg.cluster_spread = 0.0;
        let (train, test, truth) = synthesize_with_truth(&cfg).unwrap();
        let means = class_means(&train, &train.manifest.seen_class_ids).unwrap();
        let seen_desc = train
            .descriptors_for(&train.manifest.seen_class_ids)
            .unwrap();
        let preimage = truth.affine_preimage(seen_desc.view());
        for r in 0..means.nrows() {
            for c in 0..means.ncols() {
                assert!((means[[r, c]] - preimage[[r, c]]).abs() < 1e-12);
            }
        }
        // Also exact for unseen classes: the latent rank is identifiable.
        let all_pre = truth.affine_preimage(test.descriptors.view());
        for r in 0..truth.centers.nrows() {
            for c in 0..truth.centers.ncols() {
                assert!((truth.centers[[r, c]] - all_pre[[r, c]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn l2_normalize_rows_leaves_zero_rows_alone() {
        let mut m = Array2::from_shape_vec((2, 2), vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        l2_normalize_rows(&mut m);
        assert!((m[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((m[[0, 1]] - 0.8).abs() < 1e-15);
        assert_eq!(m[[1, 0]], 0.0);
    }
}
