//! Calibrated nearest-prototype classification and evaluation metrics:
//! class-wise accuracies for the conventional and generalized settings,
//! their harmonic mean, and hubness measured as the skewness of the
//! 1-nearest-neighbor histogram.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::data::{ClassId, Dataset, SampleId};
use crate::error::{Error, Result};
use crate::math::sqrt;

/// Class prototypes in feature space with a seen/unseen flag per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub prototypes: Array2<f64>,
    pub class_ids: Vec<ClassId>,
    pub seen_mask: Vec<bool>,
}

impl PrototypeSet {
    pub fn new(prototypes: Array2<f64>, class_ids: Vec<ClassId>, seen_mask: Vec<bool>) -> Result<Self> {
        if class_ids.len() != prototypes.nrows() || seen_mask.len() != prototypes.nrows() {
            return Err(Error::DimensionMismatch {
                context: "prototype metadata length",
                expected: prototypes.nrows(),
                found: class_ids.len().min(seen_mask.len()),
            });
        }
        for (i, &c) in class_ids.iter().enumerate() {
            if class_ids[..i].contains(&c) {
                return Err(Error::InvalidData {
                    reason: format!("duplicate prototype class id {c}"),
                });
            }
        }
        Ok(PrototypeSet {
            prototypes,
            class_ids,
            seen_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    /// The subset of unseen-class prototypes, in original order.
    pub fn restrict_unseen(&self) -> PrototypeSet {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| !self.seen_mask[i]).collect();
        let mut prototypes = Array2::zeros((keep.len(), self.prototypes.ncols()));
        for (r, &i) in keep.iter().enumerate() {
            prototypes.row_mut(r).assign(&self.prototypes.row(i));
        }
        PrototypeSet {
            prototypes,
            class_ids: keep.iter().map(|&i| self.class_ids[i]).collect(),
            seen_mask: keep.iter().map(|_| false).collect(),
        }
    }
}

/// Scaled-calibration parameter: seen-prototype distances are multiplied
/// by `gamma` before the nearest-neighbor comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationConfig {
    pub gamma: f64,
}

impl CalibrationConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidConfig {
                reason: String::from("gamma must be > 0"),
            });
        }
        Ok(CalibrationConfig { gamma })
    }

    pub fn identity() -> Self {
        CalibrationConfig { gamma: 1.0 }
    }
}

/// Index of the prototype minimizing the calibrated distance; exact ties
/// go to the lowest class id.
fn nearest_index(x: ArrayView1<'_, f64>, p: &PrototypeSet, gamma: f64) -> Result<(usize, f64)> {
    if p.is_empty() {
        return Err(Error::EmptyPrototypes);
    }
    if x.len() != p.prototypes.ncols() {
        return Err(Error::DimensionMismatch {
            context: "query dimension",
            expected: p.prototypes.ncols(),
            found: x.len(),
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for i in 0..p.len() {
        let d2: f64 = x
            .iter()
            .zip(p.prototypes.row(i).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        // Gamma multiplies the unsquared Euclidean distance of seen rows.
        let mut dist = sqrt(d2);
        if p.seen_mask[i] {
            dist *= gamma;
        }
        let replace = match best {
            None => true,
            Some((bi, bd)) => dist < bd || (dist == bd && p.class_ids[i] < p.class_ids[bi]),
        };
        if replace {
            best = Some((i, dist));
        }
    }
    Ok(best.expect("prototype set is non-empty"))
}

/// Calibrated 1-nearest-neighbor prediction over the full prototype set.
pub fn predict(x: ArrayView1<'_, f64>, p: &PrototypeSet, cal: &CalibrationConfig) -> Result<ClassId> {
    nearest_index(x, p, cal.gamma).map(|(i, _)| p.class_ids[i])
}

/// Plain 1-nearest-neighbor over the given prototypes (callers restrict
/// the set to unseen rows for the conventional setting).
pub fn predict_conventional(x: ArrayView1<'_, f64>, p: &PrototypeSet) -> Result<ClassId> {
    nearest_index(x, p, 1.0).map(|(i, _)| p.class_ids[i])
}

/// Per-class fraction of correct predictions plus their unweighted mean.
/// Classes from `classes` with no samples are excluded and reported as
/// warnings.
pub fn classwise_accuracy(
    pairs: &[(ClassId, ClassId)],
    classes: &[ClassId],
) -> (BTreeMap<ClassId, f64>, f64, Vec<String>) {
    let mut per_class = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0usize;
    for &class in classes {
        let mut total = 0usize;
        let mut correct = 0usize;
        for &(truth, pred) in pairs {
            if truth == class {
                total += 1;
                if pred == class {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            warnings.push(format!("class {class} has no samples; excluded from the mean"));
            continue;
        }
        let acc = correct as f64 / total as f64;
        per_class.insert(class, acc);
        sum += acc;
        counted += 1;
    }
    let mean = if counted == 0 { 0.0 } else { sum / counted as f64 };
    (per_class, mean, warnings)
}

/// `2ab / (a + b)`, defined as zero when both accuracies are zero.
pub fn harmonic_mean(acc_seen: f64, acc_unseen: f64) -> f64 {
    if acc_seen + acc_unseen == 0.0 {
        0.0
    } else {
        2.0 * acc_seen * acc_unseen / (acc_seen + acc_unseen)
    }
}

/// Counts, per prototype, how many test points select it as calibrated
/// nearest neighbor. The counts sum to the number of test points.
pub fn n1_histogram(
    test_points: ArrayView2<'_, f64>,
    p: &PrototypeSet,
    cal: &CalibrationConfig,
) -> Result<Vec<u64>> {
    let mut counts = alloc::vec![0u64; p.len()];
    for row in test_points.rows() {
        let (i, _) = nearest_index(row, p, cal.gamma)?;
        counts[i] += 1;
    }
    Ok(counts)
}

/// Population skewness `g1 = m3 / m2^(3/2)` of the histogram counts;
/// zero when the variance vanishes.
pub fn hubness_skewness(hist: &[u64]) -> f64 {
    if hist.is_empty() {
        return 0.0;
    }
    let n = hist.len() as f64;
    let mean = hist.iter().map(|&c| c as f64).sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for &c in hist {
        let dev = c as f64 - mean;
        m2 += dev * dev;
        m3 += dev * dev * dev;
    }
    m2 /= n;
    m3 /= n;
    if m2 == 0.0 {
        0.0
    } else {
        m3 / (m2 * sqrt(m2))
    }
}

/// One generalized-setting prediction, dumped for offline recomputation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub sample_id: SampleId,
    pub true_class: ClassId,
    pub pred_class: ClassId,
    /// Calibrated distance of the winning prototype.
    pub distance: f64,
}

/// Evaluation summary across both test settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub acc_per_class: BTreeMap<ClassId, f64>,
    pub acc_seen: f64,
    pub acc_unseen: f64,
    pub harmonic_mean: f64,
    /// Conventional setting: unseen test samples against unseen
    /// prototypes only, uncalibrated.
    pub acc_conventional: f64,
    /// Skewness of the nearest-neighbor histogram of unseen prototypes
    /// under generalized-setting queries from unseen classes.
    pub hubness_skewness: f64,
    pub warnings: Vec<String>,
    pub config_echo: BTreeMap<String, String>,
}

/// Runs the full evaluation protocol and returns the report along with
/// the raw generalized-setting predictions.
pub fn evaluate_with_predictions(
    test: &Dataset,
    p: &PrototypeSet,
    cal: &CalibrationConfig,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    if p.is_empty() {
        return Err(Error::EmptyPrototypes);
    }
    for (row, &label) in test.labels.iter().enumerate() {
        if p.class_index(label).is_none() {
            return Err(Error::InvalidData {
                reason: format!("row {row}: no prototype for test class {label}"),
            });
        }
    }

    // Generalized setting: every test point against the full set.
    let mut records = Vec::with_capacity(test.n_samples());
    for (row, &label) in test.labels.iter().enumerate() {
        let (idx, dist) = nearest_index(test.features.row(row), p, cal.gamma)?;
        records.push(PredictionRecord {
            sample_id: test.sample_ids[row],
            true_class: label,
            pred_class: p.class_ids[idx],
            distance: dist,
        });
    }
    let pairs: Vec<(ClassId, ClassId)> =
        records.iter().map(|r| (r.true_class, r.pred_class)).collect();

    let seen_classes: Vec<ClassId> = p
        .class_ids
        .iter()
        .zip(&p.seen_mask)
        .filter(|(_, &m)| m)
        .map(|(&c, _)| c)
        .collect();
    let unseen_classes: Vec<ClassId> = p
        .class_ids
        .iter()
        .zip(&p.seen_mask)
        .filter(|(_, &m)| !m)
        .map(|(&c, _)| c)
        .collect();

    let mut warnings = Vec::new();
    let (per_seen, acc_seen, mut w) = classwise_accuracy(&pairs, &seen_classes);
    warnings.append(&mut w);
    let (per_unseen, acc_unseen, mut w) = classwise_accuracy(&pairs, &unseen_classes);
    warnings.append(&mut w);
    let mut acc_per_class = per_seen;
    acc_per_class.extend(per_unseen);

    // Conventional setting: unseen test samples, unseen prototypes only.
    let unseen_rows = test.rows_with_labels(&unseen_classes);
    let restricted = p.restrict_unseen();
    let acc_conventional = if restricted.is_empty() || unseen_rows.is_empty() {
        warnings.push(String::from(
            "conventional accuracy undefined: no unseen prototypes or no unseen test samples",
        ));
        0.0
    } else {
        let mut conv_pairs = Vec::with_capacity(unseen_rows.len());
        for &row in &unseen_rows {
            let pred = predict_conventional(test.features.row(row), &restricted)?;
            conv_pairs.push((test.labels[row], pred));
        }
        let (_, acc, mut w) = classwise_accuracy(&conv_pairs, &unseen_classes);
        warnings.append(&mut w);
        acc
    };

    // Hubness: unseen-class queries in the generalized setting, histogram
    // restricted to unseen prototypes as search solutions.
    let hubness = if unseen_rows.is_empty() {
        0.0
    } else {
        let mut queries = Array2::zeros((unseen_rows.len(), test.feature_dim()));
        for (r, &row) in unseen_rows.iter().enumerate() {
            queries.row_mut(r).assign(&test.features.row(row));
        }
        let hist = n1_histogram(queries.view(), p, cal)?;
        let unseen_hist: Vec<u64> = (0..p.len())
            .filter(|&i| !p.seen_mask[i])
            .map(|i| hist[i])
            .collect();
        hubness_skewness(&unseen_hist)
    };

    let mut config_echo = BTreeMap::new();
    config_echo.insert(String::from("gamma"), format_f64(cal.gamma));

    let report = EvalReport {
        acc_per_class,
        acc_seen,
        acc_unseen,
        harmonic_mean: harmonic_mean(acc_seen, acc_unseen),
        acc_conventional,
        hubness_skewness: hubness,
        warnings,
        config_echo,
    };
    Ok((report, records))
}

/// [`evaluate_with_predictions`] without the prediction dump.
pub fn evaluate(test: &Dataset, p: &PrototypeSet, cal: &CalibrationConfig) -> Result<EvalReport> {
    evaluate_with_predictions(test, p, cal).map(|(report, _)| report)
}

fn format_f64(v: f64) -> String {
    let mut s = String::new();
    core::fmt::write(&mut s, format_args!("{v}")).expect("formatting f64 cannot fail");
    s
}
