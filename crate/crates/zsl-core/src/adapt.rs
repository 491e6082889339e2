//! Test-time domain adaptation: find a correspondence between the mapped
//! descriptors of unseen classes and the unlabeled test features by
//! conditional-gradient (Frank-Wolfe) minimization over the
//! transportation polytope, then rebuild each class descriptor from the
//! features assigned to it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::data::{ClassId, SampleId};
use crate::error::{Error, Result};
use crate::math::sqrt;
use crate::transport::{solve_transportation, Marginals};

/// Mapping from unseen class id to the descriptor-row indices belonging
/// to it. Ordered, and must partition the row set.
pub type Groups = BTreeMap<ClassId, Vec<usize>>;

/// Doubly constrained correspondence variable: entries are nonnegative,
/// rows sum to one, columns sum to `rows/cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    pub values: Array2<f64>,
    /// Unseen class id of each row.
    pub row_classes: Vec<ClassId>,
    /// Test sample id of each column.
    pub col_sample_ids: Vec<SampleId>,
}

impl CorrespondenceMatrix {
    /// Largest deviation from the marginal constraints; tests hold this
    /// below 1e-9 for every iterate.
    pub fn feasibility_error(&self) -> f64 {
        let (n, o) = self.values.dim();
        let col_target = n as f64 / o as f64;
        let mut err = 0.0f64;
        for i in 0..n {
            err = err.max(crate::math::abs(self.values.row(i).sum() - 1.0));
        }
        for j in 0..o {
            err = err.max(crate::math::abs(self.values.column(j).sum() - col_target));
        }
        for &v in self.values.iter() {
            if v < 0.0 {
                err = err.max(-v);
            }
        }
        err
    }
}

/// Configuration of the adaptation solve.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Weight of the group-lasso term.
    pub lambda_g: f64,
    pub max_iters: usize,
    /// Stop once the duality gap falls to this value. `None` uses
    /// `1e-6 x` the initial objective.
    pub gap_tol: Option<f64>,
    pub groups: Groups,
}

impl AdaptConfig {
    /// Default setup: one descriptor row per class.
    pub fn singleton(row_classes: &[ClassId]) -> Self {
        let mut groups = Groups::new();
        for (idx, &c) in row_classes.iter().enumerate() {
            groups.insert(c, alloc::vec![idx]);
        }
        AdaptConfig {
            lambda_g: 0.0,
            max_iters: 500,
            gap_tol: None,
            groups,
        }
    }

    fn validate(&self, n_rows: usize) -> Result<()> {
        let mut covered = alloc::vec![false; n_rows];
        for (class, rows) in &self.groups {
            for &r in rows {
                if r >= n_rows {
                    return Err(Error::InvalidConfig {
                        reason: format!("group for class {class} references row {r} out of range"),
                    });
                }
                if covered[r] {
                    return Err(Error::InvalidConfig {
                        reason: format!("row {r} appears in more than one group"),
                    });
                }
                covered[r] = true;
            }
        }
        if let Some(r) = covered.iter().position(|&c| !c) {
            return Err(Error::InvalidConfig {
                reason: format!("row {r} is not covered by any group"),
            });
        }
        if !(self.lambda_g >= 0.0) {
            return Err(Error::InvalidConfig {
                reason: String::from("lambda_g must be >= 0"),
            });
        }
        if let Some(tol) = self.gap_tol {
            if !(tol >= 0.0) {
                return Err(Error::InvalidConfig {
                    reason: String::from("gap_tol must be >= 0"),
                });
            }
        }
        Ok(())
    }
}

/// Objective and duality gap recorded at one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationStat {
    pub iter: usize,
    pub objective: f64,
    pub gap: f64,
}

fn check_shapes(
    correspondence: ArrayView2<'_, f64>,
    test_features: ArrayView2<'_, f64>,
    mapped_descriptors: ArrayView2<'_, f64>,
) -> Result<()> {
    if correspondence.ncols() != test_features.nrows() {
        return Err(Error::DimensionMismatch {
            context: "correspondence columns vs test rows",
            expected: test_features.nrows(),
            found: correspondence.ncols(),
        });
    }
    if correspondence.nrows() != mapped_descriptors.nrows() {
        return Err(Error::DimensionMismatch {
            context: "correspondence rows vs descriptor rows",
            expected: mapped_descriptors.nrows(),
            found: correspondence.nrows(),
        });
    }
    if test_features.ncols() != mapped_descriptors.ncols() {
        return Err(Error::DimensionMismatch {
            context: "feature dimension",
            expected: mapped_descriptors.ncols(),
            found: test_features.ncols(),
        });
    }
    Ok(())
}

/// `||C U - A||_F^2 + lambda_g sum_j sum_c ||[C]_{I_c, j}||_2`.
pub fn adapt_objective(
    correspondence: ArrayView2<'_, f64>,
    test_features: ArrayView2<'_, f64>,
    mapped_descriptors: ArrayView2<'_, f64>,
    lambda_g: f64,
    groups: &Groups,
) -> Result<f64> {
    check_shapes(correspondence, test_features, mapped_descriptors)?;
    let projected = correspondence.dot(&test_features);
    let fit: f64 = projected
        .iter()
        .zip(mapped_descriptors.iter())
        .map(|(p, a)| (p - a) * (p - a))
        .sum();
    if lambda_g == 0.0 {
        return Ok(fit);
    }
    let mut lasso = 0.0;
    for j in 0..correspondence.ncols() {
        for rows in groups.values() {
            let norm2: f64 = rows
                .iter()
                .map(|&r| correspondence[[r, j]] * correspondence[[r, j]])
                .sum();
            lasso += sqrt(norm2);
        }
    }
    Ok(fit + lambda_g * lasso)
}

/// Gradient of [`adapt_objective`] in the correspondence variable. The
/// group-lasso subgradient at a zero block is the zero vector.
pub fn adapt_gradient(
    correspondence: ArrayView2<'_, f64>,
    test_features: ArrayView2<'_, f64>,
    mapped_descriptors: ArrayView2<'_, f64>,
    lambda_g: f64,
    groups: &Groups,
) -> Result<Array2<f64>> {
    check_shapes(correspondence, test_features, mapped_descriptors)?;
    let residual = correspondence.dot(&test_features) - &mapped_descriptors;
    let mut grad = residual.dot(&test_features.t());
    grad.mapv_inplace(|v| 2.0 * v);
    if lambda_g != 0.0 {
        for j in 0..correspondence.ncols() {
            for rows in groups.values() {
                let norm = sqrt(
                    rows.iter()
                        .map(|&r| correspondence[[r, j]] * correspondence[[r, j]])
                        .sum(),
                );
                if norm > 0.0 {
                    for &r in rows {
                        grad[[r, j]] += lambda_g * correspondence[[r, j]] / norm;
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Step size of the k-th conditional gradient step (1-based): `2/(k+2)`.
pub fn step_size(step: usize) -> f64 {
    2.0 / (step + 2) as f64
}

/// Minimizes the adaptation objective over the transportation polytope by
/// conditional gradient, starting from the uniform feasible point
/// `1/cols`. Each iterate is a convex combination of feasible points and
/// stays feasible. Returns the final correspondence and the trace of
/// objective values and duality gaps; the last trace row describes the
/// returned iterate.
pub fn frank_wolfe(
    test_features: ArrayView2<'_, f64>,
    mapped_descriptors: ArrayView2<'_, f64>,
    row_classes: &[ClassId],
    col_sample_ids: &[SampleId],
    cfg: &AdaptConfig,
) -> Result<(CorrespondenceMatrix, Vec<IterationStat>)> {
    let n_rows = mapped_descriptors.nrows();
    let n_cols = test_features.nrows();
    if n_rows == 0 || n_cols == 0 {
        return Err(Error::InvalidConfig {
            reason: String::from("adaptation needs at least one descriptor row and one test row"),
        });
    }
    if row_classes.len() != n_rows {
        return Err(Error::DimensionMismatch {
            context: "row class labels",
            expected: n_rows,
            found: row_classes.len(),
        });
    }
    if col_sample_ids.len() != n_cols {
        return Err(Error::DimensionMismatch {
            context: "column sample ids",
            expected: n_cols,
            found: col_sample_ids.len(),
        });
    }
    cfg.validate(n_rows)?;
    if n_cols < n_rows {
        log::warn!(
            "adaptation has fewer test rows ({n_cols}) than descriptor rows ({n_rows}); \
             the column marginal exceeds one"
        );
    }

    let marginals = Marginals::for_correspondence(n_rows, n_cols)?;
    let mut current = Array2::from_elem((n_rows, n_cols), 1.0 / n_cols as f64);
    let mut trace = Vec::new();
    let mut tol = cfg.gap_tol;
    let mut steps = 0usize;

    loop {
        let objective = adapt_objective(
            current.view(),
            test_features,
            mapped_descriptors,
            cfg.lambda_g,
            &cfg.groups,
        )?;
        if !objective.is_finite() {
            return Err(Error::NonFinite {
                context: "adaptation objective",
            });
        }
        let grad = adapt_gradient(
            current.view(),
            test_features,
            mapped_descriptors,
            cfg.lambda_g,
            &cfg.groups,
        )?;
        let vertex = solve_transportation(grad.view(), &marginals)?;
        let gap: f64 = grad
            .iter()
            .zip(current.iter().zip(vertex.values.iter()))
            .map(|(g, (c, v))| g * (c - v))
            .sum();
        trace.push(IterationStat {
            iter: steps,
            objective,
            gap,
        });
        let tol = *tol.get_or_insert(1e-6 * objective.max(0.0));
        if gap <= tol || steps >= cfg.max_iters {
            break;
        }
        steps += 1;
        let alpha = step_size(steps);
        ndarray::Zip::from(&mut current)
            .and(&vertex.values)
            .for_each(|c, &v| *c += alpha * (v - *c));
    }

    let matrix = CorrespondenceMatrix {
        values: current,
        row_classes: row_classes.to_vec(),
        col_sample_ids: col_sample_ids.to_vec(),
    };
    Ok((matrix, trace))
}

/// Assigns every test sample (column) to the class of the row holding the
/// largest correspondence value; exact ties go to the lowest class id.
pub fn assign_classes(
    correspondence: &CorrespondenceMatrix,
    groups: &Groups,
) -> BTreeMap<SampleId, ClassId> {
    let mut row_class = alloc::vec![ClassId::MAX; correspondence.values.nrows()];
    for (&class, rows) in groups {
        for &r in rows {
            row_class[r] = class;
        }
    }
    let mut out = BTreeMap::new();
    for (j, &sample) in correspondence.col_sample_ids.iter().enumerate() {
        let mut best_value = f64::NEG_INFINITY;
        let mut best_class = ClassId::MAX;
        for (r, &class) in row_class.iter().enumerate() {
            let v = correspondence.values[[r, j]];
            if v > best_value || (v == best_value && class < best_class) {
                best_value = v;
                best_class = class;
            }
        }
        out.insert(sample, best_class);
    }
    out
}

/// Rebuilds one descriptor per class as the mean of the test features
/// assigned to it; classes that received no samples keep their fallback
/// row (the unadapted mapped descriptor).
pub fn adapted_descriptors(
    test_features: ArrayView2<'_, f64>,
    col_sample_ids: &[SampleId],
    assignments: &BTreeMap<SampleId, ClassId>,
    classes: &[ClassId],
    fallback: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if fallback.nrows() != classes.len() {
        return Err(Error::DimensionMismatch {
            context: "fallback rows vs classes",
            expected: classes.len(),
            found: fallback.nrows(),
        });
    }
    if col_sample_ids.len() != test_features.nrows() {
        return Err(Error::DimensionMismatch {
            context: "sample ids vs test rows",
            expected: test_features.nrows(),
            found: col_sample_ids.len(),
        });
    }
    let d = test_features.ncols();
    let mut out = Array2::zeros((classes.len(), d));
    for (r, &class) in classes.iter().enumerate() {
        let mut count = 0usize;
        for (row, &sample) in col_sample_ids.iter().enumerate() {
            if assignments.get(&sample) == Some(&class) {
                for k in 0..d {
                    out[[r, k]] += test_features[[row, k]];
                }
                count += 1;
            }
        }
        if count > 0 {
            for k in 0..d {
                out[[r, k]] /= count as f64;
            }
        } else {
            out.row_mut(r).assign(&fallback.row(r));
        }
    }
    Ok(out)
}

/// Full adaptation outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptResult {
    pub correspondence: CorrespondenceMatrix,
    /// One adapted descriptor per entry of `adapted_classes`.
    pub adapted: Array2<f64>,
    pub adapted_classes: Vec<ClassId>,
    pub assignments: BTreeMap<SampleId, ClassId>,
    pub trace: Vec<IterationStat>,
}

/// Runs the complete adaptation step: conditional gradient, class
/// assignment, and per-class descriptor reconstruction with the mapped
/// descriptors as fallback.
pub fn adapt(
    test_features: ArrayView2<'_, f64>,
    mapped_descriptors: ArrayView2<'_, f64>,
    row_classes: &[ClassId],
    col_sample_ids: &[SampleId],
    cfg: &AdaptConfig,
) -> Result<AdaptResult> {
    let (correspondence, trace) = frank_wolfe(
        test_features,
        mapped_descriptors,
        row_classes,
        col_sample_ids,
        cfg,
    )?;
    let assignments = assign_classes(&correspondence, &cfg.groups);
    let classes: Vec<ClassId> = cfg.groups.keys().copied().collect();
    // Fallback rows follow group order; with singleton groups each class
    // falls back to its own mapped descriptor.
    let mut fallback = Array2::zeros((classes.len(), mapped_descriptors.ncols()));
    for (r, class) in classes.iter().enumerate() {
        let rows = &cfg.groups[class];
        for &src in rows {
            for k in 0..mapped_descriptors.ncols() {
                fallback[[r, k]] += mapped_descriptors[[src, k]] / rows.len() as f64;
            }
        }
    }
    let adapted = adapted_descriptors(
        test_features,
        col_sample_ids,
        &assignments,
        &classes,
        fallback.view(),
    )?;
    Ok(AdaptResult {
        correspondence,
        adapted,
        adapted_classes: classes,
        assignments,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use ndarray::array;

    fn singleton_groups(classes: &[ClassId]) -> Groups {
        let mut g = Groups::new();
        for (i, &c) in classes.iter().enumerate() {
            g.insert(c, vec![i]);
        }
        g
    }

    #[test]
    fn objective_is_zero_at_exact_fit() {
        let c = array![[1.0, 0.0], [0.0, 1.0]];
        let u = array![[2.0, 1.0], [0.0, 3.0]];
        let groups = singleton_groups(&[0, 1]);
        let obj = adapt_objective(c.view(), u.view(), u.view(), 0.0, &groups).unwrap();
        assert_eq!(obj, 0.0);
    }

    #[test]
    fn objective_toy_frobenius_arithmetic() {
        let c = array![[1.0, 0.0], [0.0, 1.0]];
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let a = array![[0.0, 0.0], [0.0, 0.0]];
        let groups = singleton_groups(&[0, 1]);
        let obj = adapt_objective(c.view(), u.view(), a.view(), 0.0, &groups).unwrap();
        assert_eq!(obj, 2.0);
    }

    #[test]
    fn gradient_is_zero_at_stationary_fit() {
        let c = array![[0.5, 0.5], [0.5, 0.5]];
        let u = array![[1.0, 2.0], [1.0, 2.0]];
        let a = c.dot(&u);
        let groups = singleton_groups(&[0, 1]);
        let g = adapt_gradient(c.view(), u.view(), a.view(), 0.0, &groups).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_closed_form_with_identity_features() {
        let c = array![[0.25, 0.75], [0.5, 0.5]];
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let a = Array2::zeros((2, 2));
        let groups = singleton_groups(&[0, 1]);
        let g = adapt_gradient(c.view(), u.view(), a.view(), 0.0, &groups).unwrap();
        for (gv, cv) in g.iter().zip(c.iter()) {
            assert!((gv - 2.0 * cv).abs() < 1e-15);
        }
    }

    #[test]
    fn step_size_sequence_matches_contract() {
        assert_eq!(step_size(1), 2.0 / 3.0);
        assert_eq!(step_size(2), 0.5);
        assert_eq!(step_size(3), 0.4);
    }

    #[test]
    fn stationary_start_exits_at_first_iteration() {
        let u = array![[1.0, 0.0], [3.0, 0.0], [1.0, 2.0], [3.0, 2.0]];
        let n = 2;
        let o = 4;
        let uniform = Array2::from_elem((n, o), 1.0 / o as f64);
        let a = uniform.dot(&u);
        let cfg = AdaptConfig::singleton(&[10, 11]);
        let (c, trace) =
            frank_wolfe(u.view(), a.view(), &[10, 11], &[0, 1, 2, 3], &cfg).unwrap();
        assert_eq!(trace.len(), 1);
        assert!(trace[0].gap.abs() < 1e-12);
        assert_eq!(c.values, uniform);
    }

    #[test]
    fn iterates_stay_feasible_and_objective_converges() {
        let u = array![
            [0.0, 0.1],
            [0.1, 0.0],
            [5.0, 5.1],
            [5.1, 5.0],
        ];
        let a = array![[0.05, 0.05], [5.05, 5.05]];
        let mut cfg = AdaptConfig::singleton(&[3, 4]);
        cfg.max_iters = 200;
        cfg.gap_tol = Some(1e-10);
        let (c, trace) =
            frank_wolfe(u.view(), a.view(), &[3, 4], &[0, 1, 2, 3], &cfg).unwrap();
        assert!(c.feasibility_error() < 1e-9);
        let last = trace.last().unwrap();
        assert!(last.objective < 1e-2, "objective {}", last.objective);
        // Gap at the returned iterate bounds its suboptimality.
        assert!(last.gap >= -1e-12);
    }

    #[test]
    fn assign_classes_takes_column_argmax() {
        let c = CorrespondenceMatrix {
            values: array![[0.9, 0.1], [0.1, 0.9]],
            row_classes: vec![5, 8],
            col_sample_ids: vec![100, 200],
        };
        let groups = singleton_groups(&[5, 8]);
        let got = assign_classes(&c, &groups);
        assert_eq!(got[&100], 5);
        assert_eq!(got[&200], 8);
    }

    #[test]
    fn assign_classes_breaks_ties_by_lowest_class_id() {
        let c = CorrespondenceMatrix {
            values: array![[0.5], [0.5]],
            row_classes: vec![8, 5],
            col_sample_ids: vec![0],
        };
        let groups = singleton_groups(&[8, 5]);
        let got = assign_classes(&c, &groups);
        assert_eq!(got[&0], 5);
    }

    #[test]
    fn assignment_is_invariant_to_positive_scaling() {
        let values = array![[0.3, 0.7, 0.2], [0.7, 0.3, 0.8]];
        let base = CorrespondenceMatrix {
            values: values.clone(),
            row_classes: vec![1, 2],
            col_sample_ids: vec![0, 1, 2],
        };
        let scaled = CorrespondenceMatrix {
            values: values.mapv(|v| 17.5 * v),
            row_classes: vec![1, 2],
            col_sample_ids: vec![0, 1, 2],
        };
        let groups = singleton_groups(&[1, 2]);
        assert_eq!(
            assign_classes(&base, &groups),
            assign_classes(&scaled, &groups)
        );
    }

    #[test]
    fn adapted_descriptors_means_and_fallback() {
        let u = array![[1.0, 1.0], [3.0, 3.0], [10.0, 0.0]];
        let ids = vec![7, 8, 9];
        let mut assignments = BTreeMap::new();
        assignments.insert(7, 1);
        assignments.insert(8, 1);
        assignments.insert(9, 1);
        let fallback = array![[0.0, 0.0], [42.0, 42.0]];
        let out = adapted_descriptors(u.view(), &ids, &assignments, &[1, 2], fallback.view())
            .unwrap();
        // Class 1: mean of all three rows; class 2: untouched fallback.
        assert!((out[[0, 0]] - 14.0 / 3.0).abs() < 1e-12);
        assert_eq!(out.row(1), fallback.row(1));
    }
}
