//! Two-layer ReLU embedding from descriptor space to feature space,
//! trained under a point-to-point regression loss plus a relational loss
//! that aligns pairwise class distances in the two spaces. Gradients are
//! analytic and checked against finite differences in the test suite.

use alloc::string::String;
use alloc::vec::Vec;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{class_means, ClassId, Dataset};
use crate::error::{Error, Result};
use crate::math::sqrt;
use crate::rng::{stream_rng, SeedStream};

/// Parameters of the descriptor-to-feature mapping
/// `f(a) = W2 relu(W1 a + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    /// h x s first-layer weights.
    pub w1: Array2<f64>,
    /// h first-layer biases.
    pub b1: Array1<f64>,
    /// d x h second-layer weights.
    pub w2: Array2<f64>,
    /// d second-layer biases.
    pub b2: Array1<f64>,
}

impl EmbeddingNet {
    /// Glorot-uniform weights, zero biases, drawn from the seeded
    /// initialization stream.
    pub fn init(
        descriptor_dim: usize,
        hidden_dim: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let sample_layer = |rows: usize, cols: usize, rng: &mut dyn rand::RngCore| {
            let limit = sqrt(6.0 / (rows + cols) as f64);
            let dist = Uniform::new_inclusive(-limit, limit);
            let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
        };
        EmbeddingNet {
            w1: sample_layer(hidden_dim, descriptor_dim, rng),
            b1: Array1::zeros(hidden_dim),
            w2: sample_layer(feature_dim, hidden_dim, rng),
            b2: Array1::zeros(feature_dim),
        }
    }

    pub fn descriptor_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// Maps a descriptor to feature space.
    pub fn forward(&self, a: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if a.len() != self.descriptor_dim() {
            return Err(Error::DimensionMismatch {
                context: "forward input",
                expected: self.descriptor_dim(),
                found: a.len(),
            });
        }
        Ok(self.forward_parts(a).2)
    }

    /// Forward pass keeping the pre-activation and hidden activation for
    /// backpropagation.
    fn forward_parts(&self, a: ArrayView1<'_, f64>) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
        let z = self.w1.dot(&a) + &self.b1;
        let r = z.mapv(|v| if v > 0.0 { v } else { 0.0 });
        let out = self.w2.dot(&r) + &self.b2;
        (z, r, out)
    }

    /// Embeds each row of `descriptors`.
    pub fn forward_rows(&self, descriptors: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((descriptors.nrows(), self.feature_dim()));
        for (i, row) in descriptors.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&self.forward(row)?);
        }
        Ok(out)
    }
}

/// Training hyperparameters. The optimizer constants are exposed here
/// because the choice of optimizer is ours, not prescribed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight-decay coefficient on W1 and W2 (biases excluded).
    pub lambda_r: f64,
    /// Weight of the relational loss.
    pub rho: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_dim: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_r: 1e-3,
            rho: 0.1,
            learning_rate: 1e-4,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            hidden_dim: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let reject = |cond: bool, reason: &str| -> Result<()> {
            if cond {
                Err(Error::InvalidConfig {
                    reason: String::from(reason),
                })
            } else {
                Ok(())
            }
        };
        reject(!(self.lambda_r >= 0.0), "lambda_r must be >= 0")?;
        reject(!(self.rho >= 0.0), "rho must be >= 0")?;
        reject(!(self.learning_rate > 0.0), "learning_rate must be > 0")?;
        reject(self.batch_size == 0, "batch_size must be positive")?;
        reject(self.hidden_dim == 0, "hidden_dim must be positive")?;
        Ok(())
    }
}

/// Symmetric matrix of squared pairwise distances between class
/// representatives, with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalMatrix {
    pub values: Array2<f64>,
    pub class_order: Vec<ClassId>,
}

impl RelationalMatrix {
    /// Squared pairwise Euclidean distances between the rows of `points`.
    pub fn from_points(points: ArrayView2<'_, f64>, class_order: &[ClassId]) -> Result<Self> {
        if points.nrows() != class_order.len() {
            return Err(Error::DimensionMismatch {
                context: "relational matrix class order",
                expected: points.nrows(),
                found: class_order.len(),
            });
        }
        let n = points.nrows();
        let mut values = Array2::zeros((n, n));
        for u in 0..n {
            for v in u + 1..n {
                let d2: f64 = points
                    .row(u)
                    .iter()
                    .zip(points.row(v).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                values[[u, v]] = d2;
                values[[v, u]] = d2;
            }
        }
        Ok(RelationalMatrix {
            values,
            class_order: class_order.to_vec(),
        })
    }
}

/// Mean squared point-to-point error of the batch plus weight decay:
/// `(1/B) sum ||f(a_i) - phi_i||^2 + lambda_r (||W1||_F^2 + ||W2||_F^2)`.
pub fn pointwise_loss(
    net: &EmbeddingNet,
    batch_descriptors: ArrayView2<'_, f64>,
    batch_targets: ArrayView2<'_, f64>,
    lambda_r: f64,
) -> Result<f64> {
    check_batch(net, batch_descriptors, batch_targets)?;
    let b = batch_descriptors.nrows();
    let mut data = 0.0;
    for i in 0..b {
        let out = net.forward(batch_descriptors.row(i))?;
        data += out
            .iter()
            .zip(batch_targets.row(i).iter())
            .map(|(o, t)| (o - t) * (o - t))
            .sum::<f64>();
    }
    Ok(data / b as f64 + lambda_r * weight_square_sum(net))
}

fn weight_square_sum(net: &EmbeddingNet) -> f64 {
    net.w1.iter().map(|w| w * w).sum::<f64>() + net.w2.iter().map(|w| w * w).sum::<f64>()
}

fn check_batch(
    net: &EmbeddingNet,
    descriptors: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
) -> Result<()> {
    if descriptors.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if descriptors.nrows() != targets.nrows() {
        return Err(Error::DimensionMismatch {
            context: "batch row counts",
            expected: descriptors.nrows(),
            found: targets.nrows(),
        });
    }
    if descriptors.ncols() != net.descriptor_dim() {
        return Err(Error::DimensionMismatch {
            context: "batch descriptor dimension",
            expected: net.descriptor_dim(),
            found: descriptors.ncols(),
        });
    }
    if targets.ncols() != net.feature_dim() {
        return Err(Error::DimensionMismatch {
            context: "batch target dimension",
            expected: net.feature_dim(),
            found: targets.ncols(),
        });
    }
    Ok(())
}

/// Builds the descriptor-side and feature-side relational matrices: the
/// former from the current embeddings of the seen descriptors, the latter
/// from the (fixed) seen class means.
pub fn relational_matrices(
    net: &EmbeddingNet,
    seen_descriptors: ArrayView2<'_, f64>,
    seen_means: ArrayView2<'_, f64>,
    class_order: &[ClassId],
) -> Result<(RelationalMatrix, RelationalMatrix)> {
    if seen_descriptors.nrows() != seen_means.nrows() {
        return Err(Error::DimensionMismatch {
            context: "seen class count",
            expected: seen_descriptors.nrows(),
            found: seen_means.nrows(),
        });
    }
    let embedded = net.forward_rows(seen_descriptors)?;
    let rel_embedded = RelationalMatrix::from_points(embedded.view(), class_order)?;
    let rel_means = RelationalMatrix::from_points(seen_means, class_order)?;
    Ok((rel_embedded, rel_means))
}

/// Squared Frobenius distance between the two relational matrices,
/// summed over all entries (both symmetric halves).
pub fn relational_loss(a: &RelationalMatrix, b: &RelationalMatrix) -> Result<f64> {
    if a.values.dim() != b.values.dim() || a.class_order != b.class_order {
        return Err(Error::DimensionMismatch {
            context: "relational matrix shapes",
            expected: a.values.nrows(),
            found: b.values.nrows(),
        });
    }
    Ok(a.values
        .iter()
        .zip(b.values.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Combined objective: pointwise loss plus `rho` times the relational
/// loss. With `rho = 0` this equals the pointwise loss bit for bit.
pub fn total_loss(
    net: &EmbeddingNet,
    batch_descriptors: ArrayView2<'_, f64>,
    batch_targets: ArrayView2<'_, f64>,
    rel_embedded: &RelationalMatrix,
    rel_means: &RelationalMatrix,
    cfg: &TrainConfig,
) -> Result<f64> {
    let l1 = pointwise_loss(net, batch_descriptors, batch_targets, cfg.lambda_r)?;
    let l2 = relational_loss(rel_embedded, rel_means)?;
    Ok(l1 + cfg.rho * l2)
}

/// Gradient of the total loss with respect to every net parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Gradients {
    fn zeros_like(net: &EmbeddingNet) -> Self {
        Gradients {
            w1: Array2::zeros(net.w1.dim()),
            b1: Array1::zeros(net.b1.len()),
            w2: Array2::zeros(net.w2.dim()),
            b2: Array1::zeros(net.b2.len()),
        }
    }
}

/// Analytic gradient of `pointwise + rho * relational` w.r.t. all
/// parameters. The relational term flows through the embeddings of every
/// seen descriptor. The ReLU subgradient at exactly zero is zero.
pub fn gradients(
    net: &EmbeddingNet,
    batch_descriptors: ArrayView2<'_, f64>,
    batch_targets: ArrayView2<'_, f64>,
    seen_descriptors: ArrayView2<'_, f64>,
    seen_means: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<Gradients> {
    let class_order: Vec<ClassId> = (0..seen_means.nrows() as ClassId).collect();
    let rel_means = RelationalMatrix::from_points(seen_means, &class_order)?;
    gradients_with_rel_means(
        net,
        batch_descriptors,
        batch_targets,
        seen_descriptors,
        &rel_means,
        cfg,
    )
}

fn gradients_with_rel_means(
    net: &EmbeddingNet,
    batch_descriptors: ArrayView2<'_, f64>,
    batch_targets: ArrayView2<'_, f64>,
    seen_descriptors: ArrayView2<'_, f64>,
    rel_means: &RelationalMatrix,
    cfg: &TrainConfig,
) -> Result<Gradients> {
    check_batch(net, batch_descriptors, batch_targets)?;
    let mut grad = Gradients::zeros_like(net);
    let b = batch_descriptors.nrows();

    // Point-to-point term, averaged over the batch.
    let scale = 2.0 / b as f64;
    for i in 0..b {
        let a = batch_descriptors.row(i);
        let (z, r, out) = net.forward_parts(a);
        let delta_out: Array1<f64> =
            (&out - &batch_targets.row(i)).mapv(|v| v * scale);
        accumulate_backward(net, &mut grad, a, &z, &r, &delta_out);
    }

    // Weight decay on W1 and W2 only.
    if cfg.lambda_r != 0.0 {
        grad.w1.scaled_add(2.0 * cfg.lambda_r, &net.w1);
        grad.w2.scaled_add(2.0 * cfg.lambda_r, &net.w2);
    }

    // Relational term through the embeddings of all seen descriptors.
    if cfg.rho != 0.0 {
        let n_s = seen_descriptors.nrows();
        if n_s != rel_means.values.nrows() {
            return Err(Error::DimensionMismatch {
                context: "seen class count",
                expected: rel_means.values.nrows(),
                found: n_s,
            });
        }
        let mut parts = Vec::with_capacity(n_s);
        for u in 0..n_s {
            parts.push(net.forward_parts(seen_descriptors.row(u)));
        }
        let embedded: Vec<&Array1<f64>> = parts.iter().map(|(_, _, e)| e).collect();
        let order: Vec<ClassId> = (0..n_s as ClassId).collect();
        let mut points = Array2::zeros((n_s, net.feature_dim()));
        for (u, e) in embedded.iter().enumerate() {
            points.row_mut(u).assign(e);
        }
        let rel_embedded = RelationalMatrix::from_points(points.view(), &order)?;
        let mismatch = &rel_embedded.values - &rel_means.values;
        for u in 0..n_s {
            let mut delta_out = Array1::zeros(net.feature_dim());
            for v in 0..n_s {
                if v == u {
                    continue;
                }
                let w = 8.0 * mismatch[[u, v]];
                for j in 0..net.feature_dim() {
                    delta_out[j] += w * (embedded[u][j] - embedded[v][j]);
                }
            }
            delta_out.mapv_inplace(|v| v * cfg.rho);
            let (z, r, _) = &parts[u];
            accumulate_backward(net, &mut grad, seen_descriptors.row(u), z, r, &delta_out);
        }
    }

    Ok(grad)
}

/// Backpropagates an output-side delta through the two layers,
/// accumulating into `grad`.
fn accumulate_backward(
    net: &EmbeddingNet,
    grad: &mut Gradients,
    input: ArrayView1<'_, f64>,
    z: &Array1<f64>,
    r: &Array1<f64>,
    delta_out: &Array1<f64>,
) {
    let h = net.hidden_dim();
    let d = net.feature_dim();
    for i in 0..d {
        let di = delta_out[i];
        if di != 0.0 {
            for j in 0..h {
                grad.w2[[i, j]] += di * r[j];
            }
        }
        grad.b2[i] += di;
    }
    for j in 0..h {
        if z[j] > 0.0 {
            let mut delta_z = 0.0;
            for i in 0..d {
                delta_z += net.w2[[i, j]] * delta_out[i];
            }
            if delta_z != 0.0 {
                for (kk, a) in input.iter().enumerate() {
                    grad.w1[[j, kk]] += delta_z * a;
                }
            }
            grad.b1[j] += delta_z;
        }
    }
}

/// One recorded loss evaluation over the full training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}

/// Result of a training run: the final net and the loss recorded before
/// training (epoch 0) and after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub net: EmbeddingNet,
    pub trace: Vec<EpochLoss>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: alloc::vec![0.0; len],
            v: alloc::vec![0.0; len],
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], t: u64, cfg: &TrainConfig) {
        let bc1 = 1.0 - libm::pow(cfg.adam_beta1, t as f64);
        let bc2 = 1.0 - libm::pow(cfg.adam_beta2, t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.adam_beta1 * self.m[i] + (1.0 - cfg.adam_beta1) * g;
            self.v[i] = cfg.adam_beta2 * self.v[i] + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= cfg.learning_rate * m_hat / (sqrt(v_hat) + cfg.adam_epsilon);
        }
    }
}

/// Trains an embedding net on the seen classes of `ds`.
///
/// The feature-side relational matrix is computed once from the full
/// training set; the descriptor-side one is refreshed every step. Batches
/// are drawn by a seeded shuffle each epoch, with the remainder forming a
/// final short batch. Runs with the same seed are bit-identical.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seen = ds.manifest.seen_class_ids.clone();
    if seen.is_empty() {
        return Err(Error::InvalidData {
            reason: String::from("dataset has no seen classes"),
        });
    }
    let seen_descriptors = ds.descriptors_for(&seen)?;
    let seen_means = class_means(ds, &seen)?;
    let rel_means = RelationalMatrix::from_points(seen_means.view(), &seen)?;

    let n = ds.n_samples();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let (d, s) = (ds.feature_dim(), ds.descriptor_dim());

    // Per-sample descriptor rows, resolved once.
    let mut sample_descriptors = Array2::zeros((n, s));
    for (i, &label) in ds.labels.iter().enumerate() {
        let row = ds.descriptor_row(label).ok_or(Error::InvalidData {
            reason: alloc::format!("row {i}: label {label} is not in the manifest class list"),
        })?;
        sample_descriptors.row_mut(i).assign(&row);
    }

    let mut init_rng = stream_rng(cfg.seed, SeedStream::Init);
    let mut net = EmbeddingNet::init(s, cfg.hidden_dim, d, &mut init_rng);
    let mut batch_rng = stream_rng(cfg.seed, SeedStream::Batching);

    let mut adam_w1 = Adam::new(net.w1.len());
    let mut adam_b1 = Adam::new(net.b1.len());
    let mut adam_w2 = Adam::new(net.w2.len());
    let mut adam_b2 = Adam::new(net.b2.len());
    let mut t: u64 = 0;

    let full_losses = |net: &EmbeddingNet| -> Result<EpochLoss> {
        let l1 = pointwise_loss(
            net,
            sample_descriptors.view(),
            ds.features.view(),
            cfg.lambda_r,
        )?;
        let l2 = if cfg.rho != 0.0 {
            let embedded = net.forward_rows(seen_descriptors.view())?;
            let rel_embedded = RelationalMatrix::from_points(embedded.view(), &seen)?;
            relational_loss(&rel_embedded, &rel_means)?
        } else {
            0.0
        };
        Ok(EpochLoss {
            epoch: 0,
            l1,
            l2,
            total: l1 + cfg.rho * l2,
        })
    };

    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let initial = full_losses(&net)?;
    if !initial.total.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }
    trace.push(initial);

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        // Fisher-Yates from the batching stream.
        for i in (1..n).rev() {
            let j = batch_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch_desc = Array2::zeros((chunk.len(), s));
            let mut batch_targ = Array2::zeros((chunk.len(), d));
            for (r, &idx) in chunk.iter().enumerate() {
                batch_desc.row_mut(r).assign(&sample_descriptors.row(idx));
                batch_targ.row_mut(r).assign(&ds.features.row(idx));
            }
            let grad = gradients_with_rel_means(
                &net,
                batch_desc.view(),
                batch_targ.view(),
                seen_descriptors.view(),
                &rel_means,
                cfg,
            )?;
            t += 1;
            adam_w1.step(
                net.w1.as_slice_mut().expect("contiguous"),
                grad.w1.as_slice().expect("contiguous"),
                t,
                cfg,
            );
            adam_b1.step(
                net.b1.as_slice_mut().expect("contiguous"),
                grad.b1.as_slice().expect("contiguous"),
                t,
                cfg,
            );
            adam_w2.step(
                net.w2.as_slice_mut().expect("contiguous"),
                grad.w2.as_slice().expect("contiguous"),
                t,
                cfg,
            );
            adam_b2.step(
                net.b2.as_slice_mut().expect("contiguous"),
                grad.b2.as_slice().expect("contiguous"),
                t,
                cfg,
            );
        }
        let mut losses = full_losses(&net)?;
        losses.epoch = epoch;
        if !losses.total.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        trace.push(losses);
    }

    Ok(TrainOutcome { net, trace })
}
