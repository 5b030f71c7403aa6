//! Siamese point-cloud regressor: a shared per-point MLP, column-wise max
//! pooling and a fully connected head, trained with a pairwise spectral loss.

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::geometry::ShapeVector;
use crate::sampler::PointCloudSample;
use crate::seeding::{self, tag};
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint expects {expected} points per sample, got {got}")]
    CheckpointMismatch { expected: usize, got: usize },
    #[error("target '{measure}' has zero variance on the training split")]
    ZeroVariance { measure: &'static str },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: not a checkpoint (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: corrupt checkpoint: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetworkConfig {
    /// Per-point MLP widths, starting at the input width; the last width is
    /// the pooled feature size.
    pub trunk: Vec<usize>,
    /// Head widths, starting at the pooled size and ending at 5.
    pub head: Vec<usize>,
    /// Constant factor applied to coordinates before the first layer.
    pub input_scale: f32,
    /// Appends centroid-relative coordinates to each point.
    #[serde(default)]
    pub centered: bool,
    /// Appends centroid-relative coordinates in the principal-axis frame of
    /// the cloud.
    #[serde(default)]
    pub principal_frame: bool,
}

impl Default for SubnetworkConfig {
    fn default() -> Self {
        Self {
            trunk: vec![3, 64, 128, 1024],
            head: vec![1024, 512, 256, 5],
            input_scale: 0.02,
            centered: false,
            principal_frame: false,
        }
    }
}

impl SubnetworkConfig {
    /// Narrower widths plus the centered and principal-frame channels, for
    /// single-machine CPU training.
    pub fn desk() -> Self {
        Self {
            trunk: vec![9, 64, 128, 256],
            head: vec![256, 128, 64, 5],
            input_scale: 0.02,
            centered: true,
            principal_frame: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.trunk.len() < 2 || self.trunk[0] != self.input_width() {
            return bad("trunk must start at the input width (3 plus 3 per enabled channel) and have at least one layer");
        }
        if self.head.len() < 2 || *self.head.last().unwrap() != ShapeVector::LEN {
            return bad("head must end at width 5 and have at least one layer");
        }
        if self.head[0] != *self.trunk.last().unwrap() {
            return bad("head input width must equal the pooled trunk width");
        }
        if self.trunk.iter().chain(&self.head).any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return bad("input_scale must be positive");
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        3 * (1 + self.centered as usize + self.principal_frame as usize)
    }

    /// `(fan_in, fan_out)` of every dense layer, trunk first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.trunk
            .windows(2)
            .chain(self.head.windows(2))
            .map(|w| (w[0], w[1]))
            .collect()
    }

    pub fn n_trunk_layers(&self) -> usize {
        self.trunk.len() - 1
    }

    /// Weight then bias shape for every layer, in parameter order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims()
            .into_iter()
            .flat_map(|(i, o)| [vec![i, o], vec![1, o]])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 3.0 }
    }
}

/// Weights and biases, `[W0, b0, W1, b1, ...]`; `Wi` is `fan_in x fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: SubnetworkConfig,
    pub params: Vec<Tensor>,
}

impl Model {
    /// He-normal weights, zero biases.
    pub fn init(config: SubnetworkConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seeding::rng_for(seed, &[tag::INIT]);
        let mut params = Vec::new();
        for (fan_in, fan_out) in config.layer_dims() {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let w = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng) as f32).collect();
            params.push(Tensor::from_rows(fan_in, fan_out, w));
            params.push(Tensor::zeros(vec![1, fan_out]));
        }
        Ok(Self { config, params })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape`, as trainable or frozen.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<Var>, ModelError> {
        self.params
            .iter()
            .map(|p| Ok(tape.leaf(p.clone(), trainable)?))
            .collect()
    }
}

/// Per-point input rows: scaled coordinates, then the optional centered and
/// principal-frame channels.
pub fn encode_points(config: &SubnetworkConfig, points: &[f32]) -> Vec<f32> {
    let s = config.input_scale;
    if !config.centered && !config.principal_frame {
        return points.iter().map(|v| v * s).collect();
    }
    // Statistics are accumulated in a canonical order so that row order
    // cannot change their rounding.
    let mut sorted: Vec<[f32; 3]> = points.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
    sorted.sort_by(|a, b| {
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    let n = sorted.len() as f64;
    let mut mean = Vector3::zeros();
    for p in &sorted {
        mean += Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64);
    }
    mean /= n;
    let axes = config.principal_frame.then(|| principal_axes(&sorted, &mean));
    let s64 = s as f64;
    let mut out = Vec::with_capacity(sorted.len() * config.input_width());
    for p in points.chunks_exact(3) {
        out.extend(p.iter().map(|v| v * s));
        let d = Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) - mean;
        if config.centered {
            out.extend(d.iter().map(|v| (v * s64) as f32));
        }
        if let Some(axes) = &axes {
            out.extend((axes.transpose() * d).iter().map(|v| (v * s64) as f32));
        }
    }
    out
}

/// Eigenvectors of the covariance as columns, by decreasing variance, each
/// signed so the third central moment along it is non-negative.
fn principal_axes(sorted: &[[f32; 3]], mean: &Vector3<f64>) -> Matrix3<f64> {
    let centered: Vec<Vector3<f64>> = sorted
        .iter()
        .map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) - mean)
        .collect();
    let mut cov = Matrix3::zeros();
    for d in &centered {
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / centered.len() as f64);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix3::zeros();
    for (col, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k).into_owned();
        let skew: f64 = centered.iter().map(|d| d.dot(&v).powi(3)).sum();
        axes.set_column(col, &if skew < 0.0 { -v } else { v });
    }
    axes
}

/// One subnetwork evaluation on `tape` for an `n x 3` row-major cloud.
/// Returns the `1 x 5` standardized prediction.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &SubnetworkConfig,
    params: &[Var],
    points: &[f32],
) -> Result<Var, ModelError> {
    let n = points.len() / 3;
    let input = encode_points(config, points);
    let mut h = tape.constant(Tensor::from_rows(n, config.input_width(), input))?;
    let n_trunk = config.n_trunk_layers();
    let n_layers = config.layer_dims().len();
    for layer in 0..n_layers {
        if layer == n_trunk {
            h = tape.max_rows(h)?;
        }
        let z = tape.matmul(h, params[2 * layer])?;
        let z = tape.add_bias(z, params[2 * layer + 1])?;
        h = if layer + 1 == n_layers { z } else { tape.relu(z)? };
    }
    Ok(h)
}

/// Standardized prediction for one sample.
pub fn subnetwork_forward(model: &Model, sample: &PointCloudSample) -> Result<[f64; 5], ModelError> {
    let mut tape = Tape::new();
    let params = model.record(&mut tape, false)?;
    let out = forward_on_tape(&mut tape, &model.config, &params, &sample.to_f32_rows())?;
    let v = tape.value(out).data();
    Ok(std::array::from_fn(|i| v[i] as f64))
}

/// `mean_k (|DFT(O1 - O2)|_k - |DFT(GT1 - GT2)|_k)^2` over the five-measure axis.
pub fn loss_sf(tape: &mut Tape, o1: Var, o2: Var, gt1: Var, gt2: Var) -> Result<Var, AutodiffError> {
    let d_out = tape.sub(o1, o2)?;
    let d_gt = tape.sub(gt1, gt2)?;
    let m_out = tape.dft_magnitude(d_out)?;
    let m_gt = tape.dft_magnitude(d_gt)?;
    tape.mse(m_out, m_gt)
}

/// The loss pieces of one pair, as recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub struct PairLoss {
    pub l1: Var,
    pub l2: Var,
    pub sf: Var,
    pub total: Var,
}

pub fn loss_total(
    tape: &mut Tape,
    o1: Var,
    o2: Var,
    gt1: Var,
    gt2: Var,
    cfg: LossConfig,
) -> Result<PairLoss, AutodiffError> {
    let l1 = tape.mse(o1, gt1)?;
    let l2 = tape.mse(o2, gt2)?;
    let sf = loss_sf(tape, o1, o2, gt1, gt2)?;
    let pointwise = tape.add(l1, l2)?;
    let weighted = tape.scale(sf, cfg.alpha as f32)?;
    let total = tape.add(pointwise, weighted)?;
    Ok(PairLoss { l1, l2, sf, total })
}

/// Scalar loss values of one pair.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub l1: f64,
    pub l2: f64,
    pub sf: f64,
    pub total: f64,
}

impl LossValues {
    pub fn combine(l1: f64, l2: f64, sf: f64, cfg: LossConfig) -> Self {
        Self {
            l1,
            l2,
            sf,
            total: l1 + l2 + cfg.alpha * sf,
        }
    }

    pub fn read(tape: &Tape, loss: &PairLoss) -> Self {
        let item = |v: Var| tape.value(v).item() as f64;
        Self {
            l1: item(loss.l1),
            l2: item(loss.l2),
            sf: item(loss.sf),
            total: item(loss.total),
        }
    }
}

/// Two samples and their standardized targets.
#[derive(Debug, Clone)]
pub struct SiamesePair<'a> {
    pub a: &'a [f32],
    pub b: &'a [f32],
    pub gt_a: [f64; 5],
    pub gt_b: [f64; 5],
}

fn target(tape: &mut Tape, gt: &[f64; 5]) -> Result<Var, AutodiffError> {
    tape.constant(Tensor::row(gt.iter().map(|&v| v as f32).collect()))
}

/// Records both branches of a pair against the same parameter handles and
/// returns the loss nodes and the two outputs.
pub fn pair_on_tape(
    tape: &mut Tape,
    config: &SubnetworkConfig,
    params: &[Var],
    pair: &SiamesePair,
    cfg: LossConfig,
) -> Result<(PairLoss, Var, Var), ModelError> {
    let o1 = forward_on_tape(tape, config, params, pair.a)?;
    let o2 = forward_on_tape(tape, config, params, pair.b)?;
    let g1 = target(tape, &pair.gt_a)?;
    let g2 = target(tape, &pair.gt_b)?;
    Ok((loss_total(tape, o1, o2, g1, g2, cfg)?, o1, o2))
}

/// Loss values and per-parameter gradients of one pair's `L_total`.
pub fn pair_gradients(
    model: &Model,
    pair: &SiamesePair,
    cfg: LossConfig,
) -> Result<(LossValues, Vec<Vec<f32>>), ModelError> {
    let mut tape = Tape::new();
    let params = model.record(&mut tape, true)?;
    let (loss, _, _) = pair_on_tape(&mut tape, &model.config, &params, pair, cfg)?;
    tape.backward(loss.total)?;
    let values = LossValues::read(&tape, &loss);
    let grads = params
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok((values, grads))
}

/// Per-measure z-scoring fitted on the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStandardizer {
    pub mean: [f64; 5],
    pub std: [f64; 5],
}

impl TargetStandardizer {
    /// Population statistics of `targets`.
    pub fn fit(targets: &[ShapeVector]) -> Result<Self, ModelError> {
        let n = targets.len() as f64;
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for m in 0..5 {
            let column = targets.iter().map(|t| t.to_array()[m]);
            mean[m] = column.clone().sum::<f64>() / n;
            std[m] = (column.map(|v| (v - mean[m]).powi(2)).sum::<f64>() / n).sqrt();
            if std[m].is_nan() || std[m] <= 0.0 {
                return Err(ModelError::ZeroVariance {
                    measure: ShapeVector::NAMES[m],
                });
            }
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, y: &ShapeVector) -> [f64; 5] {
        let y = y.to_array();
        std::array::from_fn(|m| (y[m] - self.mean[m]) / self.std[m])
    }

    pub fn destandardize(&self, z: &[f64; 5]) -> ShapeVector {
        ShapeVector::from_array(std::array::from_fn(|m| z[m] * self.std[m] + self.mean[m]))
    }
}

/// Trained parameters plus everything needed to reproduce inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub standardizer: TargetStandardizer,
    pub n_points: usize,
    pub seed: u64,
    /// Free-form echo of the training configuration.
    pub train_config: serde_json::Value,
}

const MAGIC: &[u8; 8] = b"TSNCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    tool: String,
    version: String,
    subnetwork: SubnetworkConfig,
    n_points: usize,
    train: serde_json::Value,
}

impl Checkpoint {
    /// Layout: magic, `u32` header length, JSON header, `u32` tensor count,
    /// then per tensor `u32` rank, `u32` dims and `f32` values, then the
    /// standardizer means and stds as `f64`, then the `u64` training seed.
    /// Every number is little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            tool: "tractshape".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subnetwork: self.model.config.clone(),
            n_points: self.n_points,
            train: self.train_config.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(self.model.n_parameters() * 4 + json.len() + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for p in &self.model.params {
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.standardizer.mean.iter().chain(&self.standardizer.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, ModelError> {
        let corrupt = |reason: &str| ModelError::CorruptCheckpoint {
            path: path.into(),
            reason: reason.into(),
        };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ModelError::BadMagic { path: path.into() });
        }
        let mut r = &bytes[MAGIC.len()..];
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            if r.len() < n {
                return Err(corrupt("truncated"));
            }
            let (head, rest) = r.split_at(n);
            r = rest;
            Ok(head)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;

        let json_len = u32_at(take(4)?);
        let header: Header =
            serde_json::from_slice(take(json_len)?).map_err(|e| corrupt(&format!("header: {e}")))?;
        header.subnetwork.validate()?;
        let n_tensors = u32_at(take(4)?);
        let shapes = header.subnetwork.param_shapes();
        if n_tensors != shapes.len() {
            return Err(corrupt("tensor count does not match the configuration"));
        }
        let mut params = Vec::with_capacity(n_tensors);
        for (i, expected) in shapes.into_iter().enumerate() {
            let rank = u32_at(take(4)?);
            let shape = (0..rank).map(|_| Ok(u32_at(take(4)?))).collect::<Result<Vec<_>, ModelError>>()?;
            if shape != expected {
                return Err(corrupt(&format!("tensor {i} has shape {shape:?}, expected {expected:?}")));
            }
            let n: usize = shape.iter().product();
            let data = take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.push(Tensor::new(shape, data));
        }
        let mut stats = [0.0f64; 10];
        for s in &mut stats {
            *s = f64::from_le_bytes(take(8)?.try_into().unwrap());
        }
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        if !r.is_empty() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            model: Model {
                config: header.subnetwork,
                params,
            },
            standardizer: TargetStandardizer {
                mean: stats[..5].try_into().unwrap(),
                std: stats[5..].try_into().unwrap(),
            },
            n_points: header.n_points,
            seed,
            train_config: header.train,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        let io = |source| ModelError::Io {
            path: path.into(),
            source,
        };
        let mut file = std::fs::File::create(path).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let io = |source| ModelError::Io {
            path: path.into(),
            source,
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io)?;
        Self::from_bytes(&bytes, path)
    }
}

/// Physical-unit shape vector for one sample.
pub fn predict(sample: &PointCloudSample, checkpoint: &Checkpoint) -> Result<ShapeVector, ModelError> {
    if sample.n_points() != checkpoint.n_points {
        return Err(ModelError::CheckpointMismatch {
            expected: checkpoint.n_points,
            got: sample.n_points(),
        });
    }
    let z = subnetwork_forward(&checkpoint.model, sample)?;
    let y = checkpoint.standardizer.destandardize(&z);
    if !y.to_array().iter().all(|v| v.is_finite()) {
        return Err(AutodiffError::NonFiniteValue { op: "predict" }.into());
    }
    Ok(y)
}
