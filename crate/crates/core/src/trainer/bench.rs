use crate::geometry::FiberCluster;
use crate::model::{predict, Checkpoint, ModelError};
use crate::oracle::{compute_shape_vector, OracleError};
use crate::sampler::random_sample;
use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("repetitions must be at least 1")]
    ZeroRepetitions,
    #[error("no clusters to benchmark")]
    NoClusters,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Mean and population standard deviation; `(0, 0)` for no values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodTiming {
    pub method: &'static str,
    /// Every timed call, ms, cluster-major.
    pub samples_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
}

impl MethodTiming {
    fn new(method: &'static str, samples_ms: Vec<f64>) -> Self {
        let (mean_ms, std_ms) = mean_std(&samples_ms);
        Self {
            method,
            samples_ms,
            mean_ms,
            std_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTiming {
    pub subject_id: String,
    pub cluster_id: String,
    pub n_streamlines: usize,
    pub n_points: usize,
    pub neural_mean_ms: f64,
    pub oracle_mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub neural: MethodTiming,
    pub oracle: MethodTiming,
    pub clusters: Vec<ClusterTiming>,
    pub repetitions: usize,
    pub warmup: usize,
}

fn time_ms(f: impl FnOnce() -> Result<(), BenchError>) -> Result<f64, BenchError> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

/// Times, on the calling thread, `repetitions` neural predictions
/// (sampling included) and oracle evaluations per cluster, after `warmup`
/// untimed calls of each.
pub fn bench(
    checkpoint: &Checkpoint,
    clusters: &[FiberCluster],
    voxel_size: f64,
    repetitions: usize,
    warmup: usize,
    seed: u64,
) -> Result<BenchReport, BenchError> {
    if repetitions == 0 {
        return Err(BenchError::ZeroRepetitions);
    }
    if clusters.is_empty() {
        return Err(BenchError::NoClusters);
    }
    let neural_call = |c: &FiberCluster| -> Result<(), BenchError> {
        let sample = random_sample(c, checkpoint.n_points, super::eval_sample_seed(seed, c));
        black_box(predict(&sample, checkpoint)?);
        Ok(())
    };
    let oracle_call = |c: &FiberCluster| -> Result<(), BenchError> {
        black_box(compute_shape_vector(c, voxel_size)?);
        Ok(())
    };
    for c in clusters.iter().cycle().take(warmup) {
        neural_call(c)?;
        oracle_call(c)?;
    }

    let mut neural = Vec::with_capacity(clusters.len() * repetitions);
    let mut oracle = Vec::with_capacity(clusters.len() * repetitions);
    let mut per_cluster = Vec::with_capacity(clusters.len());
    for c in clusters {
        let mut n_ms = Vec::with_capacity(repetitions);
        let mut o_ms = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            n_ms.push(time_ms(|| neural_call(c))?);
            o_ms.push(time_ms(|| oracle_call(c))?);
        }
        per_cluster.push(ClusterTiming {
            subject_id: c.subject_id.clone(),
            cluster_id: c.id.clone(),
            n_streamlines: c.n_streamlines(),
            n_points: c.n_points(),
            neural_mean_ms: mean_std(&n_ms).0,
            oracle_mean_ms: mean_std(&o_ms).0,
        });
        neural.extend(n_ms);
        oracle.extend(o_ms);
    }
    Ok(BenchReport {
        neural: MethodTiming::new("neural", neural),
        oracle: MethodTiming::new("oracle", oracle),
        clusters: per_cluster,
        repetitions,
        warmup,
    })
}

impl BenchReport {
    pub const SUMMARY_CSV_HEADER: &'static str = "method,mean_ms,std_ms,n_calls";
    pub const CLUSTER_CSV_HEADER: &'static str =
        "subject_id,cluster_id,n_streamlines,n_points,neural_mean_ms,oracle_mean_ms";

    pub fn summary_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            writeln!(out, "# {c}").unwrap();
        }
        writeln!(out, "# repetitions: {}, warmup: {}", self.repetitions, self.warmup).unwrap();
        writeln!(out, "{}", Self::SUMMARY_CSV_HEADER).unwrap();
        for m in [&self.neural, &self.oracle] {
            writeln!(out, "{},{:.6},{:.6},{}", m.method, m.mean_ms, m.std_ms, m.samples_ms.len()).unwrap();
        }
        out
    }

    pub fn clusters_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CLUSTER_CSV_HEADER);
        for c in &self.clusters {
            writeln!(
                out,
                "{},{},{},{},{:.6},{:.6}",
                c.subject_id, c.cluster_id, c.n_streamlines, c.n_points, c.neural_mean_ms, c.oracle_mean_ms
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<24} {:>24}", "Method", "Runtime (ms)").unwrap();
        for (name, m) in [("Voxel oracle", &self.oracle), ("Point-cloud network", &self.neural)] {
            writeln!(out, "{:<24} {:>24}", name, format!("{:.3} ± {:.3}", m.mean_ms, m.std_ms)).unwrap();
        }
        out
    }
}
