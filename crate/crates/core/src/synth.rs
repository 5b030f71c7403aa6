//! Parametric fiber bundles with closed-form length and span.
//!
//! A bundle is a tube around a centerline (straight, circular arc or
//! helix). Each streamline is the centerline shifted by a fixed offset drawn
//! uniformly from the tube's cross-sectional disk, plus per-point Gaussian
//! jitter. Offsets come in antithetic pairs `(u, v), (-u, -v)`; with an odd
//! count the last streamline runs along the centerline. That makes the mean
//! offset exactly zero, so a jitter-free cylinder or arc has a mean polyline
//! length equal to the centerline's own polyline length.

use crate::geometry::{
    cluster_mean_length, cluster_mean_span, FiberCluster, Point3, ShapeVector, Streamline,
};
use crate::seeding::{self, tag};
use crate::tract_io::{write_manifest, write_tck, ClusterEntry, DatasetManifest, SubjectEntry, TractIoError};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid bundle spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] TractIoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    Cylinder,
    Arc,
    Helix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Centerline {
    Cylinder { length: f64 },
    /// `angle` in radians.
    Arc { radius: f64, angle: f64 },
    /// `pitch` is the axial advance per full turn.
    Helix { radius: f64, pitch: f64, turns: f64 },
}

impl Centerline {
    pub fn kind(&self) -> BundleKind {
        match self {
            Centerline::Cylinder { .. } => BundleKind::Cylinder,
            Centerline::Arc { .. } => BundleKind::Arc,
            Centerline::Helix { .. } => BundleKind::Helix,
        }
    }

    /// Point at parameter `t` in [0, 1], in the bundle's local frame.
    pub fn point(&self, t: f64) -> Point3 {
        match *self {
            Centerline::Cylinder { length } => Point3::new(length * (t - 0.5), 0.0, 0.0),
            Centerline::Arc { radius, angle } => {
                let phi = angle * (t - 0.5);
                Point3::new(radius * phi.cos() - radius, radius * phi.sin(), 0.0)
            }
            Centerline::Helix {
                radius,
                pitch,
                turns,
            } => {
                let phi = 2.0 * PI * turns * t;
                Point3::new(radius * phi.cos(), radius * phi.sin(), pitch * turns * (t - 0.5))
            }
        }
    }

    /// Two unit vectors spanning the cross-section at `t`.
    fn cross_section(&self, t: f64) -> (Point3, Point3) {
        match *self {
            Centerline::Cylinder { .. } => (Point3::new(0., 1., 0.), Point3::new(0., 0., 1.)),
            Centerline::Arc { angle, .. } => {
                let phi = angle * (t - 0.5);
                (Point3::new(phi.cos(), phi.sin(), 0.0), Point3::new(0., 0., 1.))
            }
            Centerline::Helix {
                radius,
                pitch,
                turns,
            } => {
                let phi = 2.0 * PI * turns * t;
                let tangent = Point3::new(-radius * phi.sin(), radius * phi.cos(), pitch / (2.0 * PI));
                let tangent = tangent * (1.0 / tangent.norm());
                let normal = Point3::new(-phi.cos(), -phi.sin(), 0.0);
                (normal, tangent.cross(normal))
            }
        }
    }

    pub fn length(&self) -> f64 {
        match *self {
            Centerline::Cylinder { length } => length,
            Centerline::Arc { radius, angle } => radius * angle,
            Centerline::Helix {
                radius,
                pitch,
                turns,
            } => turns * (2.0 * PI * radius).hypot(pitch),
        }
    }

    pub fn span(&self) -> f64 {
        match *self {
            Centerline::Cylinder { length } => length,
            Centerline::Arc { radius, angle } => 2.0 * radius * (angle / 2.0).sin(),
            Centerline::Helix {
                radius,
                pitch,
                turns,
            } => (2.0 * radius * (PI * turns).sin()).hypot(pitch * turns),
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let ok = match *self {
            Centerline::Cylinder { length } => length > 0.0,
            Centerline::Arc { radius, angle } => radius > 0.0 && angle > 0.0 && angle < 2.0 * PI,
            Centerline::Helix {
                radius,
                pitch,
                turns,
            } => radius > 0.0 && pitch > 0.0 && turns > 0.0,
        };
        if ok && self.length().is_finite() {
            Ok(())
        } else {
            Err(SynthError::InvalidSpec(format!("bad centerline parameters {self:?}")))
        }
    }
}

/// Rigid placement of a bundle: `rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: Point3,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            rotation: [[1., 0., 0.], [0., 1., 0.], [0., 0., 1.]],
            translation: Point3::default(),
        }
    }
}

impl Pose {
    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let v = p.to_array();
        let row = |i: usize| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2];
        Point3::new(row(0), row(1), row(2)) + self.translation
    }

    /// Uniformly random rotation (normalized Gaussian quaternion).
    pub fn random<R: Rng>(rng: &mut R, half_extent: f64) -> Self {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        let rotation = [
            [1. - 2. * (y * y + z * z), 2. * (x * y - w * z), 2. * (x * z + w * y)],
            [2. * (x * y + w * z), 1. - 2. * (x * x + z * z), 2. * (y * z - w * x)],
            [2. * (x * z - w * y), 2. * (y * z + w * x), 1. - 2. * (x * x + y * y)],
        ];
        let translation = Point3::new(
            rng.random_range(-half_extent..=half_extent),
            rng.random_range(-half_extent..=half_extent),
            rng.random_range(-half_extent..=half_extent),
        );
        Self {
            rotation,
            translation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub centerline: Centerline,
    pub tube_radius: f64,
    pub n_streamlines: usize,
    pub points_per_streamline: usize,
    pub jitter_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub pose: Pose,
}

impl BundleSpec {
    pub fn new(centerline: Centerline, tube_radius: f64) -> Self {
        Self {
            centerline,
            tube_radius,
            n_streamlines: 100,
            points_per_streamline: 50,
            jitter_sigma: 0.0,
            seed: 0,
            pose: Pose::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.centerline.validate()?;
        let fail = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if !(self.tube_radius > 0.0 && self.tube_radius.is_finite()) {
            return fail("tube_radius must be positive");
        }
        if self.n_streamlines < 1 {
            return fail("n_streamlines must be at least 1");
        }
        if self.points_per_streamline < 2 {
            return fail("points_per_streamline must be at least 2");
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return fail("jitter_sigma must be non-negative");
        }
        Ok(())
    }

    /// Posed centerline sampled at `n` evenly spaced parameters.
    pub fn centerline_points(&self, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|i| self.pose.apply(self.centerline.point(i as f64 / (n - 1) as f64)))
            .collect()
    }
}

/// Closed-form measures. Volume, surface and irregularity are only known
/// for the straight tube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticTruth {
    pub length: f64,
    pub span: f64,
    pub volume: Option<f64>,
    pub total_surface_area: Option<f64>,
    pub irregularity: Option<f64>,
}

impl AnalyticTruth {
    fn of(spec: &BundleSpec) -> Self {
        let length = spec.centerline.length();
        let span = spec.centerline.span();
        match spec.centerline {
            Centerline::Cylinder { length } => {
                let r = spec.tube_radius;
                let lateral = 2.0 * PI * r * length;
                let caps = 2.0 * PI * r * r;
                Self {
                    length,
                    span,
                    volume: Some(PI * r * r * length),
                    total_surface_area: Some(lateral + caps),
                    irregularity: Some((lateral + caps) / lateral),
                }
            }
            _ => Self {
                length,
                span,
                volume: None,
                total_surface_area: None,
                irregularity: None,
            },
        }
    }
}

pub fn generate_bundle(spec: &BundleSpec) -> Result<(FiberCluster, AnalyticTruth), SynthError> {
    spec.validate()?;
    let n = spec.n_streamlines;
    let p = spec.points_per_streamline;
    let streamlines = (0..n)
        .map(|i| {
            let (u, v) = if n % 2 == 1 && i == n - 1 {
                (0.0, 0.0)
            } else {
                let mut rng = seeding::rng_for(spec.seed, &[tag::STREAMLINE, (i / 2) as u64]);
                let rho = spec.tube_radius * rng.random::<f64>().sqrt();
                let theta = 2.0 * PI * rng.random::<f64>();
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                (sign * rho * theta.cos(), sign * rho * theta.sin())
            };
            let mut jitter = seeding::rng_for(spec.seed, &[tag::STREAMLINE, i as u64, 1]);
            let points = (0..p)
                .map(|k| {
                    let t = k as f64 / (p - 1) as f64;
                    let (n1, n2) = spec.centerline.cross_section(t);
                    let mut q = spec.centerline.point(t) + n1 * u + n2 * v;
                    if spec.jitter_sigma > 0.0 {
                        let g: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut jitter));
                        q = q + Point3::from(g) * spec.jitter_sigma;
                    }
                    spec.pose.apply(q)
                })
                .collect();
            Streamline::new(points).map_err(|e| SynthError::InvalidSpec(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cluster = FiberCluster::new("bundle", "synthetic", streamlines).expect("n_streamlines >= 1");
    Ok((cluster, AnalyticTruth::of(spec)))
}

/// Per-kind settings shared by every cluster drawn from the template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleTemplate {
    pub kind: BundleKind,
    pub n_streamlines: usize,
    pub jitter_sigma: f64,
}

/// A term of the synthetic per-subject score: cluster index within the
/// subject, measure index in canonical order, weight on the z-scored value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreTerm {
    pub cluster: usize,
    pub measure: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    pub clusters_per_subject: usize,
    pub seed: u64,
    pub templates: Vec<BundleTemplate>,
    /// Centerline length range, mm.
    pub length_range: (f64, f64),
    pub tube_radius_range: (f64, f64),
    /// Spacing between consecutive points along a streamline, mm.
    pub point_spacing: f64,
    /// Half-width of the cube bundle centers are drawn from, mm.
    pub placement_extent: f64,
    pub score_terms: Vec<ScoreTerm>,
    /// Ratio of score signal std to noise std.
    pub score_snr: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let template = |kind| BundleTemplate {
            kind,
            n_streamlines: 100,
            jitter_sigma: 0.3,
        };
        Self {
            n_subjects: 10,
            clusters_per_subject: 73,
            seed: 42,
            templates: vec![
                template(BundleKind::Cylinder),
                template(BundleKind::Arc),
                template(BundleKind::Helix),
            ],
            length_range: (20.0, 120.0),
            tube_radius_range: (1.0, 6.0),
            point_spacing: 2.0,
            placement_extent: 40.0,
            score_terms: vec![
                ScoreTerm { cluster: 0, measure: 0, weight: 1.0 },
                ScoreTerm { cluster: 1, measure: 1, weight: -0.8 },
                ScoreTerm { cluster: 2, measure: 0, weight: 0.6 },
            ],
            score_snr: 5.0,
        }
    }
}

impl DatasetConfig {
    pub fn subject_id(index: usize) -> String {
        format!("sub-{index:03}")
    }

    pub fn cluster_id(index: usize) -> String {
        format!("cluster_{index:03}")
    }

    /// The bundle spec of one cluster, reproducible without generating any
    /// other cluster.
    pub fn cluster_spec(&self, subject: usize, cluster: usize) -> BundleSpec {
        let seed = seeding::derive_seed(self.seed, &[tag::CLUSTER, subject as u64, cluster as u64]);
        let mut rng = seeding::Rng::seed_from_u64(seed);
        let template = &self.templates[rng.random_range(0..self.templates.len())];
        let length = rng.random_range(self.length_range.0..=self.length_range.1);
        let tube_radius = rng.random_range(self.tube_radius_range.0..=self.tube_radius_range.1);
        let centerline = match template.kind {
            BundleKind::Cylinder => Centerline::Cylinder { length },
            BundleKind::Arc => {
                let angle = rng.random_range(PI / 6.0..=PI);
                Centerline::Arc {
                    radius: length / angle,
                    angle,
                }
            }
            BundleKind::Helix => {
                let radius = rng.random_range(3.0..=10.0);
                let climb = rng.random_range(PI / 6.0..=PI / 3.0);
                let pitch = 2.0 * PI * radius * climb.tan();
                let turns = length * climb.cos() / (2.0 * PI * radius);
                Centerline::Helix {
                    radius,
                    pitch,
                    turns,
                }
            }
        };
        let pose = Pose::random(&mut rng, self.placement_extent);
        let points_per_streamline = ((length / self.point_spacing).round() as usize + 1).max(2);
        BundleSpec {
            centerline,
            tube_radius,
            n_streamlines: template.n_streamlines,
            points_per_streamline,
            jitter_sigma: template.jitter_sigma,
            seed: rng.random(),
            pose,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.clusters_per_subject < 1 {
            return fail("clusters_per_subject must be at least 1");
        }
        if self.templates.is_empty() {
            return fail("at least one bundle template is required");
        }
        let (lo, hi) = self.length_range;
        if !(lo > 0.0 && lo <= hi) {
            return fail("length_range must be positive and ordered");
        }
        let (lo, hi) = self.tube_radius_range;
        if !(lo > 0.0 && lo <= hi) {
            return fail("tube_radius_range must be positive and ordered");
        }
        if self.point_spacing.is_nan() || self.point_spacing <= 0.0 {
            return fail("point_spacing must be positive");
        }
        if self.score_terms.iter().any(|t| t.measure >= ShapeVector::LEN) {
            return fail("score term measure index out of range");
        }
        Ok(())
    }
}

/// Writes `sub-XXX/cluster_YYY.tck` files plus `manifest.json` under
/// `out_dir` and returns the manifest.
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| TractIoError::io(out_dir, e))?;

    let jobs: Vec<(usize, usize)> = (0..cfg.n_subjects)
        .flat_map(|s| (0..cfg.clusters_per_subject).map(move |c| (s, c)))
        .collect();
    for s in 0..cfg.n_subjects {
        let dir = out_dir.join(DatasetConfig::subject_id(s));
        std::fs::create_dir_all(&dir).map_err(|e| TractIoError::io(&dir, e))?;
    }

    // (entry, score-relevant measures) per cluster, in job order
    let results = jobs
        .par_iter()
        .map(|&(s, c)| {
            let spec = cfg.cluster_spec(s, c);
            let (mut cluster, _) = generate_bundle(&spec)?;
            cluster.id = DatasetConfig::cluster_id(c);
            cluster.subject_id = DatasetConfig::subject_id(s);
            let rel: PathBuf = [cluster.subject_id.as_str(), &format!("{}.tck", cluster.id)]
                .iter()
                .collect();
            write_tck(&cluster, out_dir.join(&rel))?;
            let measures = [cluster_mean_length(&cluster), cluster_mean_span(&cluster)];
            Ok((
                ClusterEntry {
                    cluster_id: cluster.id,
                    file_path: rel,
                    ground_truth: None,
                },
                measures,
            ))
        })
        .collect::<Result<Vec<_>, SynthError>>()?;

    let mut subjects: Vec<SubjectEntry> = (0..cfg.n_subjects)
        .map(|s| SubjectEntry {
            subject_id: DatasetConfig::subject_id(s),
            score: None,
            clusters: Vec::with_capacity(cfg.clusters_per_subject),
        })
        .collect();
    let mut features = vec![vec![0.0; cfg.score_terms.len()]; cfg.n_subjects];
    for ((s, c), (entry, measures)) in jobs.iter().zip(results) {
        for (k, term) in cfg.score_terms.iter().enumerate() {
            if term.cluster % cfg.clusters_per_subject == *c {
                features[*s][k] = score_feature(cfg, *s, *c, term.measure, &measures)?;
            }
        }
        subjects[*s].clusters.push(entry);
    }
    for (subject, score) in subjects.iter_mut().zip(synthetic_scores(cfg, &features)) {
        subject.score = score;
    }

    let mut manifest = DatasetManifest::new(subjects);
    manifest.generator = serde_json::json!({
        "tool": "tractshape",
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
    });
    manifest.base_dir = out_dir.to_path_buf();
    write_manifest(&manifest, out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Length and span are exact polyline measures; the voxel measures need
/// the oracle, computed only for the clusters the score uses.
fn score_feature(
    cfg: &DatasetConfig,
    subject: usize,
    cluster: usize,
    measure: usize,
    cheap: &[f64; 2],
) -> Result<f64, SynthError> {
    if measure < 2 {
        return Ok(cheap[measure]);
    }
    let (bundle, _) = generate_bundle(&cfg.cluster_spec(subject, cluster))?;
    let shape = crate::oracle::compute_shape_vector(&bundle, crate::oracle::DEFAULT_VOXEL_SIZE)
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    Ok(shape.to_array()[measure])
}

/// Weighted sum of z-scored features plus Gaussian noise at the configured
/// signal-to-noise ratio (of standard deviations).
fn synthetic_scores(cfg: &DatasetConfig, features: &[Vec<f64>]) -> Vec<Option<f64>> {
    let n = features.len();
    if cfg.score_terms.is_empty() || n < 2 {
        return vec![None; n];
    }
    let mut signal = vec![0.0; n];
    for (k, term) in cfg.score_terms.iter().enumerate() {
        let column: Vec<f64> = features.iter().map(|f| f[k]).collect();
        let (mean, std) = mean_std(&column);
        let std = if std > 0.0 { std } else { 1.0 };
        for (s, v) in column.iter().enumerate() {
            signal[s] += term.weight * (v - mean) / std;
        }
    }
    let (_, signal_std) = mean_std(&signal);
    let noise_std = if cfg.score_snr > 0.0 {
        signal_std / cfg.score_snr
    } else {
        0.0
    };
    signal
        .iter()
        .enumerate()
        .map(|(s, v)| {
            let mut rng = seeding::rng_for(cfg.seed, &[tag::SCORE, s as u64]);
            let z: f64 = StandardNormal.sample(&mut rng);
            Some(v + noise_std * z)
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{streamline_length, streamline_span};

    fn cylinder(n: usize, p: usize, jitter: f64) -> BundleSpec {
        BundleSpec {
            n_streamlines: n,
            points_per_streamline: p,
            jitter_sigma: jitter,
            seed: 9,
            ..BundleSpec::new(Centerline::Cylinder { length: 50.0 }, 2.0)
        }
    }

    #[test]
    fn cylinder_truth() {
        let (c, truth) = generate_bundle(&cylinder(10, 20, 0.0)).unwrap();
        assert_eq!(c.n_streamlines(), 10);
        assert_eq!(truth.length, 50.0);
        assert_eq!(truth.span, 50.0);
        assert!((truth.volume.unwrap() - 628.319).abs() < 1e-3);
        assert!((truth.total_surface_area.unwrap() - 653.45).abs() < 1e-2);
        assert!((truth.irregularity.unwrap() - 1.04).abs() < 1e-12);
        // straight streamlines keep exact length and span
        for s in c.streamlines() {
            assert!((streamline_length(s) - 50.0).abs() < 1e-9);
            assert!((streamline_span(s) - 50.0).abs() < 1e-9);
        }
    }

    #[test]
    fn arc_truth() {
        let spec = BundleSpec::new(
            Centerline::Arc {
                radius: 30.0,
                angle: PI / 2.0,
            },
            1.0,
        );
        let (_, truth) = generate_bundle(&spec).unwrap();
        assert!((truth.length - 47.124).abs() < 1e-3);
        assert!((truth.span - 42.426).abs() < 1e-3);
        assert!(truth.volume.is_none());
    }

    #[test]
    fn helix_truth_matches_dense_polyline() {
        let centerline = Centerline::Helix {
            radius: 5.0,
            pitch: 12.0,
            turns: 1.3,
        };
        let spec = BundleSpec {
            n_streamlines: 1,
            points_per_streamline: 20_000,
            ..BundleSpec::new(centerline, 1.0)
        };
        let (c, truth) = generate_bundle(&spec).unwrap();
        let s = &c.streamlines()[0];
        assert!((streamline_length(s) - truth.length).abs() / truth.length < 1e-6);
        assert!((streamline_span(s) - truth.span).abs() < 1e-9);
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = cylinder(30, 25, 0.4);
        let (a, _) = generate_bundle(&spec).unwrap();
        let (b, _) = generate_bundle(&spec).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate_bundle(&BundleSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            BundleSpec { tube_radius: 0.0, ..cylinder(2, 2, 0.0) },
            BundleSpec { n_streamlines: 0, ..cylinder(2, 2, 0.0) },
            BundleSpec { points_per_streamline: 1, ..cylinder(2, 2, 0.0) },
            BundleSpec::new(Centerline::Cylinder { length: -1.0 }, 1.0),
            BundleSpec::new(Centerline::Arc { radius: 1.0, angle: 0.0 }, 1.0),
        ];
        for spec in bad {
            assert!(matches!(generate_bundle(&spec), Err(SynthError::InvalidSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn jitter_free_mean_length_matches_truth() {
        let specs = [
            cylinder(40, 30, 0.0),
            BundleSpec {
                n_streamlines: 41,
                points_per_streamline: 200,
                ..BundleSpec::new(Centerline::Arc { radius: 30.0, angle: 2.0 }, 4.0)
            },
            BundleSpec {
                n_streamlines: 40,
                points_per_streamline: 400,
                ..BundleSpec::new(
                    Centerline::Helix { radius: 8.0, pitch: 30.0, turns: 1.2 },
                    2.0,
                )
            },
        ];
        for spec in specs {
            let (c, truth) = generate_bundle(&spec).unwrap();
            let rel = (cluster_mean_length(&c) - truth.length).abs() / truth.length;
            assert!(rel < 0.005, "{:?}: {rel}", spec.centerline.kind());
        }
    }

    #[test]
    fn refinement_reduces_length_error() {
        // Antithetic offsets cancel exactly only for straight and circular
        // centerlines; the helix runs as a single on-axis streamline.
        for (centerline, n) in [
            (Centerline::Arc { radius: 25.0, angle: 2.5 }, 20),
            (Centerline::Helix { radius: 6.0, pitch: 20.0, turns: 1.5 }, 1),
        ] {
            let mut prev = f64::INFINITY;
            for p in [5, 10, 20, 40, 80, 160] {
                let spec = BundleSpec {
                    n_streamlines: n,
                    points_per_streamline: p,
                    ..BundleSpec::new(centerline, 0.5)
                };
                let (c, truth) = generate_bundle(&spec).unwrap();
                let err = (cluster_mean_length(&c) - truth.length).abs();
                assert!(err < prev, "{centerline:?} p={p}: {err} >= {prev}");
                prev = err;
            }
        }
    }

    fn distance_to_polyline(p: Point3, line: &[Point3]) -> f64 {
        line.windows(2)
            .map(|w| {
                let d = w[1] - w[0];
                let t = ((p - w[0]).dot(d) / d.dot(d)).clamp(0.0, 1.0);
                p.distance(w[0] + d * t)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn points_stay_inside_jittered_tube() {
        let mut rng = seeding::rng_for(5, &[]);
        let spec = BundleSpec {
            n_streamlines: 60,
            points_per_streamline: 40,
            jitter_sigma: 0.5,
            seed: 77,
            pose: Pose::random(&mut rng, 30.0),
            ..BundleSpec::new(Centerline::Arc { radius: 20.0, angle: 2.0 }, 3.0)
        };
        let (c, _) = generate_bundle(&spec).unwrap();
        let axis = spec.centerline_points(4000);
        let bound = spec.tube_radius + 6.0 * spec.jitter_sigma;
        for p in c.points() {
            assert!(distance_to_polyline(p, &axis) <= bound);
        }
    }

    #[test]
    fn dataset_counts_ranges_and_determinism() {
        let cfg = DatasetConfig {
            n_subjects: 10,
            clusters_per_subject: 73,
            seed: 3,
            templates: DatasetConfig::default()
                .templates
                .into_iter()
                .map(|t| BundleTemplate { n_streamlines: 4, ..t })
                .collect(),
            ..DatasetConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = generate_dataset(&cfg, a.path()).unwrap();
        assert_eq!(m.n_clusters(), 730);
        generate_dataset(&cfg, b.path()).unwrap();
        let read = |d: &Path| std::fs::read(d.join("manifest.json")).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        assert_eq!(
            std::fs::read(a.path().join("sub-004/cluster_050.tck")).unwrap(),
            std::fs::read(b.path().join("sub-004/cluster_050.tck")).unwrap()
        );
        assert!(m.subjects.iter().all(|s| s.score.is_some()));

        let mut kinds = std::collections::HashMap::new();
        for s in 0..10 {
            for c in 0..73 {
                let spec = cfg.cluster_spec(s, c);
                let l = spec.centerline.length();
                assert!((20.0 - 1e-9..=120.0 + 1e-9).contains(&l), "{l}");
                assert!((1.0..=6.0).contains(&spec.tube_radius));
                *kinds.entry(spec.centerline.kind()).or_insert(0) += 1;
            }
        }
        assert_eq!(kinds.len(), 3);
        assert!(kinds.values().all(|&n| n > 180), "{kinds:?}");
    }

    #[test]
    fn cluster_spec_is_reproducible_in_isolation() {
        let cfg = DatasetConfig::default();
        assert_eq!(cfg.cluster_spec(3, 17), cfg.cluster_spec(3, 17));
        assert_ne!(cfg.cluster_spec(3, 17), cfg.cluster_spec(3, 18));
        let other = DatasetConfig { n_subjects: 500, ..DatasetConfig::default() };
        assert_eq!(cfg.cluster_spec(3, 17), other.cluster_spec(3, 17));
    }
}
