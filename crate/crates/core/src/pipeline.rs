//! Loop-closure front end, the detection loop and the training losses used
//! as offline diagnostics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, Vector3};

use crate::descriptor::{global_descriptor, DescriptorDatabase, GlobalDescriptor, VladParams};
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureSpec, KeypointFeatures};
use crate::geom::{PointCloud, Pose};
use crate::ingest::synthetic::split_seed;
use crate::registration::{icp, ransac_register, IcpParams, RansacParams};
use crate::sampling::{farthest_point_sampling, voxel_downsample, KeypointSet, VoxelGridSpec};
use crate::transport::{estimate_pose_uot, project_soft, sinkhorn_uot, weighted_svd, TransportPlan, UotParams};

pub const DEFAULT_KEYPOINTS: usize = 1024;
pub const DEFAULT_EXCLUSION: usize = 50;
pub const DEFAULT_LOOP_RADIUS: f64 = 4.0;
pub const DEFAULT_ICP_FITNESS: f64 = 0.6;
/// Descriptor distance below which a candidate is registered.
pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.5;

/// Downsampling, keypoint selection and local features for one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct FrontEnd {
    pub voxel: VoxelGridSpec<f64>,
    pub keypoints: usize,
    pub features: FeatureSpec<f64>,
}

impl Default for FrontEnd {
    fn default() -> Self {
        Self {
            voxel: VoxelGridSpec::default(),
            keypoints: DEFAULT_KEYPOINTS,
            features: FeatureSpec::default(),
        }
    }
}

/// A downsampled scan and its keypoint features.
#[derive(Clone, Debug)]
pub struct ScanFeatures {
    pub cloud: PointCloud<f64>,
    pub features: KeypointFeatures<f64>,
}

impl FrontEnd {
    pub fn extract(&self, cloud: &PointCloud<f64>) -> Result<ScanFeatures> {
        let cloud = voxel_downsample(cloud, &self.voxel)?;
        let keypoints = farthest_point_sampling(&cloud, self.keypoints, 0)?;
        let features = extract_features(&cloud, &keypoints, &self.features)?;
        Ok(ScanFeatures { cloud, features })
    }
}

/// How a candidate loop is registered before the ICP check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoseMethod {
    /// Feature matching with RANSAC.
    #[default]
    Ransac,
    /// Unbalanced optimal transport with weighted SVD.
    Fast,
}

impl PoseMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PoseMethod::Ransac => "ransac",
            PoseMethod::Fast => "fast",
        }
    }
}

impl fmt::Display for PoseMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoseMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ransac" => Ok(PoseMethod::Ransac),
            "fast" | "uot" => Ok(PoseMethod::Fast),
            other => Err(Error::invalid(
                "method",
                format!("`{other}` is not one of fast, ransac"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LcdConfig {
    /// Candidates at this descriptor distance or above are not registered.
    pub similarity_threshold: f64,
    /// Registered candidates need an ICP fitness strictly above this.
    pub icp_fitness_threshold: f64,
    /// The most recent `exclusion` scans are never matched.
    pub exclusion: usize,
    pub loop_radius: f64,
    /// Every `keyframe_stride`-th scan is processed; the rest are skipped.
    pub keyframe_stride: usize,
    pub method: PoseMethod,
    pub ransac: RansacParams<f64>,
    pub uot: UotParams<f64>,
    pub icp: IcpParams<f64>,
    pub seed: u64,
}

impl Default for LcdConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
            icp_fitness_threshold: DEFAULT_ICP_FITNESS,
            exclusion: DEFAULT_EXCLUSION,
            loop_radius: DEFAULT_LOOP_RADIUS,
            keyframe_stride: 1,
            method: PoseMethod::default(),
            ransac: RansacParams::default(),
            uot: UotParams::default(),
            icp: IcpParams::default(),
            seed: 0,
        }
    }
}

impl LcdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.similarity_threshold >= 0.0) {
            return Err(Error::invalid("lcd.similarity_threshold", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.icp_fitness_threshold) {
            return Err(Error::invalid("lcd.icp_fitness_threshold", "must lie in [0, 1]"));
        }
        if !(self.loop_radius > 0.0 && self.loop_radius.is_finite()) {
            return Err(Error::invalid("lcd.loop_radius", "must be positive and finite"));
        }
        if self.keyframe_stride == 0 {
            return Err(Error::invalid("lcd.keyframe_stride", "must be positive"));
        }
        self.ransac.validate()?;
        self.uot.validate()?;
        self.icp.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    None,
    Threshold,
    Consistency,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::None => "none",
            RejectReason::Threshold => "threshold",
            RejectReason::Consistency => "consistency",
        }
    }
}

impl FromStr for RejectReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RejectReason::None),
            "threshold" => Ok(RejectReason::Threshold),
            "consistency" => Ok(RejectReason::Consistency),
            other => Err(Error::Format(format!("unknown reject reason `{other}`"))),
        }
    }
}

/// Best database candidate of a query scan and what became of it.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopDetection {
    pub query_index: usize,
    pub matched_index: usize,
    pub descriptor_distance: f64,
    /// Takes query points into the matched scan's frame.
    pub pose: Pose<f64>,
    pub fitness: f64,
    pub accepted: bool,
    pub reject_reason: RejectReason,
}

/// Streaming loop detector; scans must arrive in increasing index order.
pub struct LoopDetector {
    front_end: FrontEnd,
    params: VladParams<f64>,
    config: LcdConfig,
    database: DescriptorDatabase<f64>,
    scans: BTreeMap<usize, ScanFeatures>,
}

impl LoopDetector {
    pub fn new(front_end: FrontEnd, params: VladParams<f64>, config: LcdConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        Ok(Self {
            front_end,
            params,
            config,
            database: DescriptorDatabase::new(),
            scans: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &LcdConfig {
        &self.config
    }

    pub fn front_end(&self) -> &FrontEnd {
        &self.front_end
    }

    pub fn database(&self) -> &DescriptorDatabase<f64> {
        &self.database
    }

    /// Whether scan `index` is a keyframe under the configured stride.
    pub fn is_keyframe(&self, index: usize) -> bool {
        index.is_multiple_of(self.config.keyframe_stride)
    }

    /// Extracts features and the descriptor of `cloud`, then runs the
    /// detection for them.
    pub fn process_scan(&mut self, index: usize, cloud: &PointCloud<f64>) -> Result<Option<LoopDetection>> {
        if !self.is_keyframe(index) {
            return Ok(None);
        }
        self.check_index(index)?;
        let scan = self.front_end.extract(cloud)?;
        let descriptor = global_descriptor(&scan.features, &self.params)?;
        self.process_features(index, scan, descriptor)
    }

    /// Detection for a scan whose features and descriptor are already known.
    /// The descriptor and features are stored afterwards, whatever the outcome
    /// of the registration.
    pub fn process_features(
        &mut self,
        index: usize,
        scan: ScanFeatures,
        descriptor: GlobalDescriptor<f64>,
    ) -> Result<Option<LoopDetection>> {
        self.check_index(index)?;
        let outcome = match self.database.query(&descriptor, index, self.config.exclusion) {
            None => Ok(None),
            Some((matched, distance)) => self.verify(index, &scan, matched, distance).map(Some),
        };
        self.database.push(index, descriptor)?;
        self.scans.insert(index, scan);
        outcome
    }

    fn check_index(&self, index: usize) -> Result<()> {
        match self.scans.keys().next_back() {
            Some(&last) if index <= last => Err(Error::NonIncreasingIndex { index, last }),
            _ => Ok(()),
        }
    }

    fn verify(&self, index: usize, scan: &ScanFeatures, matched: usize, distance: f64) -> Result<LoopDetection> {
        let mut detection = LoopDetection {
            query_index: index,
            matched_index: matched,
            descriptor_distance: distance,
            pose: Pose::identity(),
            fitness: 0.0,
            accepted: false,
            reject_reason: RejectReason::Threshold,
        };
        if !(distance < self.config.similarity_threshold) {
            return Ok(detection);
        }
        let target = &self.scans[&matched];
        let initial = match self.config.method {
            PoseMethod::Ransac => {
                let seed = split_seed(self.config.seed, index as u64);
                ransac_register(&scan.features, &target.features, &self.config.ransac, seed)?.pose
            }
            PoseMethod::Fast => estimate_pose_uot(&scan.features, &target.features, &self.config.uot)?.0,
        };
        let refined = icp(&scan.cloud, &target.cloud, &initial, &self.config.icp)?;
        detection.pose = refined.pose;
        detection.fitness = refined.fitness;
        detection.accepted = refined.fitness > self.config.icp_fitness_threshold;
        detection.reject_reason = if detection.accepted {
            RejectReason::None
        } else {
            RejectReason::Consistency
        };
        Ok(detection)
    }
}

/// One line of the detection log.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub query_index: usize,
    pub detection: Option<LoopDetection>,
}

pub const DETECTION_CSV_HEADER: &str =
    "query_index,matched_index,distance,accepted,reject_reason,tx,ty,tz,yaw_deg,fitness";

/// Writes the header and one row per record. Scans without a candidate
/// leave the match columns empty.
pub fn write_detection_csv<W: Write>(out: &mut W, records: &[DetectionRecord]) -> std::io::Result<()> {
    writeln!(out, "{DETECTION_CSV_HEADER}")?;
    for r in records {
        match &r.detection {
            None => writeln!(out, "{},,,false,none,,,,,", r.query_index)?,
            Some(d) => {
                let t = d.pose.translation();
                writeln!(
                    out,
                    "{},{},{:.9},{},{},{:.6},{:.6},{:.6},{:.4},{:.6}",
                    d.query_index,
                    d.matched_index,
                    d.descriptor_distance,
                    d.accepted,
                    d.reject_reason.as_str(),
                    t.x,
                    t.y,
                    t.z,
                    d.pose.yaw().to_degrees(),
                    d.fitness,
                )?
            }
        }
    }
    Ok(())
}

/// Row of a parsed detection log; the pose columns are not read back.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRow {
    pub query_index: usize,
    pub matched_index: Option<usize>,
    pub distance: Option<f64>,
    pub accepted: bool,
    pub reject_reason: RejectReason,
    pub fitness: Option<f64>,
}

pub fn parse_detection_csv<R: BufRead>(input: R) -> Result<Vec<DetectionRow>> {
    let mut rows = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if n == 0 {
            if line.trim() != DETECTION_CSV_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: "unexpected detection header".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: n + 1, message };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(bad(format!("expected 10 columns, found {}", cols.len())));
        }
        fn opt<T: FromStr>(s: &str) -> std::result::Result<Option<T>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| format!("bad value `{s}`"))
            }
        }
        rows.push(DetectionRow {
            query_index: cols[0]
                .parse()
                .map_err(|_| bad(format!("bad query index `{}`", cols[0])))?,
            matched_index: opt(cols[1]).map_err(bad)?,
            distance: opt(cols[2]).map_err(bad)?,
            accepted: cols[3].parse().map_err(|_| bad(format!("bad flag `{}`", cols[3])))?,
            reject_reason: cols[4].parse().map_err(|e: Error| bad(e.to_string()))?,
            fitness: opt(cols[9]).map_err(bad)?,
        });
    }
    Ok(rows)
}

/// Protocol-1 candidates from a detection log: the score is the negated
/// descriptor distance, and candidates that failed the geometric check are
/// dropped. Scans missing from the log have no candidate.
pub fn candidates_from_rows(rows: &[DetectionRow], scans: usize) -> Result<Vec<Option<(usize, f64)>>> {
    let mut out = vec![None; scans];
    for r in rows {
        if r.query_index >= scans {
            return Err(Error::invalid(
                "detections",
                format!("query index {} outside a {scans}-scan sequence", r.query_index),
            ));
        }
        if r.reject_reason == RejectReason::Consistency {
            continue;
        }
        if let (Some(j), Some(d)) = (r.matched_index, r.distance) {
            if j >= scans {
                return Err(Error::invalid(
                    "detections",
                    format!("matched index {j} outside the sequence"),
                ));
            }
            out[r.query_index] = Some((j, -d));
        }
    }
    Ok(out)
}

/// Per-point norm used by the pose and transport losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PointNorm {
    /// Sum of absolute coordinate differences.
    #[default]
    L1,
    L2,
}

impl PointNorm {
    fn apply(self, v: &Vector3<f64>) -> f64 {
        match self {
            PointNorm::L1 => v.abs().sum(),
            PointNorm::L2 => v.norm(),
        }
    }
}

/// Loss weights. Descriptor distances are Euclidean.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub beta: f64,
    pub point_norm: PointNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            beta: 0.05,
            point_norm: PointNorm::L1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid("loss.margin", "must be positive and finite"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("loss.beta", "must be non-negative and finite"));
        }
        Ok(())
    }
}

/// `max(0, d(a, p) - d(a, n) + m)`.
pub fn triplet_loss(
    anchor: &GlobalDescriptor<f64>,
    positive: &GlobalDescriptor<f64>,
    negative: &GlobalDescriptor<f64>,
    cfg: &LossConfig,
) -> f64 {
    (anchor.distance(positive) - anchor.distance(negative) + cfg.margin).max(0.0)
}

/// Mean L1 distance between the cloud moved by `predicted` and by `truth`.
pub fn pose_loss(cloud: &PointCloud<f64>, predicted: &Pose<f64>, truth: &Pose<f64>) -> Result<f64> {
    pose_loss_with(cloud, predicted, truth, PointNorm::L1)
}

pub fn pose_loss_with(
    cloud: &PointCloud<f64>,
    predicted: &Pose<f64>,
    truth: &Pose<f64>,
    norm: PointNorm,
) -> Result<f64> {
    cloud.ensure_non_empty()?;
    let sum: f64 = cloud
        .points()
        .iter()
        .map(|p| {
            let v = p.coords();
            norm.apply(&(predicted.transform(&v) - truth.transform(&v)))
        })
        .sum();
    Ok(sum / cloud.len() as f64)
}

/// Mean distance between the soft correspondence of each valid plan row and
/// the true position of its anchor keypoint.
pub fn ot_aux_loss(
    plan: &TransportPlan<f64>,
    anchor: &KeypointSet<f64>,
    positive: &KeypointSet<f64>,
    truth: &Pose<f64>,
    norm: PointNorm,
) -> Result<f64> {
    if plan.matrix.shape() != (anchor.len(), positive.len()) {
        return Err(Error::DimensionMismatch {
            expected: anchor.len() * positive.len(),
            found: plan.matrix.len(),
        });
    }
    let soft = project_soft(plan, positive.coordinates())?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (j, p) in anchor.coordinates().iter().enumerate() {
        if soft.valid[j] {
            sum += norm.apply(&(soft.projected[j] - truth.transform(p)));
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoEffectiveCorrespondences);
    }
    Ok(sum / count as f64)
}

/// `trp + pose + beta * ot`.
pub fn total_loss(trp: f64, pose: f64, ot: f64, cfg: &LossConfig) -> f64 {
    trp + pose + cfg.beta * ot
}

/// Pose loss as a function of the cost matrix: Sinkhorn plan, soft
/// projection onto `target`, weighted SVD, then [`pose_loss`] on `source`.
pub fn pose_loss_from_cost(
    cost: &DMatrix<f64>,
    params: &UotParams<f64>,
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    truth: &Pose<f64>,
) -> Result<f64> {
    let plan = sinkhorn_uot(cost, params)?;
    let soft = project_soft(&plan, target)?;
    let weights: Vec<f64> = soft
        .weights
        .iter()
        .zip(&soft.valid)
        .map(|(&w, &ok)| if ok { w } else { 0.0 })
        .collect();
    let pose = weighted_svd(source, &soft.projected, &weights)?;
    let cloud = PointCloud::from_coords(source.iter().copied())?;
    pose_loss(&cloud, &pose, truth)
}

/// Ratio of central difference quotients of `f` along one coordinate at
/// steps `h` and `h / 2`; close to 1 where `f` is smooth.
pub fn finite_difference_ratio<F: FnMut(f64) -> Result<f64>>(mut f: F, h: f64) -> Result<f64> {
    let q = |f: &mut F, h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let coarse = q(&mut f, h)?;
    let fine = q(&mut f, h / 2.0)?;
    Ok(coarse / fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::synthetic::{generate_scene_cloud, SceneSpec};
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> GlobalDescriptor<f64> {
        GlobalDescriptor::new(DVector::from_column_slice(v)).unwrap()
    }

    fn random_cloud(n: usize, rng: &mut ChaCha8Rng) -> PointCloud<f64> {
        PointCloud::from_coords((0..n).map(|_| {
            Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-1.0..1.0),
            )
        }))
        .unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose<f64> {
        Pose::from_euler(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-3.0..3.0),
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-0.5..0.5),
            ),
        )
    }

    #[test]
    fn triplet_examples() {
        let cfg = LossConfig::default();
        let a = unit(&[1.0, 0.0]);
        assert_eq!(triplet_loss(&a, &a, &unit(&[0.0, 1.0]), &cfg), 0.0);
        assert_eq!(triplet_loss(&a, &a, &a, &cfg), 0.5);
        let (p, n) = (unit(&[0.6, 0.8]), unit(&[0.8, 0.6]));
        let dap = ((1.0f64 - 0.6).powi(2) + 0.8f64.powi(2)).sqrt();
        let dan = ((1.0f64 - 0.8).powi(2) + 0.6f64.powi(2)).sqrt();
        assert!((triplet_loss(&a, &p, &n, &cfg) - (dap - dan + 0.5)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn triplet_is_a_hinge(seed in any::<u64>(), margin in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || unit(&(0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let (a, p, n) = (draw(), draw(), draw());
            let cfg = LossConfig { margin, ..LossConfig::default() };
            let loss = triplet_loss(&a, &p, &n, &cfg);
            prop_assert!(loss >= 0.0);
            let satisfied = a.distance(&p) + margin <= a.distance(&n);
            prop_assert_eq!(loss == 0.0, satisfied);
        }
    }

    #[test]
    fn pose_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = random_cloud(50, &mut rng);
        let pose = random_pose(&mut rng);
        assert_eq!(pose_loss(&cloud, &pose, &pose).unwrap(), 0.0);
        let shifted = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        assert!((pose_loss(&cloud, &shifted, &Pose::identity()).unwrap() - 1.0).abs() < 1e-12);
        assert!(pose_loss(&PointCloud::<f64>::default(), &pose, &pose).is_err());
    }

    #[test]
    fn pose_loss_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let cloud = random_cloud(30, &mut rng);
            let (a, b) = (random_pose(&mut rng), random_pose(&mut rng));
            let (ra, rb) = (a.rotation(), b.rotation());
            let (ta, tb) = (a.translation(), b.translation());
            let (mut l1, mut l2) = (0.0, 0.0);
            for p in cloud.points() {
                let mut sq = 0.0;
                for r in 0..3 {
                    let mut d = ta[r] - tb[r];
                    d += (ra[(r, 0)] - rb[(r, 0)]) * p.x
                        + (ra[(r, 1)] - rb[(r, 1)]) * p.y
                        + (ra[(r, 2)] - rb[(r, 2)]) * p.z;
                    l1 += d.abs();
                    sq += d * d;
                }
                l2 += sq.sqrt();
            }
            let n = cloud.len() as f64;
            assert!((pose_loss(&cloud, &a, &b).unwrap() - l1 / n).abs() < 1e-10);
            assert!((pose_loss_with(&cloud, &a, &b, PointNorm::L2).unwrap() - l2 / n).abs() < 1e-10);
        }
    }

    fn keypoints(coords: &[[f64; 3]]) -> KeypointSet<f64> {
        let cloud = PointCloud::from_coords(coords.iter().map(|c| Vector3::new(c[0], c[1], c[2]))).unwrap();
        KeypointSet::from_indices(&cloud, (0..coords.len()).collect()).unwrap()
    }

    #[test]
    fn ot_aux_loss_examples() {
        let truth = Pose::from_yaw(0.7, Vector3::new(1.0, -2.0, 0.5));
        let anchor = keypoints(&[[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [3.0, -1.0, 1.0]]);
        // Positive keypoints are the true images, listed in reverse order.
        let images: Vec<[f64; 3]> = anchor
            .coordinates()
            .iter()
            .rev()
            .map(|p| {
                let q = truth.transform(p);
                [q.x, q.y, q.z]
            })
            .collect();
        let positive = keypoints(&images);
        let hard = DMatrix::from_fn(3, 3, |i, j| if i + j == 2 { 1.0 / 3.0 } else { 0.0 });
        let plan = TransportPlan::new(hard, UotParams::default());
        assert!(ot_aux_loss(&plan, &anchor, &positive, &truth, PointNorm::L1).unwrap() < 1e-12);

        // Identity truth with each soft match sitting on its anchor point.
        let same = keypoints(&[[0.0, 0.0, 0.0], [1.0, 2.0, 0.0], [3.0, -1.0, 1.0]]);
        let diag = TransportPlan::new(DMatrix::identity(3, 3), UotParams::default());
        assert_eq!(
            ot_aux_loss(&diag, &anchor, &same, &Pose::identity(), PointNorm::L1).unwrap(),
            0.0
        );

        // Uniform plan: every row projects onto the centroid (1, 2, 0).
        let one = keypoints(&[[0.0, 0.0, 0.0]]);
        let target = keypoints(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 6.0, 0.0]]);
        let uniform = TransportPlan::new(DMatrix::from_element(1, 3, 0.2), UotParams::default());
        let loss = ot_aux_loss(&uniform, &one, &target, &Pose::identity(), PointNorm::L1).unwrap();
        assert!((loss - 3.0).abs() < 1e-12);
        let loss2 = ot_aux_loss(&uniform, &one, &target, &Pose::identity(), PointNorm::L2).unwrap();
        assert!((loss2 - 5f64.sqrt()).abs() < 1e-12);

        let empty = TransportPlan::new(DMatrix::zeros(1, 3), UotParams::default());
        assert!(ot_aux_loss(&empty, &one, &target, &Pose::identity(), PointNorm::L1).is_err());
        assert!(ot_aux_loss(&uniform, &anchor, &target, &Pose::identity(), PointNorm::L1).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let cfg = LossConfig::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &cfg), 0.0);
        assert!((total_loss(1.0, 1.0, 1.0, &cfg) - 2.05).abs() < 1e-15);
        let no_ot = LossConfig { beta: 0.0, ..cfg };
        assert_eq!(total_loss(0.3, 0.4, 9.0, &no_ot), 0.3 + 0.4);
        assert!(LossConfig {
            margin: 0.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            beta: -1.0,
            ..LossConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn finite_difference_ratio_of_a_quadratic_is_one() {
        let r = finite_difference_ratio(|h| Ok((1.0 + h) * (1.0 + h) + h), 1e-3).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
    }

    fn small_front_end() -> FrontEnd {
        FrontEnd {
            keypoints: 256,
            ..FrontEnd::default()
        }
    }

    fn detector(exclusion: usize) -> LoopDetector {
        let params = VladParams::from_centroids(DMatrix::from_element(2, 66, 0.1), 4);
        let config = LcdConfig {
            exclusion,
            ..LcdConfig::default()
        };
        LoopDetector::new(small_front_end(), params, config).unwrap()
    }

    fn scene(seed: u64) -> ScanFeatures {
        let spec = SceneSpec {
            points: 4000,
            ..SceneSpec::default()
        };
        small_front_end()
            .extract(&generate_scene_cloud(&spec, seed).unwrap())
            .unwrap()
    }

    #[test]
    fn window_must_fill_before_any_candidate() {
        let mut det = detector(3);
        let s = scene(1);
        for i in 0..3 {
            assert!(det
                .process_features(i, s.clone(), unit(&[1.0, 0.0, 0.0, 0.0]))
                .unwrap()
                .is_none());
        }
        let d = det
            .process_features(3, s.clone(), unit(&[0.0, 1.0, 0.0, 0.0]))
            .unwrap()
            .unwrap();
        assert_eq!(d.matched_index, 0);
        assert_eq!(d.reject_reason, RejectReason::Threshold);
        assert!(!d.accepted);
        assert_eq!(det.database().len(), 4);
        assert!(matches!(
            det.process_features(3, s, unit(&[1.0, 0.0, 0.0, 0.0])),
            Err(Error::NonIncreasingIndex { index: 3, last: 3 })
        ));
    }

    #[test]
    fn identical_scans_are_accepted() {
        let mut det = detector(1);
        let s = scene(2);
        let d = unit(&[1.0, 0.0, 0.0, 0.0]);
        assert!(det.process_features(0, s.clone(), d.clone()).unwrap().is_none());
        let hit = det.process_features(1, s, d).unwrap().unwrap();
        assert!(hit.accepted, "{hit:?}");
        assert_eq!(hit.reject_reason, RejectReason::None);
        assert_eq!(hit.descriptor_distance, 0.0);
        assert!(hit.fitness > 0.99);
        assert!(hit.pose.translation().norm() < 1e-6);
    }

    #[test]
    fn forged_descriptor_match_fails_the_consistency_check() {
        let mut det = detector(1);
        let d = unit(&[1.0, 0.0, 0.0, 0.0]);
        det.process_features(0, scene(3), d.clone()).unwrap();
        // A different place presented with the same descriptor.
        let spec = SceneSpec {
            points: 4000,
            ground_weight: 0.0,
            ..SceneSpec::default()
        };
        let other = small_front_end()
            .extract(&generate_scene_cloud(&spec, 4).unwrap())
            .unwrap();
        let hit = det.process_features(1, other, d).unwrap().unwrap();
        assert_eq!(hit.descriptor_distance, 0.0);
        assert!(!hit.accepted);
        assert_eq!(hit.reject_reason, RejectReason::Consistency, "fitness {}", hit.fitness);
        assert!(hit.fitness <= 0.6);
    }

    #[test]
    fn keyframe_stride_skips_scans() {
        let params = VladParams::from_centroids(DMatrix::from_element(2, 66, 0.1), 4);
        let config = LcdConfig {
            keyframe_stride: 2,
            ..LcdConfig::default()
        };
        let det = LoopDetector::new(small_front_end(), params, config).unwrap();
        assert!(det.is_keyframe(0) && !det.is_keyframe(1) && det.is_keyframe(4));
        assert!(LcdConfig {
            keyframe_stride: 0,
            ..LcdConfig::default()
        }
        .validate()
        .is_err());
        assert!(LcdConfig {
            icp_fitness_threshold: 1.5,
            ..LcdConfig::default()
        }
        .validate()
        .is_err());
        assert!(LcdConfig {
            similarity_threshold: -0.1,
            ..LcdConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn detection_csv_round_trip() {
        let records = vec![
            DetectionRecord {
                query_index: 0,
                detection: None,
            },
            DetectionRecord {
                query_index: 1,
                detection: Some(LoopDetection {
                    query_index: 1,
                    matched_index: 0,
                    descriptor_distance: 0.25,
                    pose: Pose::from_yaw(std::f64::consts::FRAC_PI_2, Vector3::new(1.0, 2.0, 3.0)),
                    fitness: 0.75,
                    accepted: true,
                    reject_reason: RejectReason::None,
                }),
            },
            DetectionRecord {
                query_index: 2,
                detection: Some(LoopDetection {
                    query_index: 2,
                    matched_index: 1,
                    descriptor_distance: 0.9,
                    pose: Pose::identity(),
                    fitness: 0.0,
                    accepted: false,
                    reject_reason: RejectReason::Consistency,
                }),
            },
        ];
        let mut buf = Vec::new();
        write_detection_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], DETECTION_CSV_HEADER);
        assert_eq!(lines[1], "0,,,false,none,,,,,");
        assert_eq!(
            lines[2],
            "1,0,0.250000000,true,none,1.000000,2.000000,3.000000,90.0000,0.750000"
        );
        let rows = parse_detection_csv(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].matched_index, Some(0));
        assert_eq!(rows[2].reject_reason, RejectReason::Consistency);
        let cands = candidates_from_rows(&rows, 3).unwrap();
        assert_eq!(cands, vec![None, Some((0, -0.25)), None]);
        assert!(candidates_from_rows(&rows, 2).is_err());
        assert!(parse_detection_csv("bad header\n".as_bytes()).is_err());
        assert!(parse_detection_csv(format!("{DETECTION_CSV_HEADER}\n1,2\n").as_bytes()).is_err());
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("fast".parse::<PoseMethod>().unwrap(), PoseMethod::Fast);
        assert_eq!("ransac".parse::<PoseMethod>().unwrap(), PoseMethod::Ransac);
        assert!("icp".parse::<PoseMethod>().is_err());
        for r in [RejectReason::None, RejectReason::Threshold, RejectReason::Consistency] {
            assert_eq!(r.as_str().parse::<RejectReason>().unwrap(), r);
        }
    }
}
