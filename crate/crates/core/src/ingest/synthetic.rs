//! Synthetic LiDAR-like scenes with known poses.
//!
//! A [`World`] is a ground plane plus a set of surfaces (boxes, walls,
//! poles, trees). Scans sample points uniformly by area on the surfaces
//! within a horizontal range of the sensor and express them in the sensor
//! frame. Everything is deterministic given the seed.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{apply_pose, remove_sector, Point, PointCloud, Pose};
use crate::ingest::sequence::Sequence;
use crate::scalar::Real;

type V3 = Vector3<f64>;

/// Content of a generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Points per scan.
    pub points: usize,
    /// Horizontal sensor range, meters.
    pub range: f64,
    /// No objects closer than this to the sensor (or road center line), meters.
    pub clear_radius: f64,
    pub boxes: usize,
    pub walls: usize,
    pub poles: usize,
    pub trees: usize,
    /// Sampling weight of ground area relative to object surfaces.
    pub ground_weight: f64,
    pub ground_thickness: f64,
    /// Fraction of points scattered uniformly in the scan volume.
    pub clutter_fraction: f64,
    pub ground_only: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            points: 8000,
            range: 20.0,
            clear_radius: 2.5,
            boxes: 14,
            walls: 5,
            poles: 12,
            trees: 6,
            ground_weight: 0.5,
            ground_thickness: 0.02,
            clutter_fraction: 0.02,
            ground_only: false,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 100 {
            return Err(Error::invalid("scene.points", "at least 100 points are required"));
        }
        if !(self.range > 0.0) || !(self.clear_radius >= 0.0) || self.clear_radius >= self.range {
            return Err(Error::invalid("scene.range", "need 0 <= clear_radius < range"));
        }
        if !(self.ground_weight >= 0.0) || !(self.ground_thickness >= 0.0) {
            return Err(Error::invalid("scene.ground_weight", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.clutter_fraction) {
            return Err(Error::invalid("scene.clutter_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn object_density(&self) -> [f64; 4] {
        let area = PI * (self.range.powi(2) - self.clear_radius.powi(2));
        [self.boxes, self.walls, self.poles, self.trees].map(|n| n as f64 / area)
    }
}

/// Random rigid perturbation and corruption applied to a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub max_translation_xy: f64,
    pub max_translation_z: f64,
    /// Yaw magnitude is drawn uniformly from `[min_yaw_deg, max_yaw_deg]`
    /// with a random sign.
    pub min_yaw_deg: f64,
    pub max_yaw_deg: f64,
    pub max_roll_pitch_deg: f64,
    /// Per-coordinate Gaussian noise, meters.
    pub noise_sigma: f64,
    /// Probability that a point is dropped, independently per side.
    pub dropout: f64,
    /// Width of a randomly centred sector removed from each side; 0 disables.
    pub sector_width_deg: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            max_translation_xy: 1.5,
            max_translation_z: 0.25,
            min_yaw_deg: 0.0,
            max_yaw_deg: 180.0,
            max_roll_pitch_deg: 3.0,
            noise_sigma: 0.02,
            dropout: 0.1,
            sector_width_deg: 0.0,
        }
    }
}

impl PerturbationSpec {
    /// No motion and no corruption.
    pub fn none() -> Self {
        Self {
            max_translation_xy: 0.0,
            max_translation_z: 0.0,
            min_yaw_deg: 0.0,
            max_yaw_deg: 0.0,
            max_roll_pitch_deg: 0.0,
            noise_sigma: 0.0,
            dropout: 0.0,
            sector_width_deg: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.max_translation_xy,
            self.max_translation_z,
            self.min_yaw_deg,
            self.max_yaw_deg,
            self.max_roll_pitch_deg,
            self.noise_sigma,
        ];
        if ranges.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("perturbation", "ranges must be non-negative"));
        }
        if self.min_yaw_deg > self.max_yaw_deg || self.max_yaw_deg > 180.0 {
            return Err(Error::invalid("perturbation.yaw", "need 0 <= min <= max <= 180"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("perturbation.dropout", "must lie in [0, 1)"));
        }
        if !(0.0..360.0).contains(&self.sector_width_deg) {
            return Err(Error::invalid("perturbation.sector_width_deg", "must lie in [0, 360)"));
        }
        Ok(())
    }

    fn sample_pose(&self, rng: &mut ChaCha8Rng) -> Pose<f64> {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let tx = sym(self.max_translation_xy);
        let ty = sym(self.max_translation_xy);
        let tz = sym(self.max_translation_z);
        let roll = sym(self.max_roll_pitch_deg).to_radians();
        let pitch = sym(self.max_roll_pitch_deg).to_radians();
        let yaw = if self.max_yaw_deg > 0.0 {
            let mag = rng.random_range(self.min_yaw_deg..=self.max_yaw_deg);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        } else {
            0.0
        };
        Pose::from_euler(roll, pitch, yaw.to_radians(), V3::new(tx, ty, tz))
    }
}

/// A base cloud plus the perturbation used to derive pairs from it.
#[derive(Clone, Debug)]
pub struct SyntheticScene<T: Real> {
    pub base_cloud: PointCloud<T>,
    pub perturbation: PerturbationSpec,
}

/// `target ≈ truth · source`.
#[derive(Clone, Debug)]
pub struct SyntheticPair<T: Real> {
    pub source: PointCloud<T>,
    pub target: PointCloud<T>,
    pub truth: Pose<T>,
}

pub fn generate_synthetic_pair<T: Real>(scene: &SyntheticScene<T>, seed: u64) -> Result<SyntheticPair<T>> {
    scene.perturbation.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = scene.perturbation.sample_pose(&mut rng).cast::<T>();
    let source = corrupt(&scene.base_cloud, &scene.perturbation, &mut rng)?;
    let moved = apply_pose(&truth, &scene.base_cloud);
    let target = corrupt(&moved, &scene.perturbation, &mut rng)?;
    Ok(SyntheticPair { source, target, truth })
}

fn corrupt<T: Real>(cloud: &PointCloud<T>, spec: &PerturbationSpec, rng: &mut ChaCha8Rng) -> Result<PointCloud<T>> {
    let mut points = Vec::with_capacity(cloud.len());
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("sigma > 0"));
    for p in cloud.points() {
        if spec.dropout > 0.0 && rng.random::<f64>() < spec.dropout {
            continue;
        }
        let mut q = *p;
        if let Some(n) = &noise {
            q.x += T::lit(n.sample(rng));
            q.y += T::lit(n.sample(rng));
            q.z += T::lit(n.sample(rng));
        }
        points.push(q);
    }
    let out = PointCloud::from_finite(points, cloud.frame_id.clone());
    if spec.sector_width_deg > 0.0 {
        let center = rng.random_range(-180.0..180.0);
        remove_sector(&out, T::lit(center), T::lit(spec.sector_width_deg))
    } else {
        Ok(out)
    }
}

/// A surface points are sampled from.
#[derive(Clone, Debug)]
enum Surface {
    /// `origin + s u + t v`, `s, t ∈ [0, 1]`.
    Rect {
        origin: V3,
        u: V3,
        v: V3,
    },
    /// Lateral surface of a vertical cylinder.
    Cylinder {
        center: V3,
        radius: f64,
        height: f64,
    },
    Sphere {
        center: V3,
        radius: f64,
    },
}

impl Surface {
    fn area(&self) -> f64 {
        match self {
            Surface::Rect { u, v, .. } => u.cross(v).norm(),
            Surface::Cylinder { radius, height, .. } => TAU * radius * height,
            Surface::Sphere { radius, .. } => 2.0 * TAU * radius * radius,
        }
    }

    /// Horizontal center and radius of a bounding circle.
    fn footprint(&self) -> (f64, f64, f64) {
        match self {
            Surface::Rect { origin, u, v } => {
                let c = origin + 0.5 * (u + v);
                (c.x, c.y, 0.5 * (u.xy().norm() + v.xy().norm()))
            }
            Surface::Cylinder { center, radius, .. } | Surface::Sphere { center, radius } => {
                (center.x, center.y, *radius)
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> V3 {
        match self {
            Surface::Rect { origin, u, v } => origin + rng.random::<f64>() * u + rng.random::<f64>() * v,
            Surface::Cylinder { center, radius, height } => {
                let a = rng.random_range(0.0..TAU);
                center + V3::new(radius * a.cos(), radius * a.sin(), rng.random::<f64>() * height)
            }
            Surface::Sphere { center, radius } => {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let a = rng.random_range(0.0..TAU);
                let r = (1.0 - z * z).max(0.0).sqrt();
                center + *radius * V3::new(r * a.cos(), r * a.sin(), z)
            }
        }
    }
}

fn push_box(out: &mut Vec<Surface>, cx: f64, cy: f64, w: f64, d: f64, h: f64, yaw: f64) {
    let ex = V3::new(yaw.cos(), yaw.sin(), 0.0) * w;
    let ey = V3::new(-yaw.sin(), yaw.cos(), 0.0) * d;
    let up = V3::new(0.0, 0.0, h);
    let c0 = V3::new(cx, cy, 0.0) - 0.5 * (ex + ey);
    out.push(Surface::Rect {
        origin: c0,
        u: ex,
        v: up,
    });
    out.push(Surface::Rect {
        origin: c0 + ey,
        u: ex,
        v: up,
    });
    out.push(Surface::Rect {
        origin: c0,
        u: ey,
        v: up,
    });
    out.push(Surface::Rect {
        origin: c0 + ex,
        u: ey,
        v: up,
    });
    out.push(Surface::Rect {
        origin: c0 + up,
        u: ex,
        v: ey,
    });
}

/// Ground plane at `z = 0` plus object surfaces.
#[derive(Clone, Debug, Default)]
pub struct World {
    surfaces: Vec<Surface>,
}

impl World {
    /// Adds objects at the scene density inside the axis-aligned region
    /// `[x0, x1] × [y0, y1]`, skipping anything that `blocked` rejects.
    fn populate<F: Fn(f64, f64) -> bool>(
        &mut self,
        spec: &SceneSpec,
        (x0, x1, y0, y1): (f64, f64, f64, f64),
        blocked: F,
        rng: &mut ChaCha8Rng,
    ) {
        if spec.ground_only {
            return;
        }
        let area = (x1 - x0) * (y1 - y0);
        let density = spec.object_density();
        for (kind, rate) in density.iter().enumerate() {
            let expected = rate * area;
            let count = expected.floor() as usize + usize::from(rng.random::<f64>() < expected.fract());
            let mut placed = 0;
            let mut attempts = 0;
            while placed < count && attempts < 100 * count.max(1) {
                attempts += 1;
                let x = rng.random_range(x0..x1);
                let y = rng.random_range(y0..y1);
                if blocked(x, y) {
                    continue;
                }
                placed += 1;
                let yaw = rng.random_range(0.0..PI);
                match kind {
                    0 => {
                        let w = rng.random_range(0.8..4.5);
                        let d = rng.random_range(0.8..3.5);
                        let h = rng.random_range(0.5..3.0);
                        push_box(&mut self.surfaces, x, y, w, d, h, yaw);
                    }
                    1 => {
                        let len = rng.random_range(4.0..14.0);
                        let h = rng.random_range(1.2..3.0);
                        push_box(&mut self.surfaces, x, y, len, 0.25, h, yaw);
                    }
                    2 => {
                        let radius = rng.random_range(0.08..0.3);
                        let height = rng.random_range(2.0..3.0);
                        self.surfaces.push(Surface::Cylinder {
                            center: V3::new(x, y, 0.0),
                            radius,
                            height,
                        });
                    }
                    _ => {
                        let trunk = rng.random_range(1.2..2.0);
                        self.surfaces.push(Surface::Cylinder {
                            center: V3::new(x, y, 0.0),
                            radius: 0.15,
                            height: trunk,
                        });
                        let crown = rng.random_range(0.8..1.6);
                        self.surfaces.push(Surface::Sphere {
                            center: V3::new(x, y, trunk + 0.7 * crown),
                            radius: crown,
                        });
                    }
                }
            }
        }
    }

    /// Samples exactly `spec.points` points around `sensor` (a world-frame
    /// pose) and returns them in the sensor frame.
    pub fn sample_scan<T: Real>(&self, spec: &SceneSpec, sensor: &Pose<f64>, rng: &mut ChaCha8Rng) -> PointCloud<T> {
        let origin = sensor.translation();
        let range = spec.range;
        let near: Vec<&Surface> = self
            .surfaces
            .iter()
            .filter(|s| {
                let (x, y, r) = s.footprint();
                ((x - origin.x).powi(2) + (y - origin.y).powi(2)).sqrt() - r <= range
            })
            .collect();
        let ground_area = PI * range * range * spec.ground_weight;
        let mut cumulative = Vec::with_capacity(near.len() + 1);
        let mut total = ground_area;
        cumulative.push(total);
        for s in &near {
            total += s.area();
            cumulative.push(total);
        }

        let clutter = if spec.ground_only {
            0
        } else {
            (spec.points as f64 * spec.clutter_fraction).round() as usize
        };
        let to_sensor = sensor.inverse();
        let half_thickness = 0.5 * spec.ground_thickness;
        let mut points = Vec::with_capacity(spec.points);
        let ground = |rng: &mut ChaCha8Rng| {
            let r = range * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..TAU);
            let z = if half_thickness > 0.0 {
                rng.random_range(-half_thickness..=half_thickness)
            } else {
                0.0
            };
            V3::new(origin.x + r * a.cos(), origin.y + r * a.sin(), z)
        };

        for _ in 0..clutter {
            let r = range * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..TAU);
            let w = V3::new(
                origin.x + r * a.cos(),
                origin.y + r * a.sin(),
                rng.random_range(0.0..3.0),
            );
            points.push(w);
        }
        let surface_points = spec.points - clutter;
        let mut attempts = 0usize;
        while points.len() < spec.points {
            attempts += 1;
            let w = if spec.ground_only || near.is_empty() || attempts > 200 * surface_points {
                ground(rng)
            } else {
                let pick = rng.random_range(0.0..total);
                let k = cumulative.partition_point(|&c| c <= pick);
                if k == 0 {
                    ground(rng)
                } else {
                    let w = near[k - 1].sample(rng);
                    if (w.x - origin.x).powi(2) + (w.y - origin.y).powi(2) > range * range {
                        continue;
                    }
                    w
                }
            };
            points.push(w);
        }
        let points = points
            .into_iter()
            .map(|w| {
                let p = to_sensor.transform(&w);
                Point::new(T::lit(p.x), T::lit(p.y), T::lit(p.z))
            })
            .collect();
        PointCloud::from_finite(points, String::new())
    }
}

/// A single structured scene centred on the sensor at the origin.
pub fn generate_scene_cloud<T: Real>(spec: &SceneSpec, seed: u64) -> Result<PointCloud<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut world = World::default();
    let extent = spec.range + 2.0;
    let clear2 = spec.clear_radius.powi(2);
    world.populate(
        spec,
        (-extent, extent, -extent, extent),
        |x, y| x * x + y * y < clear2 || x * x + y * y > extent * extent,
        &mut rng,
    );
    Ok(world.sample_scan(spec, &Pose::identity(), &mut rng))
}

/// Layout of a looped trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub scans: usize,
    /// Distance between consecutive scans, meters.
    pub spacing: f64,
    /// Revisits driven in the original direction.
    pub same_revisits: usize,
    /// Revisits driven in the opposite direction.
    pub reverse_revisits: usize,
    /// Maximum horizontal offset of a revisit from the original pose, meters.
    pub revisit_offset: f64,
    pub heading_jitter_deg: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            scans: 300,
            spacing: 2.0,
            same_revisits: 20,
            reverse_revisits: 20,
            revisit_offset: 1.0,
            heading_jitter_deg: 5.0,
        }
    }
}

/// What a trajectory scan is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanKind {
    Fresh,
    /// Revisit of the fresh scan with this index, same heading.
    SameRevisit(usize),
    /// Revisit of the fresh scan with this index, opposite heading.
    ReverseRevisit(usize),
}

#[derive(Clone, Debug)]
pub struct SyntheticTrajectory<T: Real> {
    pub sequence: Sequence<T>,
    pub kinds: Vec<ScanKind>,
}

/// Per scan: (segment, position) on the route, and the scan kind.
type Layout = (Vec<(usize, usize)>, Vec<ScanKind>);

/// Indices and kinds of the trajectory, before any geometry is sampled.
///
/// Fresh scans form three straight segments on widely separated lanes.
/// After the first segment, a block of same-direction revisits replays part
/// of it; after the second, a block of reverse revisits replays another
/// part backwards.
fn trajectory_layout(spec: &TrajectorySpec) -> Result<Layout> {
    let revisits = spec.same_revisits + spec.reverse_revisits;
    if spec.scans < revisits + 3 || !(spec.spacing > 0.0) {
        return Err(Error::invalid("trajectory", "too few scans for the requested revisits"));
    }
    let fresh = spec.scans - revisits;
    let first = (fresh * 11).div_ceil(20);
    let second = (fresh - first) / 2;
    let third = fresh - first - second;
    let same_start = first / 8;
    let reverse_start = first / 2;
    if same_start + spec.same_revisits > reverse_start || reverse_start + spec.reverse_revisits > first {
        return Err(Error::invalid(
            "trajectory",
            "first segment too short to host the revisits",
        ));
    }

    // (lane, slot) for fresh scans; revisits point at the first lane.
    let mut slots = Vec::with_capacity(spec.scans);
    let mut kinds = Vec::with_capacity(spec.scans);
    for s in 0..first {
        slots.push((0, s));
        kinds.push(ScanKind::Fresh);
    }
    for k in 0..spec.same_revisits {
        slots.push((0, same_start + k));
        kinds.push(ScanKind::SameRevisit(same_start + k));
    }
    for s in 0..second {
        slots.push((1, s));
        kinds.push(ScanKind::Fresh);
    }
    for k in 0..spec.reverse_revisits {
        let original = reverse_start + spec.reverse_revisits - 1 - k;
        slots.push((0, original));
        kinds.push(ScanKind::ReverseRevisit(original));
    }
    for s in 0..third {
        slots.push((2, s));
        kinds.push(ScanKind::Fresh);
    }
    Ok((slots, kinds))
}

pub fn generate_trajectory<T: Real>(
    scene: &SceneSpec,
    spec: &TrajectorySpec,
    seed: u64,
) -> Result<SyntheticTrajectory<T>> {
    scene.validate()?;
    let (slots, kinds) = trajectory_layout(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane_gap = 4.0 * scene.range + 20.0;
    let margin = scene.range + 5.0;

    let mut world = World::default();
    for lane in 0..3 {
        let len = slots.iter().filter(|s| s.0 == lane).map(|s| s.1).max().unwrap_or(0);
        let y = lane as f64 * lane_gap;
        let x1 = len as f64 * spec.spacing + margin;
        let clear = scene.clear_radius;
        world.populate(
            scene,
            (-margin, x1, y - margin, y + margin),
            |_, py| (py - y).abs() < clear,
            &mut rng,
        );
    }

    let jitter = spec.heading_jitter_deg.to_radians();
    let mut poses = Vec::with_capacity(spec.scans);
    for (&(lane, slot), kind) in slots.iter().zip(&kinds) {
        let base = V3::new(slot as f64 * spec.spacing, lane as f64 * lane_gap, 0.0);
        let pose = match kind {
            ScanKind::Fresh => Pose::from_yaw(0.0, base),
            ScanKind::SameRevisit(_) | ScanKind::ReverseRevisit(_) => {
                let r = spec.revisit_offset * rng.random::<f64>().sqrt();
                let a = rng.random_range(0.0..TAU);
                let j = if jitter > 0.0 {
                    rng.random_range(-jitter..=jitter)
                } else {
                    0.0
                };
                let heading = if matches!(kind, ScanKind::ReverseRevisit(_)) {
                    PI + j
                } else {
                    j
                };
                Pose::from_yaw(heading, base + V3::new(r * a.cos(), r * a.sin(), 0.0))
            }
        };
        poses.push(pose);
    }

    let scan_seed = rng.random::<u64>();
    let clouds: Vec<PointCloud<T>> = poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(scan_seed, i as u64));
            world
                .sample_scan(scene, pose, &mut rng)
                .with_frame_id(format!("{i:06}"))
        })
        .collect();
    let poses_t = poses.iter().map(Pose::cast::<T>).collect();
    Ok(SyntheticTrajectory {
        sequence: Sequence::from_clouds("synthetic", clouds, poses_t)?,
        kinds,
    })
}

/// SplitMix64 of `seed + index`, for independent per-item streams.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
