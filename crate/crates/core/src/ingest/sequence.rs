use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Pose};
use crate::ingest::kitti;
use crate::scalar::Real;

/// Revisit distance under which two scans count as the same place.
pub const DEFAULT_LOOP_RADIUS: f64 = 4.0;
/// Scans this close in index are never loop candidates.
pub const DEFAULT_EXCLUSION_WINDOW: usize = 50;

/// Where a scan's points come from.
#[derive(Clone, Debug)]
pub enum ScanHandle<T: Real> {
    File(PathBuf),
    Memory(Arc<PointCloud<T>>),
}

impl<T: Real> ScanHandle<T> {
    pub fn load(&self) -> Result<PointCloud<T>> {
        match self {
            ScanHandle::File(path) => kitti::read_scan(path),
            ScanHandle::Memory(cloud) => Ok((**cloud).clone()),
        }
    }
}

/// Scans with one world-frame pose each. Scans load on demand.
#[derive(Clone, Debug)]
pub struct Sequence<T: Real> {
    pub name: String,
    scans: Vec<ScanHandle<T>>,
    poses: Vec<Pose<T>>,
}

impl<T: Real> Sequence<T> {
    pub fn new(name: impl Into<String>, scans: Vec<ScanHandle<T>>, poses: Vec<Pose<T>>) -> Result<Self> {
        if scans.len() != poses.len() {
            return Err(Error::DimensionMismatch {
                expected: poses.len(),
                found: scans.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            scans,
            poses,
        })
    }

    pub fn from_clouds(name: impl Into<String>, clouds: Vec<PointCloud<T>>, poses: Vec<Pose<T>>) -> Result<Self> {
        let scans = clouds.into_iter().map(|c| ScanHandle::Memory(Arc::new(c))).collect();
        Self::new(name, scans, poses)
    }

    /// Opens a KITTI-style directory: every `*.bin` in `scan_dir` (sorted by
    /// file name) paired with the lines of `poses_path`.
    pub fn open(scan_dir: impl AsRef<Path>, poses_path: impl AsRef<Path>) -> Result<Self> {
        let scan_dir = scan_dir.as_ref();
        let mut files: Vec<PathBuf> = std::fs::read_dir(scan_dir)
            .map_err(|e| Error::io(scan_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
            .collect();
        files.sort();
        let poses = kitti::read_poses(poses_path)?;
        let name = scan_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(name, files.into_iter().map(ScanHandle::File).collect(), poses)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn poses(&self) -> &[Pose<T>] {
        &self.poses
    }

    pub fn scan(&self, index: usize) -> &ScanHandle<T> {
        &self.scans[index]
    }

    pub fn load_scan(&self, index: usize) -> Result<PointCloud<T>> {
        self.scans[index].load()
    }

    /// Pose taking points of scan `from` into the frame of scan `to`.
    pub fn relative_pose(&self, from: usize, to: usize) -> Pose<T> {
        self.poses[to].inverse().compose(&self.poses[from])
    }

    pub fn loop_groundtruth(&self, radius: f64, exclusion: usize) -> LoopGroundtruth {
        build_loop_groundtruth(&self.poses, radius, exclusion)
    }
}

/// All `(i, j)` with `i > j + exclusion_window` whose poses lie within
/// `loop_radius` of each other.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopGroundtruth {
    pairs: BTreeSet<(usize, usize)>,
    has_loop: Vec<bool>,
    pub loop_radius: f64,
    pub exclusion_window: usize,
}

impl LoopGroundtruth {
    pub fn pairs(&self) -> &BTreeSet<(usize, usize)> {
        &self.pairs
    }

    pub fn is_loop(&self, i: usize, j: usize) -> bool {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        self.pairs.contains(&(hi, lo))
    }

    /// Whether scan `i` has any earlier true loop partner.
    pub fn has_loop(&self, i: usize) -> bool {
        self.has_loop.get(i).copied().unwrap_or(false)
    }

    pub fn scan_count(&self) -> usize {
        self.has_loop.len()
    }

    /// Whether `(i, j)` lies outside the exclusion window.
    pub fn eligible(&self, i: usize, j: usize) -> bool {
        i > j && i - j > self.exclusion_window
    }
}

pub fn build_loop_groundtruth<T: Real>(poses: &[Pose<T>], radius: f64, exclusion: usize) -> LoopGroundtruth {
    let positions: Vec<[f64; 3]> = poses
        .iter()
        .map(|p| {
            let t = p.translation();
            [t.x.as_f64(), t.y.as_f64(), t.z.as_f64()]
        })
        .collect();
    let r2 = radius * radius;
    let mut pairs = BTreeSet::new();
    let mut has_loop = vec![false; poses.len()];
    for i in 0..positions.len() {
        let Some(last) = i.checked_sub(exclusion + 1) else {
            continue;
        };
        for j in 0..=last {
            let d2: f64 = (0..3).map(|a| (positions[i][a] - positions[j][a]).powi(2)).sum();
            if d2 <= r2 {
                pairs.insert((i, j));
                has_loop[i] = true;
            }
        }
    }
    LoopGroundtruth {
        pairs,
        has_loop,
        loop_radius: radius,
        exclusion_window: exclusion,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn line(n: usize, spacing: f64) -> Vec<Pose<f64>> {
        (0..n)
            .map(|i| Pose::from_translation(Vector3::new(i as f64 * spacing, 0.0, 0.0)))
            .collect()
    }

    #[test]
    fn straight_line_has_no_loops() {
        let gt = build_loop_groundtruth(&line(200, 1.0), DEFAULT_LOOP_RADIUS, DEFAULT_EXCLUSION_WINDOW);
        assert!(gt.pairs().is_empty());
    }

    #[test]
    fn return_to_start_matches_brute_force() {
        // Out along x for 50 scans, back along a parallel track, ending on scan 0.
        let mut poses = line(51, 1.0);
        for k in 1..=50 {
            poses.push(Pose::from_translation(Vector3::new(50.0 - k as f64, 0.5, 0.0)));
        }
        poses[100] = Pose::identity();
        let gt = build_loop_groundtruth(&poses, 4.0, 50);

        let mut brute = BTreeSet::new();
        for i in 0..poses.len() {
            for j in 0..i {
                if i - j > 50 && (poses[i].translation() - poses[j].translation()).norm() <= 4.0 {
                    brute.insert((i, j));
                }
            }
        }
        assert_eq!(gt.pairs(), &brute);
        for j in 0..=4 {
            assert!(gt.is_loop(100, j), "(100, {j})");
        }
        assert!(!gt.is_loop(100, 5));
        assert!(gt.has_loop(100));
        assert!(!gt.has_loop(10));
    }

    #[test]
    fn zero_radius_keeps_exact_coincidences() {
        let mut poses = line(60, 1.0);
        poses.push(poses[3]);
        poses.push(Pose::from_translation(Vector3::new(3.0 + 1e-9, 0.0, 0.0)));
        let gt = build_loop_groundtruth(&poses, 0.0, 50);
        assert_eq!(gt.pairs().iter().copied().collect::<Vec<_>>(), vec![(60, 3)]);
    }

    #[test]
    fn sequence_lengths_must_match() {
        let poses = line(3, 1.0);
        assert!(Sequence::<f64>::from_clouds("s", vec![PointCloud::default()], poses).is_err());
    }
}
