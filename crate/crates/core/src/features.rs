//! Handcrafted local descriptors for keypoints and the cosine cost between
//! two descriptor sets.
//!
//! Every component is computed from quantities that do not change under a
//! rotation about the vertical axis or a translation: covariance
//! eigenvalues, the vertical component of normals, distances and height
//! differences.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::sampling::KeypointSet;
use crate::scalar::Real;
use crate::spatial::{GridIndex, KdTree};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec<T> {
    /// Neighborhood radii, meters.
    pub radii: Vec<T>,
    /// Bins of the normal-angle and radial histograms.
    pub bins: usize,
    /// Neighbors used to fit per-point normals.
    pub normal_k: usize,
    /// Neighbor count `c` is encoded as `c / (c + count_scale)`.
    pub count_scale: T,
}

impl<T: Real> Default for FeatureSpec<T> {
    fn default() -> Self {
        Self {
            radii: vec![T::lit(2.0), T::lit(4.0), T::lit(8.0)],
            bins: 8,
            normal_k: 10,
            count_scale: T::lit(50.0),
        }
    }
}

impl<T: Real> FeatureSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > T::zero())) {
            return Err(Error::invalid("features.radii", "need at least one positive radius"));
        }
        if self.bins == 0 {
            return Err(Error::invalid("features.bins", "must be positive"));
        }
        if self.normal_k < 3 {
            return Err(Error::invalid("features.normal_k", "need at least 3 neighbors"));
        }
        if !(self.count_scale > T::zero()) {
            return Err(Error::invalid("features.count_scale", "must be positive"));
        }
        Ok(())
    }

    /// Values per radius: 3 eigenvalue ratios, two histograms, 2 height
    /// statistics and the neighbor count.
    pub fn values_per_radius(&self) -> usize {
        2 * self.bins + 6
    }

    pub fn dim(&self) -> usize {
        self.radii.len() * self.values_per_radius()
    }

    /// Canonical text form; two specs produce comparable descriptors iff
    /// these strings are equal.
    pub fn canonical(&self) -> String {
        let radii: Vec<String> = self.radii.iter().map(|r| format!("{}", r.as_f64())).collect();
        format!(
            "radii={};bins={};normal_k={};count_scale={}",
            radii.join(","),
            self.bins,
            self.normal_k,
            self.count_scale.as_f64()
        )
    }

    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Unit-norm descriptor rows, one per keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointFeatures<T: Real> {
    pub keypoints: KeypointSet<T>,
    pub features: DMatrix<T>,
    pub spec_hash: u64,
}

impl<T: Real> KeypointFeatures<T> {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Unit normals from the `k` nearest neighbors (the point included), as the
/// eigenvector of the smallest covariance eigenvalue, oriented towards the
/// sensor origin.
pub fn estimate_normals<T: Real>(tree: &KdTree<T>, k: usize) -> Vec<Vector3<T>> {
    tree.points()
        .par_iter()
        .map(|p| {
            let nbrs = tree.knn(p, k);
            let pts: Vec<Vector3<T>> = nbrs.iter().map(|n| tree.points()[n.index]).collect();
            let mut n = covariance(&pts)
                .map(|c| smallest_eigenvector(&c))
                .unwrap_or_else(Vector3::z);
            if n.dot(p) > T::zero() {
                n = -n;
            }
            n
        })
        .collect()
}

fn covariance<T: Real>(pts: &[Vector3<T>]) -> Option<Matrix3<T>> {
    if pts.len() < 3 {
        return None;
    }
    let n = T::from_usize(pts.len()).expect("count fits");
    let mean = pts.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = pts.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    });
    Some(cov / n)
}

/// Eigenvalues in descending order.
fn sorted_eigenvalues<T: Real>(m: &Matrix3<T>) -> [T; 3] {
    let e = SymmetricEigen::new(*m).eigenvalues;
    let mut v = [e[0], e[1], e[2]];
    v.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    v.map(|x| x.max(T::zero()))
}

fn smallest_eigenvector<T: Real>(m: &Matrix3<T>) -> Vector3<T> {
    let e = SymmetricEigen::new(*m);
    let mut best = 0;
    for i in 1..3 {
        if e.eigenvalues[i] < e.eigenvalues[best] {
            best = i;
        }
    }
    e.eigenvectors.column(best).normalize()
}

pub fn extract_features<T: Real>(
    cloud: &PointCloud<T>,
    keypoints: &KeypointSet<T>,
    spec: &FeatureSpec<T>,
) -> Result<KeypointFeatures<T>> {
    spec.validate()?;
    if keypoints.is_empty() {
        return Err(Error::Empty("keypoint set"));
    }
    let coords = cloud.coords();
    if let Some(&bad) = keypoints.indices().iter().find(|&&i| i >= coords.len()) {
        return Err(Error::invalid("keypoints", format!("index {bad} not in cloud")));
    }
    let max_radius = spec.radii.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let tree = KdTree::new(coords.clone());
    let normals = estimate_normals(&tree, spec.normal_k);
    let grid = GridIndex::new(coords, max_radius);

    let dim = spec.dim();
    let rows: Vec<Vec<T>> = keypoints
        .indices()
        .par_iter()
        .map(|&k| keypoint_row(&grid, &normals, k, spec))
        .collect();
    let mut features = DMatrix::zeros(rows.len(), dim);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            features[(i, j)] = *v;
        }
    }
    Ok(KeypointFeatures {
        keypoints: keypoints.clone(),
        features,
        spec_hash: spec.hash(),
    })
}

fn keypoint_row<T: Real>(grid: &GridIndex<T>, normals: &[Vector3<T>], k: usize, spec: &FeatureSpec<T>) -> Vec<T> {
    let center = grid.points()[k];
    let max_radius = spec.radii.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let all: Vec<(usize, T)> = grid
        .within_radius(&center, max_radius)
        .into_iter()
        .filter(|&(i, _)| i != k)
        .collect();
    let bins = spec.bins;
    let bins_t = T::from_usize(bins).expect("bins fit");
    let bin_of = |v: T| ((v * bins_t).floor().as_f64().max(0.0) as usize).min(bins - 1);

    let mut row = Vec::with_capacity(spec.dim());
    for &r in &spec.radii {
        let nbrs: Vec<(usize, T)> = all.iter().copied().filter(|&(_, d)| d <= r).collect();
        let count = nbrs.len();
        let pts: Vec<Vector3<T>> = nbrs.iter().map(|&(i, _)| grid.points()[i]).collect();

        match covariance(&pts) {
            Some(c) => {
                let [l1, l2, l3] = sorted_eigenvalues(&c);
                if l1 > T::zero() {
                    row.extend([(l1 - l2) / l1, (l2 - l3) / l1, l3 / l1]);
                } else {
                    row.extend([T::zero(); 3]);
                }
            }
            None => row.extend([T::zero(); 3]),
        }

        let mut normal_hist = vec![T::zero(); bins];
        let mut radial_hist = vec![T::zero(); bins];
        let mut heights = Vec::with_capacity(count);
        for &(i, d) in &nbrs {
            normal_hist[bin_of(normals[i].z.abs())] += T::one();
            radial_hist[bin_of(d / r)] += T::one();
            heights.push((grid.points()[i].z - center.z) / r);
        }
        if count > 0 {
            let n = T::from_usize(count).expect("count fits");
            normal_hist
                .iter_mut()
                .chain(radial_hist.iter_mut())
                .for_each(|v| *v /= n);
            let mean = heights.iter().fold(T::zero(), |a, &h| a + h) / n;
            let var = heights.iter().fold(T::zero(), |a, &h| a + (h - mean) * (h - mean)) / n;
            row.extend(normal_hist);
            row.extend(radial_hist);
            row.extend([mean, var.sqrt()]);
        } else {
            row.extend(normal_hist);
            row.extend(radial_hist);
            row.extend([T::zero(); 2]);
        }
        let c = T::from_usize(count).expect("count fits");
        row.push(c / (c + spec.count_scale));
    }

    let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    if norm > T::zero() {
        row.iter_mut().for_each(|v| *v /= norm);
    } else {
        let e = empty_value::<T>(row.len());
        row.iter_mut().for_each(|v| *v = e);
    }
    row
}

/// Component of the unit vector assigned to keypoints without neighbors.
pub fn empty_value<T: Real>(dim: usize) -> T {
    T::one() / T::from_usize(dim).expect("dim fits").sqrt()
}

/// `C_ij = 1 − a_i · b_j`, clamped to `[0, 2]`.
pub fn cost_matrix<T: Real>(a: &KeypointFeatures<T>, b: &KeypointFeatures<T>) -> Result<DMatrix<T>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if a.spec_hash != b.spec_hash {
        return Err(Error::SpecMismatch(a.spec_hash, b.spec_hash));
    }
    let dots = &a.features * b.features.transpose();
    let two = T::lit(2.0);
    Ok(dots.map(|d| (T::one() - d).max(T::zero()).min(two)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{apply_pose, Pose};
    use crate::ingest::synthetic::{generate_scene_cloud, SceneSpec};
    use crate::sampling::farthest_point_sampling;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(n: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = vec![Vector3::zeros()];
        pts.extend((0..n).map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0)));
        PointCloud::from_coords(pts).unwrap()
    }

    #[test]
    fn plane_keypoint() {
        let cloud = plane(3000, 1);
        let kp = KeypointSet::from_indices(&cloud, vec![0]).unwrap();
        let spec = FeatureSpec::default();
        let f = extract_features(&cloud, &kp, &spec).unwrap();
        assert_eq!(f.dim(), 66);
        let row: Vec<f64> = f.features.row(0).iter().copied().collect();
        let per = spec.values_per_radius();
        for r in 0..3 {
            let block = &row[r * per..(r + 1) * per];
            assert!(block[2].abs() < 1e-12, "scattering {}", block[2]);
            let normal_hist = &block[3..3 + spec.bins];
            let vertical = normal_hist[spec.bins - 1];
            assert!(vertical > 0.0 && normal_hist[..spec.bins - 1].iter().all(|v| *v == 0.0));
        }
        assert!((f.features.row(0).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn isolated_keypoint_gets_empty_vector() {
        let cloud = PointCloud::from_coords([Vector3::zeros(), Vector3::new(50.0, 0.0, 0.0)]).unwrap();
        let kp = KeypointSet::from_indices(&cloud, vec![0]).unwrap();
        let f = extract_features(&cloud, &kp, &FeatureSpec::default()).unwrap();
        let e = empty_value::<f64>(66);
        assert!(f.features.iter().all(|v| (*v - e).abs() < 1e-15));
    }

    #[test]
    fn empty_keypoints_rejected() {
        let cloud = plane(10, 2);
        let kp = KeypointSet::from_indices(&cloud, vec![]).unwrap();
        assert!(matches!(
            extract_features(&cloud, &kp, &FeatureSpec::default()),
            Err(Error::Empty(_))
        ));
    }

    fn scene_features(pose: &Pose<f64>) -> (KeypointFeatures<f64>, KeypointFeatures<f64>) {
        let spec = SceneSpec {
            points: 3000,
            range: 12.0,
            ..SceneSpec::default()
        };
        let cloud = generate_scene_cloud::<f64>(&spec, 21).unwrap();
        let moved = apply_pose(pose, &cloud);
        let kp = farthest_point_sampling(&cloud, 64, 0).unwrap();
        let kp_moved = KeypointSet::from_indices(&moved, kp.indices().to_vec()).unwrap();
        for (a, b) in kp.coordinates().iter().zip(kp_moved.coordinates()) {
            assert!((pose.transform(a) - b).norm() < 1e-9);
        }
        let fs = FeatureSpec::default();
        (
            extract_features(&cloud, &kp, &fs).unwrap(),
            extract_features(&moved, &kp_moved, &fs).unwrap(),
        )
    }

    #[test]
    fn yaw_invariance() {
        let (a, b) = scene_features(&Pose::from_yaw(37f64.to_radians(), Vector3::zeros()));
        let diff = (&a.features - &b.features).amax();
        assert!(diff < 1e-5, "max difference {diff}");
    }

    #[test]
    fn translation_invariance() {
        let (a, b) = scene_features(&Pose::from_translation(Vector3::new(3.25, -7.5, 0.75)));
        let diff = (&a.features - &b.features).amax();
        assert!(diff < 1e-9, "max difference {diff}");
    }

    fn feats(rows: &[&[f64]]) -> KeypointFeatures<f64> {
        let cloud = PointCloud::from_coords(rows.iter().map(|_| Vector3::zeros())).unwrap();
        KeypointFeatures {
            keypoints: KeypointSet::from_indices(&cloud, (0..rows.len()).collect()).unwrap(),
            features: DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]),
            spec_hash: 7,
        }
    }

    #[test]
    fn cost_examples() {
        let a = feats(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = cost_matrix(&a, &a).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        let b = feats(&[&[-1.0, 0.0]]);
        assert_eq!(cost_matrix(&a, &b).unwrap()[(0, 0)], 2.0);
        let wide = feats(&[&[1.0, 0.0, 0.0]]);
        assert!(matches!(cost_matrix(&a, &wide), Err(Error::DimensionMismatch { .. })));
        let mut other = a.clone();
        other.spec_hash = 8;
        assert!(matches!(cost_matrix(&a, &other), Err(Error::SpecMismatch(7, 8))));
    }

    #[test]
    fn cost_matches_naive_loop() {
        let (a, b) = scene_features(&Pose::from_yaw(0.3, Vector3::new(1.0, 2.0, 0.0)));
        let c = cost_matrix(&a, &b).unwrap();
        for i in 0..a.len() {
            for j in 0..b.len() {
                let dot: f64 = (0..a.dim()).map(|k| a.features[(i, k)] * b.features[(j, k)]).sum();
                assert!((c[(i, j)] - (1.0 - dot)).abs() < 1e-12);
            }
        }
        let self_cost = cost_matrix(&a, &a).unwrap();
        assert!((0..a.len()).all(|i| self_cost[(i, i)].abs() < 1e-12));
        assert!(a.features.row_iter().all(|r| (r.norm() - 1.0).abs() < 1e-6));
    }

    #[test]
    fn spec_hash_tracks_canonical_form() {
        let a = FeatureSpec::<f64>::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.bins = 9;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b.dim(), 72);
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
