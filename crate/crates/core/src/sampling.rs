//! Voxel-grid downsampling and farthest point sampling.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud};
use crate::scalar::Real;

/// Cubic voxels over an axis-aligned crop box.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGridSpec<T> {
    pub voxel_size: T,
    pub min: Vector3<T>,
    pub max: Vector3<T>,
}

impl<T: Real> Default for VoxelGridSpec<T> {
    fn default() -> Self {
        Self {
            voxel_size: T::lit(0.1),
            min: Vector3::new(T::lit(-70.4), T::lit(-70.4), T::lit(-1.0)),
            max: Vector3::new(T::lit(70.4), T::lit(70.4), T::lit(3.0)),
        }
    }
}

impl<T: Real> VoxelGridSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > T::zero()) {
            return Err(Error::invalid("voxel.size", "must be positive"));
        }
        if (0..3).any(|a| !(self.max[a] > self.min[a])) {
            return Err(Error::invalid("voxel.bounds", "max must exceed min on every axis"));
        }
        Ok(())
    }

    fn contains(&self, p: &Vector3<T>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Voxel key ordered z-major, then y, then x.
    fn key(&self, p: &Vector3<T>) -> [i64; 3] {
        let k = |a: usize| ((p[a] - self.min[a]) / self.voxel_size).floor().as_f64() as i64;
        [k(2), k(1), k(0)]
    }
}

/// Replaces the points of every occupied voxel by their centroid (intensity
/// averaged too). Points outside the bounds are dropped; the result may be
/// empty. Output is in ascending voxel order.
pub fn voxel_downsample<T: Real>(cloud: &PointCloud<T>, spec: &VoxelGridSpec<T>) -> Result<PointCloud<T>> {
    spec.validate()?;
    cloud.ensure_non_empty()?;
    let mut voxels: BTreeMap<[i64; 3], (Vector3<T>, T, usize)> = BTreeMap::new();
    for p in cloud.points() {
        let c = p.coords();
        if !spec.contains(&c) {
            continue;
        }
        let e = voxels.entry(spec.key(&c)).or_insert((Vector3::zeros(), T::zero(), 0));
        e.0 += c;
        e.1 += p.intensity;
        e.2 += 1;
    }
    let points = voxels
        .into_values()
        .map(|(sum, intensity, n)| {
            let n = T::from_usize(n).expect("count fits");
            Point::from_coords(&(sum / n), intensity / n)
        })
        .collect();
    Ok(PointCloud::from_finite(points, cloud.frame_id.clone()))
}

/// Indices into a source cloud together with their coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet<T: Real> {
    indices: Vec<usize>,
    coordinates: Vec<Vector3<T>>,
}

impl<T: Real> KeypointSet<T> {
    /// Selects `indices` from `cloud`. Indices must be unique and in range.
    pub fn from_indices(cloud: &PointCloud<T>, indices: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; cloud.len()];
        for &i in &indices {
            if i >= cloud.len() {
                return Err(Error::invalid("keypoints", format!("index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid("keypoints", format!("duplicate index {i}")));
            }
        }
        let coordinates = indices.iter().map(|&i| cloud.points()[i].coords()).collect();
        Ok(Self { indices, coordinates })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn coordinates(&self) -> &[Vector3<T>] {
        &self.coordinates
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Greedy max-min sampling of `n` points starting at `seed_index`.
///
/// Each step adds the point farthest from the already chosen set, ties going
/// to the lowest index. Returns every index when `n >= cloud.len()`.
pub fn farthest_point_sampling<T: Real>(cloud: &PointCloud<T>, n: usize, seed_index: usize) -> Result<KeypointSet<T>> {
    cloud.ensure_non_empty()?;
    if n == 0 {
        return Err(Error::invalid("keypoints", "at least one keypoint is required"));
    }
    if seed_index >= cloud.len() {
        return Err(Error::invalid("fps.seed_index", "out of range"));
    }
    if n >= cloud.len() {
        return KeypointSet::from_indices(cloud, (0..cloud.len()).collect());
    }
    let coords = cloud.coords();
    let mut dist = vec![T::max_value().expect("bounded"); coords.len()];
    let mut chosen = Vec::with_capacity(n);
    let mut current = seed_index;
    for _ in 0..n {
        chosen.push(current);
        dist[current] = -T::one();
        let c = coords[current];
        let mut best = 0;
        let mut best_d = -T::one();
        for (i, (p, d)) in coords.iter().zip(dist.iter_mut()).enumerate() {
            if *d < T::zero() {
                continue;
            }
            let d2 = (p - c).norm_squared();
            if d2 < *d {
                *d = d2;
            }
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
    }
    KeypointSet::from_indices(cloud, chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn cloud(coords: &[[f64; 3]]) -> PointCloud<f64> {
        PointCloud::from_coords(coords.iter().map(|c| Vector3::from(*c))).unwrap()
    }

    #[test]
    fn singleton_and_midpoint() {
        let spec = VoxelGridSpec::default();
        let one = cloud(&[[1.23, -4.5, 0.7]]);
        assert_eq!(voxel_downsample(&one, &spec).unwrap(), one);

        let two = cloud(&[[0.0, 0.0, 0.0], [0.04, 0.0, 0.0]]);
        let out = voxel_downsample(&two, &spec).unwrap();
        assert_eq!(out.len(), 1);
        assert!((out.points()[0].x - 0.02).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_is_empty_not_error() {
        let far = cloud(&[[100.0, 0.0, 0.0]]);
        assert!(voxel_downsample(&far, &VoxelGridSpec::default()).unwrap().is_empty());
        assert!(voxel_downsample(&PointCloud::<f64>::default(), &VoxelGridSpec::default()).is_err());
    }

    #[test]
    fn voxel_matches_bucketing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let coords: Vec<[f64; 3]> = (0..1000)
            .map(|_| {
                [
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-0.9..2.9),
                ]
            })
            .collect();
        let spec = VoxelGridSpec {
            voxel_size: 0.3,
            ..VoxelGridSpec::default()
        };
        let out = voxel_downsample(&cloud(&coords), &spec).unwrap();

        let mut buckets: HashMap<[i64; 3], Vec<[f64; 3]>> = HashMap::new();
        for c in &coords {
            let k = |a: usize| ((c[a] - spec.min[a]) / 0.3).floor() as i64;
            buckets.entry([k(0), k(1), k(2)]).or_default().push(*c);
        }
        assert_eq!(out.len(), buckets.len());
        let mut keys = Vec::new();
        for p in out.points() {
            let k = spec.key(&p.coords());
            let members = &buckets[&[k[2], k[1], k[0]]];
            let n = members.len() as f64;
            for a in 0..3 {
                let mean = members.iter().map(|m| m[a]).sum::<f64>() / n;
                assert!((p.coords()[a] - mean).abs() < 1e-12);
            }
            keys.push(k);
        }
        assert!(
            keys.windows(2).all(|w| w[0] < w[1]),
            "distinct voxels in ascending order"
        );
    }

    #[test]
    fn fps_examples() {
        let square = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        assert_eq!(farthest_point_sampling(&square, 2, 0).unwrap().indices(), &[0, 3]);
        assert_eq!(farthest_point_sampling(&square, 4, 0).unwrap().indices(), &[0, 1, 2, 3]);

        let line: Vec<[f64; 3]> = (0..=10).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert_eq!(
            farthest_point_sampling(&cloud(&line), 3, 0).unwrap().indices(),
            &[0, 10, 5]
        );
        assert!(farthest_point_sampling(&PointCloud::<f64>::default(), 3, 0).is_err());
        assert!(farthest_point_sampling(&square, 0, 0).is_err());
    }

    fn min_pairwise(coords: &[Vector3<f64>], sel: &[usize]) -> f64 {
        let mut m = f64::INFINITY;
        for (a, &i) in sel.iter().enumerate() {
            for &j in &sel[a + 1..] {
                m = m.min((coords[i] - coords[j]).norm_squared());
            }
        }
        m
    }

    /// Every selection a greedy max-min run could produce when ties are
    /// broken arbitrarily.
    fn greedy_branches(coords: &[Vector3<f64>], sel: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if sel.len() == n {
            out.push(sel.clone());
            return;
        }
        let dist = |i: usize| {
            sel.iter()
                .map(|&j| (coords[i] - coords[j]).norm_squared())
                .fold(f64::INFINITY, f64::min)
        };
        let best = (0..coords.len())
            .filter(|i| !sel.contains(i))
            .map(dist)
            .fold(f64::MIN, f64::max);
        let ties: Vec<usize> = (0..coords.len())
            .filter(|i| !sel.contains(i) && dist(*i) == best)
            .collect();
        for t in ties {
            sel.push(t);
            greedy_branches(coords, sel, n, out);
            sel.pop();
        }
    }

    /// Largest achievable min pairwise distance over all `n`-subsets.
    fn best_dispersion(coords: &[Vector3<f64>], n: usize) -> f64 {
        fn rec(coords: &[Vector3<f64>], start: usize, sel: &mut Vec<usize>, n: usize, best: &mut f64) {
            if sel.len() == n {
                *best = best.max(min_pairwise(coords, sel));
                return;
            }
            for i in start..coords.len() {
                sel.push(i);
                rec(coords, i + 1, sel, n, best);
                sel.pop();
            }
        }
        let mut best = 0.0;
        rec(coords, 0, &mut Vec::new(), n, &mut best);
        best
    }

    #[test]
    fn tie_breaking_is_not_always_the_best_branch() {
        // Lowest-index tie breaking reaches min squared distance 4 here while
        // the other tie branch reaches 5.
        let c = cloud(&[
            [3.0, 1.0, 2.0],
            [1.0, 2.0, 0.0],
            [2.0, 3.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 2.0],
        ]);
        let got = farthest_point_sampling(&c, 4, 0).unwrap();
        assert_eq!(got.indices(), &[0, 4, 1, 3]);
        assert_eq!(min_pairwise(&c.coords(), got.indices()), 4.0);
        assert_eq!(min_pairwise(&c.coords(), &[0, 4, 2, 3]), 5.0);
    }

    proptest! {
        #[test]
        fn fps_is_a_greedy_selection(
            raw in prop::collection::vec(prop::array::uniform3(0i32..4), 2..=12),
            n in 1usize..=5,
        ) {
            let coords: Vec<[f64; 3]> = raw.iter().map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect();
            let c = cloud(&coords);
            let got = farthest_point_sampling(&c, n, 0).unwrap();
            prop_assert_eq!(got.len(), n.min(c.len()));
            if n < c.len() {
                let pts = c.coords();
                let mut branches = Vec::new();
                greedy_branches(&pts, &mut vec![0], n, &mut branches);
                prop_assert!(branches.iter().any(|b| b == got.indices()));
                // Greedy max-min is within a factor two of the optimum.
                let ours = min_pairwise(&pts, got.indices());
                prop_assert!(4.0 * ours >= best_dispersion(&pts, n));
                prop_assert_eq!(&farthest_point_sampling(&c, n, 0).unwrap(), &got);
            }
        }

        #[test]
        fn voxel_is_idempotent(raw in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -0.9f64..2.9).prop_map(|(x, y, z)| [x, y, z]), 1..200)) {
            let spec = VoxelGridSpec { voxel_size: 0.25, ..VoxelGridSpec::default() };
            let once = voxel_downsample(&cloud(&raw), &spec).unwrap();
            let twice = voxel_downsample(&once, &spec).unwrap();
            prop_assert_eq!(once.len(), twice.len());
            for (a, b) in once.points().iter().zip(twice.points()) {
                prop_assert!((a.coords() - b.coords()).norm() < 1e-12);
            }
        }
    }
}
