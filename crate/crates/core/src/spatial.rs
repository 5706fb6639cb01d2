//! Exact nearest-neighbor structures over 3D points.
//!
//! [`KdTree`] answers nearest, k-nearest and radius queries; [`GridIndex`]
//! is a hashed uniform grid for fixed-radius queries. Both return exact
//! results with ties broken by the lower point index.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::scalar::Real;

/// Static 3D kd-tree stored as a permutation of point indices.
///
/// The subtree over `order[lo..hi]` splits at `mid = (lo + hi) / 2` on the
/// axis recorded in `axes[mid]`.
#[derive(Clone, Debug)]
pub struct KdTree<T: Real> {
    points: Vec<Vector3<T>>,
    order: Vec<usize>,
    axes: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor<T> {
    pub index: usize,
    pub dist2: T,
}

impl<T: Real> KdTree<T> {
    pub fn new(points: Vec<Vector3<T>>) -> Self {
        let n = points.len();
        let mut tree = Self {
            order: (0..n).collect(),
            axes: vec![0; n],
            points,
        };
        tree.build(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<T>] {
        &self.points
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        // Split on the axis with the widest extent.
        let mut min = self.points[self.order[lo]];
        let mut max = min;
        for &i in &self.order[lo..hi] {
            let p = &self.points[i];
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let extent = max - min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = (lo + hi) / 2;
        let points = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            points[a][axis]
                .partial_cmp(&points[b][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Nearest point, or `None` for an empty tree.
    pub fn nearest(&self, query: &Vector3<T>) -> Option<Neighbor<T>> {
        let mut best = None;
        self.nearest_rec(query, 0, self.points.len(), &mut best);
        best
    }

    /// Nearest point strictly closer than `radius`.
    pub fn nearest_within(&self, query: &Vector3<T>, radius: T) -> Option<Neighbor<T>> {
        let mut best = Some(Neighbor {
            index: usize::MAX,
            dist2: radius * radius,
        });
        self.nearest_rec(query, 0, self.points.len(), &mut best);
        best.filter(|n| n.index != usize::MAX)
    }

    fn nearest_rec(&self, q: &Vector3<T>, lo: usize, hi: usize, best: &mut Option<Neighbor<T>>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let index = self.order[mid];
        let p = &self.points[index];
        let d2 = (p - q).norm_squared();
        let better = match best {
            None => true,
            Some(b) => d2 < b.dist2 || (d2 == b.dist2 && index < b.index),
        };
        if better {
            *best = Some(Neighbor { index, dist2: d2 });
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (first, second) = if diff <= T::zero() {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_rec(q, first.0, first.1, best);
        if best.is_none_or(|b| diff * diff <= b.dist2) {
            self.nearest_rec(q, second.0, second.1, best);
        }
    }

    /// The `k` nearest points sorted by distance, then index.
    pub fn knn(&self, query: &Vector3<T>, k: usize) -> Vec<Neighbor<T>> {
        if k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<Neighbor<T>> = Vec::with_capacity(k + 1);
        self.knn_rec(query, k, 0, self.points.len(), &mut heap);
        heap
    }

    fn knn_rec(&self, q: &Vector3<T>, k: usize, lo: usize, hi: usize, found: &mut Vec<Neighbor<T>>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let index = self.order[mid];
        let p = &self.points[index];
        let d2 = (p - q).norm_squared();
        insert_sorted(found, Neighbor { index, dist2: d2 }, k);
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (first, second) = if diff <= T::zero() {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(q, k, first.0, first.1, found);
        if found.len() < k || diff * diff <= found[found.len() - 1].dist2 {
            self.knn_rec(q, k, second.0, second.1, found);
        }
    }

    /// Indices within `radius` (inclusive), ascending.
    pub fn within_radius(&self, query: &Vector3<T>, radius: T) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_rec(query, radius * radius, 0, self.points.len(), &mut out);
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, q: &Vector3<T>, r2: T, lo: usize, hi: usize, out: &mut Vec<usize>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let index = self.order[mid];
        let p = &self.points[index];
        if (p - q).norm_squared() <= r2 {
            out.push(index);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        if diff <= T::zero() || diff * diff <= r2 {
            self.radius_rec(q, r2, lo, mid, out);
        }
        if diff >= T::zero() || diff * diff <= r2 {
            self.radius_rec(q, r2, mid + 1, hi, out);
        }
    }
}

fn insert_sorted<T: Real>(found: &mut Vec<Neighbor<T>>, n: Neighbor<T>, k: usize) {
    let key = |a: &Neighbor<T>| (a.dist2, a.index);
    if found.len() == k {
        let last = key(&found[k - 1]);
        if (n.dist2, n.index) >= last {
            return;
        }
    }
    let pos = found.partition_point(|a| key(a) < (n.dist2, n.index));
    found.insert(pos, n);
    found.truncate(k);
}

/// Uniform hashed grid for radius queries up to the cell size.
#[derive(Clone, Debug)]
pub struct GridIndex<T: Real> {
    cell: T,
    cells: HashMap<[i64; 3], Vec<usize>>,
    points: Vec<Vector3<T>>,
}

impl<T: Real> GridIndex<T> {
    pub fn new(points: Vec<Vector3<T>>, cell: T) -> Self {
        assert!(cell > T::zero(), "grid cell size must be positive");
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_key(p, cell)).or_default().push(i);
        }
        Self { cell, cells, points }
    }

    pub fn points(&self) -> &[Vector3<T>] {
        &self.points
    }

    /// Neighbors within `radius` (inclusive) as `(index, distance)`,
    /// ascending by index. Requires `radius <= cell`.
    pub fn within_radius(&self, query: &Vector3<T>, radius: T) -> Vec<(usize, T)> {
        assert!(radius <= self.cell, "query radius exceeds grid cell");
        let center = cell_key(query, self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                    if let Some(members) = self.cells.get(&key) {
                        for &i in members {
                            let d2 = (self.points[i] - query).norm_squared();
                            if d2 <= r2 {
                                out.push((i, d2.sqrt()));
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable_by_key(|&(i, _)| i);
        out
    }
}

fn cell_key<T: Real>(p: &Vector3<T>, cell: T) -> [i64; 3] {
    let k = |v: T| (v / cell).floor().as_f64() as i64;
    [k(p.x), k(p.y), k(p.z)]
}
