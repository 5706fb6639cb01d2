//! Feature-matching RANSAC and ICP refinement.

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{cost_matrix, estimate_normals, KeypointFeatures};
use crate::geom::{rotation_angle, PointCloud, Pose, PoseError};
use crate::scalar::Real;
use crate::spatial::KdTree;
use crate::transport::weighted_svd;

/// Successful alignment: strictly below both thresholds.
pub const SUCCESS_TRANSLATION_M: f64 = 2.0;
pub const SUCCESS_ROTATION_DEG: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult<T: Real> {
    pub pose: Pose<T>,
    /// RANSAC: inliers over matches. ICP: source points with a correspondence.
    pub fitness: T,
    pub inlier_rmse: T,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match<T> {
    pub source: usize,
    pub target: usize,
    pub cost: T,
}

/// Nearest target row for every source row by cosine cost, optionally
/// keeping only mutual nearest pairs. Sorted by cost, then source index.
pub fn match_features<T: Real>(
    a: &KeypointFeatures<T>,
    b: &KeypointFeatures<T>,
    mutual: bool,
) -> Result<Vec<Match<T>>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("feature set"));
    }
    let cost = cost_matrix(a, b)?;
    let row_best: Vec<usize> = (0..cost.nrows()).map(|i| argmin(cost.row(i).iter().copied())).collect();
    let col_best: Vec<usize> = if mutual {
        (0..cost.ncols())
            .map(|j| argmin(cost.column(j).iter().copied()))
            .collect()
    } else {
        Vec::new()
    };
    let mut matches: Vec<Match<T>> = row_best
        .iter()
        .enumerate()
        .filter(|&(i, &j)| !mutual || col_best[j] == i)
        .map(|(i, &j)| Match {
            source: i,
            target: j,
            cost: cost[(i, j)],
        })
        .collect();
    matches.sort_by(|x, y| {
        x.cost
            .partial_cmp(&y.cost)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.source.cmp(&y.source))
    });
    Ok(matches)
}

fn argmin<T: Real, I: Iterator<Item = T>>(values: I) -> usize {
    let mut best = 0;
    let mut best_v: Option<T> = None;
    for (i, v) in values.enumerate() {
        if best_v.is_none_or(|b| v < b) {
            best = i;
            best_v = Some(v);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacParams<T> {
    pub max_iterations: usize,
    /// Post-transform distance below which a match is an inlier, meters.
    pub inlier_threshold: T,
    pub sample_size: usize,
    pub min_inlier_fraction: T,
    pub mutual_check: bool,
}

impl<T: Real> Default for RansacParams<T> {
    fn default() -> Self {
        Self {
            max_iterations: 5000,
            inlier_threshold: T::lit(0.6),
            sample_size: 3,
            min_inlier_fraction: T::lit(0.05),
            mutual_check: true,
        }
    }
}

impl<T: Real> RansacParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("ransac.max_iterations", "must be positive"));
        }
        if !(self.inlier_threshold > T::zero()) {
            return Err(Error::invalid("ransac.inlier_threshold", "must be positive"));
        }
        if self.sample_size < 3 {
            return Err(Error::invalid("ransac.sample_size", "need at least 3"));
        }
        if !(self.min_inlier_fraction > T::zero() && self.min_inlier_fraction <= T::one()) {
            return Err(Error::invalid("ransac.min_inlier_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// RANSAC result with the inlier count of the best sampled model, before
/// the final refit.
#[derive(Clone, Debug, PartialEq)]
pub struct RansacOutcome<T: Real> {
    pub result: RegistrationResult<T>,
    pub inliers: usize,
    pub best_sample_inliers: usize,
}

pub fn ransac_register<T: Real>(
    source: &KeypointFeatures<T>,
    target: &KeypointFeatures<T>,
    params: &RansacParams<T>,
    seed: u64,
) -> Result<RegistrationResult<T>> {
    let matches = match_features(source, target, params.mutual_check)?;
    let src: Vec<Vector3<T>> = matches
        .iter()
        .map(|m| source.keypoints.coordinates()[m.source])
        .collect();
    let tgt: Vec<Vector3<T>> = matches
        .iter()
        .map(|m| target.keypoints.coordinates()[m.target])
        .collect();
    Ok(ransac_correspondences(&src, &tgt, params, seed)?.result)
}

/// RANSAC over putative correspondences `src[i] ↔ tgt[i]`.
pub fn ransac_correspondences<T: Real>(
    src: &[Vector3<T>],
    tgt: &[Vector3<T>],
    params: &RansacParams<T>,
    seed: u64,
) -> Result<RansacOutcome<T>> {
    params.validate()?;
    if src.len() != tgt.len() {
        return Err(Error::DimensionMismatch {
            expected: src.len(),
            found: tgt.len(),
        });
    }
    let n = src.len();
    if n < params.sample_size {
        return Err(Error::Insufficient {
            what: "matches",
            needed: params.sample_size,
            found: n,
        });
    }
    let thr2 = params.inlier_threshold * params.inlier_threshold;
    let count = |pose: &Pose<T>| {
        src.iter()
            .zip(tgt)
            .filter(|(p, q)| (pose.transform(p) - *q).norm_squared() < thr2)
            .count()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ones = vec![T::one(); params.sample_size];
    let mut best: Option<(Pose<T>, usize)> = None;
    for _ in 0..params.max_iterations {
        let pick = index::sample(&mut rng, n, params.sample_size);
        let ps: Vec<Vector3<T>> = pick.iter().map(|i| src[i]).collect();
        let qs: Vec<Vector3<T>> = pick.iter().map(|i| tgt[i]).collect();
        let Ok(pose) = weighted_svd(&ps, &qs, &ones) else {
            continue;
        };
        let c = count(&pose);
        if best.as_ref().is_none_or(|(_, b)| c > *b) {
            best = Some((pose, c));
        }
    }
    let (sample_pose, sample_inliers) = best.unwrap_or((Pose::identity(), 0));

    // Refit on the inliers of the best sample; keep whichever explains more.
    let mut pose = sample_pose;
    let mut inliers = sample_inliers;
    let inlier_mask = |pose: &Pose<T>| -> Vec<usize> {
        (0..n)
            .filter(|&i| (pose.transform(&src[i]) - tgt[i]).norm_squared() < thr2)
            .collect()
    };
    let idx = inlier_mask(&sample_pose);
    if idx.len() >= 3 {
        let ps: Vec<_> = idx.iter().map(|&i| src[i]).collect();
        let qs: Vec<_> = idx.iter().map(|&i| tgt[i]).collect();
        if let Ok(refit) = weighted_svd(&ps, &qs, &vec![T::one(); ps.len()]) {
            let c = count(&refit);
            if c >= inliers {
                pose = refit;
                inliers = c;
            }
        }
    }
    let final_idx = inlier_mask(&pose);
    let rmse = rmse_of(
        final_idx
            .iter()
            .map(|&i| (pose.transform(&src[i]) - tgt[i]).norm_squared()),
    );
    let fitness = T::from_usize(inliers).expect("fits") / T::from_usize(n).expect("fits");
    Ok(RansacOutcome {
        result: RegistrationResult {
            pose,
            fitness,
            inlier_rmse: rmse,
            iterations_used: params.max_iterations,
            converged: inliers >= 3 && fitness >= params.min_inlier_fraction,
        },
        inliers,
        best_sample_inliers: sample_inliers,
    })
}

fn rmse_of<T: Real, I: Iterator<Item = T>>(d2: I) -> T {
    let (sum, n) = d2.fold((T::zero(), 0usize), |(s, n), d| (s + d, n + 1));
    if n == 0 {
        T::zero()
    } else {
        (sum / T::from_usize(n).expect("fits")).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IcpVariant {
    PointToPoint,
    PointToPlane,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpParams<T> {
    pub variant: IcpVariant,
    pub max_iterations: usize,
    /// Pairs farther apart than this are ignored, meters.
    pub correspondence_distance: T,
    /// Stop once the pose update moves less than this (meters plus radians).
    pub convergence_epsilon: T,
    /// Neighbors for target normals (point-to-plane only).
    pub normal_k: usize,
}

impl<T: Real> Default for IcpParams<T> {
    fn default() -> Self {
        Self {
            variant: IcpVariant::PointToPoint,
            max_iterations: 50,
            correspondence_distance: T::lit(1.0),
            convergence_epsilon: T::lit(1e-6),
            normal_k: 10,
        }
    }
}

impl<T: Real> IcpParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("icp.max_iterations", "must be positive"));
        }
        if !(self.correspondence_distance > T::zero()) {
            return Err(Error::invalid("icp.correspondence_distance", "must be positive"));
        }
        if !(self.convergence_epsilon > T::zero()) {
            return Err(Error::invalid("icp.convergence_epsilon", "must be positive"));
        }
        Ok(())
    }
}

pub fn icp<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    initial: &Pose<T>,
    params: &IcpParams<T>,
) -> Result<RegistrationResult<T>> {
    icp_traced(source, target, initial, params).map(|(r, _)| r)
}

/// ICP that also returns the truncated squared error
/// `Σ min(d², r²)` over all source points before each update.
pub fn icp_traced<T: Real>(
    source: &PointCloud<T>,
    target: &PointCloud<T>,
    initial: &Pose<T>,
    params: &IcpParams<T>,
) -> Result<(RegistrationResult<T>, Vec<T>)> {
    params.validate()?;
    for (cloud, what) in [(source, "source"), (target, "target")] {
        if cloud.len() < 10 {
            return Err(Error::Insufficient {
                what: if what == "source" {
                    "source points"
                } else {
                    "target points"
                },
                needed: 10,
                found: cloud.len(),
            });
        }
    }
    let src = source.coords();
    let tree = KdTree::new(target.coords());
    let normals = match params.variant {
        IcpVariant::PointToPlane => estimate_normals(&tree, params.normal_k),
        IcpVariant::PointToPoint => Vec::new(),
    };
    let r = params.correspondence_distance;
    let r2 = r * r;

    let pairs_at = |pose: &Pose<T>| -> (Vec<(usize, usize, T)>, T) {
        let mut pairs = Vec::new();
        let mut truncated = T::zero();
        for (i, p) in src.iter().enumerate() {
            let q = pose.transform(p);
            match tree.nearest_within(&q, r) {
                Some(n) => {
                    truncated += n.dist2;
                    pairs.push((i, n.index, n.dist2));
                }
                None => truncated += r2,
            }
        }
        (pairs, truncated)
    };

    let mut pose = *initial;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut any_pairs = false;
    for _ in 0..params.max_iterations {
        let (pairs, truncated) = pairs_at(&pose);
        history.push(truncated);
        if pairs.len() < 3 {
            break;
        }
        any_pairs = true;
        iterations += 1;
        let moved: Vec<Vector3<T>> = pairs.iter().map(|&(i, _, _)| pose.transform(&src[i])).collect();
        let step = match params.variant {
            IcpVariant::PointToPoint => {
                let qs: Vec<_> = pairs.iter().map(|&(_, j, _)| tree.points()[j]).collect();
                weighted_svd(&moved, &qs, &vec![T::one(); qs.len()])
            }
            IcpVariant::PointToPlane => point_to_plane_step(&moved, &pairs, tree.points(), &normals),
        };
        let Ok(step) = step else {
            break;
        };
        pose = step.compose(&pose);
        let delta = step.translation().norm() + rotation_angle(step.rotation());
        if delta < params.convergence_epsilon {
            converged = true;
            break;
        }
    }

    let (pairs, _) = pairs_at(&pose);
    let fitness = T::from_usize(pairs.len()).expect("fits") / T::from_usize(src.len()).expect("fits");
    let rmse = rmse_of(pairs.iter().map(|p| p.2));
    Ok((
        RegistrationResult {
            pose,
            fitness,
            inlier_rmse: rmse,
            iterations_used: iterations,
            converged: converged && any_pairs,
        },
        history,
    ))
}

/// One Gauss-Newton step of `Σ ((p + ω×p + δ − q) · n)²` in the small-angle
/// approximation.
fn point_to_plane_step<T: Real>(
    moved: &[Vector3<T>],
    pairs: &[(usize, usize, T)],
    target: &[Vector3<T>],
    normals: &[Vector3<T>],
) -> Result<Pose<T>> {
    let mut a = Matrix6::<T>::zeros();
    let mut b = Vector6::<T>::zeros();
    for (p, &(_, j, _)) in moved.iter().zip(pairs) {
        let n = normals[j];
        let c = p.cross(&n);
        let row = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
        let residual = (p - target[j]).dot(&n);
        a += row * row.transpose();
        b -= row * residual;
    }
    let x = a
        .cholesky()
        .map(|c| c.solve(&b))
        .ok_or(Error::DegenerateGeometry("point-to-plane system is singular"))?;
    let omega = Vector3::new(x[0], x[1], x[2]);
    let angle = omega.norm();
    let axis = if angle > T::zero() { omega / angle } else { Vector3::z() };
    Ok(Pose::from_axis_angle(&axis, angle, Vector3::new(x[3], x[4], x[5])))
}

/// `TE < 2 m` and `RE < 5°`.
pub fn success_check<T: Real>(err: &PoseError<T>) -> bool {
    err.translation_error < T::lit(SUCCESS_TRANSLATION_M) && err.rotation_error < T::lit(SUCCESS_ROTATION_DEG)
}
