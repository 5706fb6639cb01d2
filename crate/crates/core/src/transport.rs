//! Unbalanced optimal transport between keypoint sets and pose recovery
//! from the resulting soft correspondences.
//!
//! The Sinkhorn scaling runs for a fixed number of iterations:
//!
//! ```text
//! K = exp(-C / λ),  a = 1/N_P,  b = v = 1/N_S,  e = ρ / (ρ + λ)
//! repeat L times:  u = (a ⊘ K v)^e ;  v = (b ⊘ Kᵀ u)^e
//! T = diag(u) K diag(v)
//! ```
//!
//! When every entry of `C / λ` exceeds [`LOG_DOMAIN_THRESHOLD`] the same
//! recursion runs on logarithms.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::features::{cost_matrix, KeypointFeatures};
use crate::geom::Pose;
use crate::scalar::Real;

/// `min(C) / λ` above which the log-domain recursion is used.
pub const LOG_DOMAIN_THRESHOLD: f64 = 30.0;

/// Rows lighter than this fraction of the heaviest row are dropped.
pub const DEFAULT_MASS_FLOOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UotParams<T> {
    /// Entropic regularization.
    pub lambda: T,
    /// Marginal relaxation; larger values preserve more mass.
    pub rho: T,
    pub iterations: usize,
}

/// Defaults come from a grid search on synthetic scans (see
/// `examples/uot_grid.rs`); `UotParams::reference()` holds the classic
/// `λ = 0.03, ρ = 1` setting.
impl<T: Real> Default for UotParams<T> {
    fn default() -> Self {
        Self {
            lambda: T::lit(0.0005),
            rho: T::lit(0.00003),
            iterations: 5,
        }
    }
}

impl<T: Real> UotParams<T> {
    pub fn reference() -> Self {
        Self {
            lambda: T::lit(0.03),
            rho: T::lit(1.0),
            iterations: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > T::zero()) || !self.lambda.is_finite() {
            return Err(Error::invalid("uot.lambda", "must be positive"));
        }
        if !(self.rho > T::zero()) || !self.rho.is_finite() {
            return Err(Error::invalid("uot.rho", "must be positive"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("uot.iterations", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan<T: Real> {
    pub matrix: DMatrix<T>,
    pub params: UotParams<T>,
    pub row_mass: Vec<T>,
}

impl<T: Real> TransportPlan<T> {
    pub fn new(matrix: DMatrix<T>, params: UotParams<T>) -> Self {
        let row_mass = matrix.row_iter().map(|r| r.sum()).collect();
        Self {
            matrix,
            params,
            row_mass,
        }
    }

    pub fn column_mass(&self) -> Vec<T> {
        self.matrix.column_iter().map(|c| c.sum()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SinkhornDomain {
    /// Log domain only when the kernel would underflow everywhere.
    Auto,
    Standard,
    Log,
}

pub fn sinkhorn_uot<T: Real>(cost: &DMatrix<T>, params: &UotParams<T>) -> Result<TransportPlan<T>> {
    sinkhorn_uot_with(cost, params, SinkhornDomain::Auto, |_, _| {})
}

/// Sinkhorn scaling with an explicit domain. `observe(i, u)` receives the
/// row scaling after the `u` update of iteration `i` (1-based), in the
/// standard domain even when computed on logarithms.
pub fn sinkhorn_uot_with<T: Real, F: FnMut(usize, &DVector<T>)>(
    cost: &DMatrix<T>,
    params: &UotParams<T>,
    domain: SinkhornDomain,
    mut observe: F,
) -> Result<TransportPlan<T>> {
    params.validate()?;
    let (rows, cols) = cost.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("cost matrix"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("cost", "non-finite entry"));
    }
    let lambda = params.lambda;
    let use_log = match domain {
        SinkhornDomain::Standard => false,
        SinkhornDomain::Log => true,
        SinkhornDomain::Auto => cost.min() / lambda > T::lit(LOG_DOMAIN_THRESHOLD),
    };
    let e = params.rho / (params.rho + lambda);
    let n_rows = T::from_usize(rows).expect("size fits");
    let n_cols = T::from_usize(cols).expect("size fits");

    let matrix = if use_log {
        let log_k = cost.map(|c| -c / lambda);
        let log_a = -n_rows.ln();
        let log_b = -n_cols.ln();
        let mut log_u = DVector::from_element(rows, T::zero());
        let mut log_v = DVector::from_element(cols, log_b);
        for it in 1..=params.iterations {
            for j in 0..rows {
                let lse = log_sum_exp((0..cols).map(|k| log_k[(j, k)] + log_v[k]));
                log_u[j] = e * (log_a - lse);
            }
            observe(it, &log_u.map(|x| x.exp()));
            for k in 0..cols {
                let lse = log_sum_exp((0..rows).map(|j| log_k[(j, k)] + log_u[j]));
                log_v[k] = e * (log_b - lse);
            }
        }
        DMatrix::from_fn(rows, cols, |j, k| (log_u[j] + log_k[(j, k)] + log_v[k]).exp())
    } else {
        let kernel = cost.map(|c| (-c / lambda).exp());
        let a = T::one() / n_rows;
        let b = T::one() / n_cols;
        let mut u = DVector::from_element(rows, T::one());
        let mut v = DVector::from_element(cols, b);
        for it in 1..=params.iterations {
            let kv = &kernel * &v;
            u = kv.map(|x| (a / x).powf(e));
            observe(it, &u);
            let ktu = kernel.tr_mul(&u);
            v = ktu.map(|x| (b / x).powf(e));
        }
        DMatrix::from_fn(rows, cols, |j, k| u[j] * kernel[(j, k)] * v[k])
    };
    if matrix.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFiniteTransport {
            lambda: lambda.as_f64(),
        });
    }
    Ok(TransportPlan::new(matrix, *params))
}

fn log_sum_exp<T: Real, I: Iterator<Item = T> + Clone>(values: I) -> T {
    let max = values.clone().fold(T::min_value().expect("bounded"), |a, b| a.max(b));
    if max == T::min_value().expect("bounded") || !max.is_finite() {
        return max;
    }
    max + values.fold(T::zero(), |acc, x| acc + (x - max).exp()).ln()
}

/// Barycentric projection of each source row onto the target points.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftCorrespondences<T: Real> {
    pub projected: Vec<Vector3<T>>,
    pub weights: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> SoftCorrespondences<T> {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

pub fn project_soft<T: Real>(plan: &TransportPlan<T>, target: &[Vector3<T>]) -> Result<SoftCorrespondences<T>> {
    project_soft_with_floor(plan, target, T::lit(DEFAULT_MASS_FLOOR))
}

/// As [`project_soft`], dropping rows whose mass is at most
/// `relative_floor` times the heaviest row.
pub fn project_soft_with_floor<T: Real>(
    plan: &TransportPlan<T>,
    target: &[Vector3<T>],
    relative_floor: T,
) -> Result<SoftCorrespondences<T>> {
    if plan.matrix.ncols() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: plan.matrix.ncols(),
            found: target.len(),
        });
    }
    let max_mass = plan.row_mass.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let floor = relative_floor * max_mass;
    let mut projected = Vec::with_capacity(plan.row_mass.len());
    let mut valid = Vec::with_capacity(plan.row_mass.len());
    for (j, &mass) in plan.row_mass.iter().enumerate() {
        if mass > floor && mass > T::zero() {
            let sum = target
                .iter()
                .enumerate()
                .fold(Vector3::zeros(), |acc, (k, s)| acc + s * plan.matrix[(j, k)]);
            projected.push(sum / mass);
            valid.push(true);
        } else {
            projected.push(Vector3::zeros());
            valid.push(false);
        }
    }
    if !valid.iter().any(|v| *v) {
        return Err(Error::NoEffectiveCorrespondences);
    }
    Ok(SoftCorrespondences {
        projected,
        weights: plan.row_mass.clone(),
        valid,
    })
}

/// Rigid pose minimizing `Σ w_j ‖R p_j + t − s_j‖²`.
pub fn weighted_svd<T: Real>(source: &[Vector3<T>], target: &[Vector3<T>], weights: &[T]) -> Result<Pose<T>> {
    if source.len() != target.len() || source.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: source.len(),
            found: if target.len() != source.len() {
                target.len()
            } else {
                weights.len()
            },
        });
    }
    if weights.iter().any(|w| !(*w >= T::zero())) {
        return Err(Error::invalid("weights", "must be non-negative"));
    }
    let active = weights.iter().filter(|w| **w > T::zero()).count();
    if active < 3 {
        return Err(Error::Insufficient {
            what: "weighted correspondences",
            needed: 3,
            found: active,
        });
    }
    let total = weights.iter().fold(T::zero(), |a, &w| a + w);
    let p_bar = source
        .iter()
        .zip(weights)
        .fold(Vector3::zeros(), |a, (p, &w)| a + p * w)
        / total;
    let s_bar = target
        .iter()
        .zip(weights)
        .fold(Vector3::zeros(), |a, (s, &w)| a + s * w)
        / total;
    let mut h = Matrix3::zeros();
    for ((p, s), &w) in source.iter().zip(target).zip(weights) {
        if w > T::zero() {
            h += (p - p_bar) * (s - s_bar).transpose() * w;
        }
    }
    let svd = h.svd(true, true);
    let mut sv = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    if !(sv[0] > T::zero()) || sv[1] <= T::rank_tolerance() * sv[0] {
        return Err(Error::DegenerateGeometry("correspondences are collinear"));
    }
    let u = svd.u.expect("requested");
    let v = svd.v_t.expect("requested").transpose();
    let d = (v * u.transpose()).determinant();
    let sign = if d < T::zero() { -T::one() } else { T::one() };
    let correction = Matrix3::from_diagonal(&Vector3::new(T::one(), T::one(), sign));
    let r = v * correction * u.transpose();
    let t = s_bar - r * p_bar;
    Ok(Pose::new_orthonormalized(&r, t))
}

/// Cost matrix, Sinkhorn plan, soft projection and weighted SVD with the
/// row masses as weights. The pose maps source keypoints onto the target.
pub fn estimate_pose_uot<T: Real>(
    source: &KeypointFeatures<T>,
    target: &KeypointFeatures<T>,
    params: &UotParams<T>,
) -> Result<(Pose<T>, TransportPlan<T>)> {
    let cost = cost_matrix(source, target)?;
    let plan = sinkhorn_uot(&cost, params)?;
    let soft = project_soft(&plan, target.keypoints.coordinates())?;
    let weights: Vec<T> = soft
        .weights
        .iter()
        .zip(&soft.valid)
        .map(|(&w, &ok)| if ok { w } else { T::zero() })
        .collect();
    let pose = weighted_svd(source.keypoints.coordinates(), &soft.projected, &weights)?;
    Ok((pose, plan))
}

/// Text dump: a header line `rows cols lambda rho iterations`, then one
/// line of space-separated entries per row.
pub fn write_plan<T: Real, W: Write>(out: &mut W, plan: &TransportPlan<T>) -> std::io::Result<()> {
    let (rows, cols) = plan.matrix.shape();
    writeln!(
        out,
        "{rows} {cols} {:e} {:e} {}",
        plan.params.lambda.as_f64(),
        plan.params.rho.as_f64(),
        plan.params.iterations
    )?;
    for j in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|k| format!("{:e}", plan.matrix[(j, k)].as_f64()))
            .collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_plan<T: Real, R: BufRead>(input: R) -> Result<TransportPlan<T>> {
    let mut lines = input.lines().enumerate();
    let parse_err = |line: usize, message: String| Error::Parse { line, message };
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let header = header.map_err(|e| parse_err(1, e.to_string()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 {
        return Err(parse_err(1, "header needs rows, cols, lambda, rho, iterations".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(1, format!("bad number `{s}`")));
    let rows = fields[0]
        .parse::<usize>()
        .map_err(|_| parse_err(1, "bad rows".into()))?;
    let cols = fields[1]
        .parse::<usize>()
        .map_err(|_| parse_err(1, "bad cols".into()))?;
    let params = UotParams {
        lambda: T::lit(num(fields[2])?),
        rho: T::lit(num(fields[3])?),
        iterations: fields[4].parse().map_err(|_| parse_err(1, "bad iterations".into()))?,
    };
    let mut data = Vec::with_capacity(rows * cols);
    for (n, line) in lines.take(rows) {
        let line = line.map_err(|e| parse_err(n + 1, e.to_string()))?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| parse_err(n + 1, format!("bad number `{s}`")))
            })
            .collect::<Result<_>>()?;
        if values.len() != cols {
            return Err(parse_err(
                n + 1,
                format!("expected {cols} entries, found {}", values.len()),
            ));
        }
        data.extend(values.into_iter().map(T::lit));
    }
    if data.len() != rows * cols {
        return Err(parse_err(rows + 1, "truncated plan".into()));
    }
    Ok(TransportPlan::new(DMatrix::from_row_slice(rows, cols, &data), params))
}
