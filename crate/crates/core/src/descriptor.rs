//! NetVLAD-style global descriptors and an exact descriptor database.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::KeypointFeatures;
use crate::scalar::Real;

pub const DEFAULT_CLUSTERS: usize = 64;
pub const DEFAULT_OUTPUT_DIM: usize = 256;
/// Softmax sharpness of the centroid-derived assignment weights.
pub const ASSIGNMENT_ALPHA: f64 = 10.0;
pub const KMEANS_MAX_ITERATIONS: usize = 100;
const GATE_BIAS: f64 = 3.0;
const PARAMS_MAGIC: &[u8; 4] = b"VLAD";
const PARAMS_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct VladParams<T: Real> {
    /// K × D cluster centers.
    pub centroids: DMatrix<T>,
    /// K × D softmax weights.
    pub assignment_weights: DMatrix<T>,
    pub assignment_biases: DVector<T>,
    /// G × (K·D) compression applied as `M v + c`.
    pub compression: DMatrix<T>,
    pub compression_bias: DVector<T>,
    /// G × G gating weights.
    pub gate_weights: DMatrix<T>,
    pub gate_bias: DVector<T>,
    /// L2-normalize each cluster block before the global normalization.
    pub intra_normalization: bool,
}

impl<T: Real> VladParams<T> {
    pub fn clusters(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.compression.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d, g) = (self.clusters(), self.feature_dim(), self.output_dim());
        if k == 0 || d == 0 || g == 0 {
            return Err(Error::invalid(
                "vlad",
                "clusters, feature and output dims must be positive",
            ));
        }
        let shapes = [
            (self.assignment_weights.shape(), (k, d)),
            ((self.assignment_biases.len(), 1), (k, 1)),
            (self.compression.shape(), (g, k * d)),
            ((self.compression_bias.len(), 1), (g, 1)),
            (self.gate_weights.shape(), (g, g)),
            ((self.gate_bias.len(), 1), (g, 1)),
        ];
        for (found, expected) in shapes {
            if found != expected {
                return Err(Error::Format(format!(
                    "vlad params block is {found:?}, expected {expected:?}"
                )));
            }
        }
        let all = [
            &self.centroids,
            &self.assignment_weights,
            &self.compression,
            &self.gate_weights,
        ];
        let finite = all.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && [&self.assignment_biases, &self.compression_bias, &self.gate_bias]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::invalid("vlad", "parameters must be finite"));
        }
        Ok(())
    }

    /// Centroids with the derived softmax weights, an identity-like
    /// compression (first `output_dim` coordinates) and near-passthrough gating.
    pub fn from_centroids(centroids: DMatrix<T>, output_dim: usize) -> Self {
        let (k, d) = centroids.shape();
        let (weights, biases) = assignment_from_centroids(&centroids);
        Self {
            centroids,
            assignment_weights: weights,
            assignment_biases: biases,
            compression: DMatrix::identity(output_dim, k * d),
            compression_bias: DVector::zeros(output_dim),
            gate_weights: DMatrix::zeros(output_dim, output_dim),
            gate_bias: DVector::from_element(output_dim, T::lit(GATE_BIAS)),
            intra_normalization: true,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.push(PARAMS_VERSION);
        out.push(u8::from(self.intra_normalization));
        for n in [self.clusters(), self.feature_dim(), self.output_dim()] {
            out.extend_from_slice(&(n as u64).to_le_bytes());
        }
        let mut put = |m: &[T]| {
            for v in m {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        };
        // Matrices are stored row-major.
        put(self.centroids.transpose().as_slice());
        put(self.assignment_weights.transpose().as_slice());
        put(self.assignment_biases.as_slice());
        put(self.compression.transpose().as_slice());
        put(self.compression_bias.as_slice());
        put(self.gate_weights.transpose().as_slice());
        put(self.gate_bias.as_slice());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != PARAMS_MAGIC {
            return Err(Error::Format("not a VLAD params file".into()));
        }
        let version = r.take(1)?[0];
        if version != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported VLAD params version {version}")));
        }
        let intra = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Format(format!("bad intra-normalization flag {other}"))),
        };
        let k = r.dim()?;
        let d = r.dim()?;
        let g = r.dim()?;
        let expected = k
            .checked_mul(d)
            .and_then(|kd| kd.checked_mul(2 + g))
            .and_then(|n| n.checked_add(k + 2 * g + g * g))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("VLAD params dims overflow".into()))?;
        if r.remaining() != expected {
            return Err(Error::Format(format!(
                "VLAD params body is {} bytes, expected {expected}",
                r.remaining()
            )));
        }
        let params = Self {
            centroids: r.matrix(k, d)?,
            assignment_weights: r.matrix(k, d)?,
            assignment_biases: r.vector(k)?,
            compression: r.matrix(g, k * d)?,
            compression_bias: r.vector(g)?,
            gate_weights: r.matrix(g, g)?,
            gate_bias: r.vector(g)?,
            intra_normalization: intra,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn dim(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("dimension does not fit in memory".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn vector<T: Real>(&mut self, n: usize) -> Result<DVector<T>> {
        let v: Result<Vec<T>> = (0..n).map(|_| self.f64().map(T::lit)).collect();
        Ok(DVector::from_vec(v?))
    }

    fn matrix<T: Real>(&mut self, rows: usize, cols: usize) -> Result<DMatrix<T>> {
        let v: Result<Vec<T>> = (0..rows * cols).map(|_| self.f64().map(T::lit)).collect();
        Ok(DMatrix::from_row_slice(rows, cols, &v?))
    }
}

fn assignment_from_centroids<T: Real>(centroids: &DMatrix<T>) -> (DMatrix<T>, DVector<T>) {
    let alpha = T::lit(ASSIGNMENT_ALPHA);
    let weights = centroids * alpha;
    let biases = DVector::from_iterator(
        centroids.nrows(),
        centroids.row_iter().map(|c| -alpha * c.norm_squared() / T::lit(2.0)),
    );
    (weights, biases)
}

/// Unit-norm global descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalDescriptor<T: Real> {
    vector: DVector<T>,
}

impl<T: Real> GlobalDescriptor<T> {
    /// Normalizes `vector`; an all-zero input maps to the uniform unit vector.
    pub fn new(vector: DVector<T>) -> Result<Self> {
        if vector.is_empty() {
            return Err(Error::Empty("descriptor"));
        }
        if let Some(index) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinitePoint { index });
        }
        Ok(Self {
            vector: l2_normalized(vector),
        })
    }

    pub fn vector(&self) -> &DVector<T> {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// L2 distance; touches only the two `G`-vectors.
    pub fn distance(&self, other: &Self) -> T {
        squared_distance(&self.vector, &other.vector).sqrt()
    }
}

fn squared_distance<T: Real>(a: &DVector<T>, b: &DVector<T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (x, y)| acc + (*x - *y) * (*x - *y))
}

fn l2_normalized<T: Real>(mut v: DVector<T>) -> DVector<T> {
    let norm = v.norm();
    if norm > T::zero() {
        v /= norm;
    } else {
        let n = v.len();
        v.fill(T::one() / T::from_usize(n).expect("fits").sqrt());
    }
    v
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

/// N × K softmax over `w_k · f_i + b_k`.
pub fn soft_assign<T: Real>(features: &KeypointFeatures<T>, params: &VladParams<T>) -> Result<DMatrix<T>> {
    check_dim(params.feature_dim(), features.dim())?;
    let mut logits = &features.features * params.assignment_weights.transpose();
    for mut row in logits.row_iter_mut() {
        row += params.assignment_biases.transpose();
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(logits)
}

/// Concatenated residual sums `V_k = Σ_i a_ik (f_i − c_k)`, block- and then
/// globally normalized.
pub fn vlad_aggregate<T: Real>(
    features: &KeypointFeatures<T>,
    assignments: &DMatrix<T>,
    params: &VladParams<T>,
) -> Result<DVector<T>> {
    let (k, d) = (params.clusters(), params.feature_dim());
    check_dim(d, features.dim())?;
    check_dim(features.len(), assignments.nrows())?;
    check_dim(k, assignments.ncols())?;
    // Σ_i a_ik f_i − (Σ_i a_ik) c_k for every k at once.
    let weighted = assignments.transpose() * &features.features;
    let mass = assignments.row_sum();
    let mut v = DVector::zeros(k * d);
    for c in 0..k {
        let mut block = v.rows_mut(c * d, d);
        for j in 0..d {
            block[j] = weighted[(c, j)] - mass[c] * params.centroids[(c, j)];
        }
        if params.intra_normalization {
            let n = block.norm();
            if n > T::zero() {
                block /= n;
            }
        }
    }
    let n = v.norm();
    if n > T::zero() {
        v /= n;
    }
    Ok(v)
}

/// `σ(W x + b) ⊙ x`.
pub fn context_gate<T: Real>(x: &DVector<T>, params: &VladParams<T>) -> Result<DVector<T>> {
    check_dim(params.output_dim(), x.len())?;
    let gate = &params.gate_weights * x + &params.gate_bias;
    Ok(x.zip_map(&gate, |xi, gi| xi / (T::one() + (-gi).exp())))
}

pub fn global_descriptor<T: Real>(
    features: &KeypointFeatures<T>,
    params: &VladParams<T>,
) -> Result<GlobalDescriptor<T>> {
    let a = soft_assign(features, params)?;
    let v = vlad_aggregate(features, &a, params)?;
    let compressed = &params.compression * v + &params.compression_bias;
    GlobalDescriptor::new(context_gate(&compressed, params)?)
}

/// Deterministic k-means with k-means++ seeding. Returns K × D centroids.
pub fn kmeans<T: Real>(data: &DMatrix<T>, k: usize, seed: u64) -> Result<DMatrix<T>> {
    let (n, d) = data.shape();
    if k == 0 {
        return Err(Error::invalid("vlad.clusters", "must be positive"));
    }
    if k > n {
        return Err(Error::Insufficient {
            what: "training feature vectors",
            needed: k,
            found: n,
        });
    }
    let rows: Vec<DVector<T>> = data.row_iter().map(|r| r.transpose()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<DVector<T>> = vec![rows[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = rows
        .par_iter()
        .map(|r| squared_distance(r, &centers[0]).as_f64())
        .collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            nearest
                .iter()
                .position(|w| {
                    acc += w;
                    acc > target
                })
                .unwrap_or_else(|| nearest.iter().rposition(|w| *w > 0.0).expect("positive total"))
        } else {
            // Every point coincides with a center; duplicates are harmless.
            rng.random_range(0..n)
        };
        let c = rows[pick].clone();
        nearest
            .par_iter_mut()
            .zip(&rows)
            .for_each(|(w, r)| *w = w.min(squared_distance(r, &c).as_f64()));
        centers.push(c);
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let c = DMatrix::from_fn(k, d, |i, j| centers[i][j]);
        let next = nearest_centers(data, &c);
        if next == labels {
            break;
        }
        labels = next;
        let mut sums = vec![DVector::<T>::zeros(d); k];
        let mut counts = vec![0usize; k];
        for (r, &l) in rows.iter().zip(&labels) {
            sums[l] += r;
            counts[l] += 1;
        }
        for ((c, s), m) in centers.iter_mut().zip(sums).zip(counts) {
            if m > 0 {
                *c = s / T::from_usize(m).expect("fits");
            }
        }
    }
    Ok(DMatrix::from_fn(k, d, |i, j| centers[i][j]))
}

/// Index of the nearest center for every row, via `‖c‖² − 2 x·c`; ties go
/// to the lowest index.
fn nearest_centers<T: Real>(data: &DMatrix<T>, centers: &DMatrix<T>) -> Vec<usize> {
    let dots = data * centers.transpose();
    let norms: Vec<T> = centers.row_iter().map(|c| c.norm_squared()).collect();
    (0..data.nrows())
        .into_par_iter()
        .map(|i| {
            let mut best = 0;
            let mut best_d = norms[0] - dots[(i, 0)] - dots[(i, 0)];
            for (j, nj) in norms.iter().enumerate().skip(1) {
                let dist = *nj - dots[(i, j)] - dots[(i, j)];
                if dist < best_d {
                    best = j;
                    best_d = dist;
                }
            }
            best
        })
        .collect()
}

/// Principal directions of `samples` (rows) with non-negligible variance,
/// sorted by decreasing variance, together with the sample mean.
fn principal_directions<T: Real>(samples: &DMatrix<T>) -> (Vec<DVector<T>>, DVector<T>) {
    let (n, dim) = samples.shape();
    let mean = samples.row_mean().transpose();
    let mut x = samples.clone();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    // Eigenvectors of the smaller of X Xᵀ and Xᵀ X.
    let mut directions: Vec<(f64, DVector<T>)> = if n <= dim {
        let eig = SymmetricEigen::new(&x * x.transpose());
        (0..n)
            .map(|i| (eig.eigenvalues[i].as_f64(), x.transpose() * eig.eigenvectors.column(i)))
            .collect()
    } else {
        let eig = SymmetricEigen::new(x.transpose() * &x);
        (0..dim)
            .map(|i| (eig.eigenvalues[i].as_f64(), eig.eigenvectors.column(i).into_owned()))
            .collect()
    };
    directions.sort_by(|a, b| b.0.total_cmp(&a.0));
    let top = directions.first().map_or(0.0, |d| d.0.max(0.0));
    let mut basis: Vec<DVector<T>> = Vec::new();
    for (l, v) in directions {
        if !(l > top * 1e-12 && l > 0.0) {
            break;
        }
        if let Some(u) = orthonormalize(v, &basis) {
            basis.push(u);
        }
    }
    (basis, mean)
}

/// Rows are orthonormal principal directions of `samples` (rows), sorted by
/// decreasing variance. When the data span fewer than `components`
/// directions the rest are filled with seeded random orthonormal rows.
pub fn pca_basis<T: Real>(samples: &DMatrix<T>, components: usize, seed: u64) -> Result<(DMatrix<T>, DVector<T>)> {
    let (n, dim) = samples.shape();
    if n == 0 {
        return Err(Error::Empty("PCA training set"));
    }
    if components > dim {
        return Err(Error::invalid(
            "vlad.output_dim",
            format!("{components} exceeds the VLAD dimension {dim}"),
        ));
    }
    let (mut basis, mean) = principal_directions(samples);
    basis.truncate(components);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    while basis.len() < components {
        let v = DVector::from_fn(dim, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
        if let Some(u) = orthonormalize(v, &basis) {
            basis.push(u);
        }
    }
    let m = DMatrix::from_fn(components, dim, |i, j| basis[i][j]);
    Ok((m, mean))
}

/// Gram-Schmidt (applied twice) against `basis`; `None` if nothing is left.
fn orthonormalize<T: Real>(mut v: DVector<T>, basis: &[DVector<T>]) -> Option<DVector<T>> {
    let start = v.norm();
    if !(start > T::zero()) {
        return None;
    }
    for _ in 0..2 {
        for b in basis {
            let p = b.dot(&v);
            v.axpy(-p, b, T::one());
        }
    }
    let n = v.norm();
    (n > start * T::lit(1e-8)).then(|| v / n)
}

/// Settings for [`fit_vlad`].
#[derive(Clone, Debug, PartialEq)]
pub struct VladFit {
    pub clusters: usize,
    /// Rows of the compression: one anchor row plus up to `output_dim - 1`
    /// discriminant directions.
    pub output_dim: usize,
    /// Principal subspace the discriminant directions live in.
    pub pca_dim: usize,
    /// Ridge added to the within-place scatter, relative to its mean eigenvalue.
    pub within_regularization: f64,
    /// Ratio between the anchor coordinate and the RMS norm of the projected
    /// training vectors.
    pub anchor_ratio: f64,
    pub intra_normalization: bool,
    pub seed: u64,
}

impl Default for VladFit {
    fn default() -> Self {
        Self {
            clusters: DEFAULT_CLUSTERS,
            output_dim: 33,
            pca_dim: 200,
            within_regularization: 0.1,
            anchor_ratio: 3.0,
            intra_normalization: false,
            seed: 0,
        }
    }
}

/// Fits centroids and the compression with default fitting settings and no
/// same-place pairs (the compression then reduces to PCA).
pub fn fit_vlad_params<T: Real>(
    training: &[KeypointFeatures<T>],
    clusters: usize,
    output_dim: usize,
    seed: u64,
) -> Result<VladParams<T>> {
    let fit = VladFit {
        clusters,
        output_dim,
        seed,
        ..VladFit::default()
    };
    fit_vlad(training, &[], &fit)
}

/// Fits centroids by k-means over every training feature vector, then a
/// linear compression of the training VLAD vectors.
///
/// `same_place` lists index pairs into `training` of scans taken at the same
/// place. The compression whitens the variation inside those pairs and keeps
/// the directions with the largest remaining spread across the training set
/// (without pairs this is plain PCA). Row 0 is a constant anchor: it keeps the
/// final L2 normalization from blowing up the residual of scans that sit near
/// the training mean.
pub fn fit_vlad<T: Real>(
    training: &[KeypointFeatures<T>],
    same_place: &[(usize, usize)],
    fit: &VladFit,
) -> Result<VladParams<T>> {
    let Some(first) = training.iter().find(|f| !f.is_empty()) else {
        return Err(Error::Empty("VLAD training set"));
    };
    let d = first.dim();
    for f in training.iter().filter(|f| !f.is_empty()) {
        check_dim(d, f.dim())?;
    }
    if fit.output_dim < 2 {
        return Err(Error::invalid("vlad.output_dim", "must be at least 2"));
    }
    if fit.output_dim > fit.clusters * d {
        return Err(Error::invalid(
            "vlad.output_dim",
            format!("{} exceeds K·D = {}", fit.output_dim, fit.clusters * d),
        ));
    }
    if fit.pca_dim == 0 {
        return Err(Error::invalid("vlad.pca_dim", "must be positive"));
    }
    if !(fit.within_regularization > 0.0 && fit.within_regularization.is_finite()) {
        return Err(Error::invalid(
            "vlad.within_regularization",
            "must be positive and finite",
        ));
    }
    if !(fit.anchor_ratio > 0.0 && fit.anchor_ratio.is_finite()) {
        return Err(Error::invalid("vlad.anchor_ratio", "must be positive and finite"));
    }
    for &(a, b) in same_place {
        if a >= training.len() || b >= training.len() {
            return Err(Error::invalid(
                "vlad.same_place",
                format!("pair ({a}, {b}) out of range for {} scans", training.len()),
            ));
        }
    }

    let total: usize = training.iter().map(|f| f.len()).sum();
    let mut data = DMatrix::zeros(total, d);
    let mut at = 0;
    for f in training.iter().filter(|f| !f.is_empty()) {
        data.rows_mut(at, f.len()).copy_from(&f.features);
        at += f.len();
    }
    let centroids = kmeans(&data, fit.clusters, fit.seed)?;
    let mut params = VladParams::from_centroids(centroids, fit.output_dim);
    params.intra_normalization = fit.intra_normalization;

    let vlads: Result<Vec<DVector<T>>> = training
        .par_iter()
        .map(|f| {
            if f.is_empty() {
                Ok(DVector::zeros(fit.clusters * d))
            } else {
                vlad_aggregate(f, &soft_assign(f, &params)?, &params)
            }
        })
        .collect();
    let vlads = vlads?;
    let samples = DMatrix::from_fn(vlads.len(), fit.clusters * d, |i, j| vlads[i][j]);
    let (mut basis, mean) = principal_directions(&samples);
    basis.truncate(fit.pca_dim);
    let p = basis.len();
    let mut compression = DMatrix::zeros(fit.output_dim, fit.clusters * d);
    let mut bias = DVector::zeros(fit.output_dim);
    if p == 0 {
        // Every training vector is identical: only the anchor remains.
        bias[0] = T::one();
        params.compression = compression;
        params.compression_bias = bias;
        return Ok(params);
    }
    let pca = DMatrix::from_fn(p, fit.clusters * d, |i, j| basis[i][j]);
    let projected: Vec<DVector<T>> = vlads.iter().map(|v| &pca * (v - &mean)).collect();

    let mut whitening = DMatrix::<T>::identity(p, p);
    if !same_place.is_empty() {
        let mut within = DMatrix::<T>::zeros(p, p);
        for &(a, b) in same_place {
            let diff = &projected[a] - &projected[b];
            within.ger(T::one(), &diff, &diff, T::one());
        }
        within /= T::from_usize(same_place.len()).unwrap();
        let ridge = within.trace() / T::from_usize(p).unwrap() * T::lit(fit.within_regularization);
        if !(ridge > T::zero()) {
            return Err(Error::invalid("vlad.same_place", "pairs show no variation"));
        }
        for i in 0..p {
            within[(i, i)] += ridge;
        }
        let eig = SymmetricEigen::new(within);
        whitening = DMatrix::zeros(p, p);
        for (i, l) in eig.eigenvalues.iter().enumerate() {
            let u = eig.eigenvectors.column(i);
            whitening.ger(T::one() / l.sqrt(), &u, &u, T::one());
        }
    }
    let whitened: Vec<DVector<T>> = projected.iter().map(|y| &whitening * y).collect();
    let mut spread = DMatrix::<T>::zeros(p, p);
    for z in &whitened {
        spread.ger(T::one(), z, z, T::one());
    }
    let eig = SymmetricEigen::new(spread);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].as_f64().total_cmp(&eig.eigenvalues[a].as_f64()));
    let rows = order.len().min(fit.output_dim - 1);
    let mut sq_norm = 0.0;
    for (r, &i) in order.iter().take(rows).enumerate() {
        let direction = whitening.transpose() * eig.eigenvectors.column(i);
        let row = pca.transpose() * direction;
        bias[r + 1] = -row.dot(&mean);
        compression.set_row(r + 1, &row.transpose());
        sq_norm += whitened
            .iter()
            .map(|z| z.dot(&eig.eigenvectors.column(i)).as_f64().powi(2))
            .sum::<f64>();
    }
    let rms = (sq_norm / whitened.len() as f64).sqrt();
    bias[0] = T::lit(if rms > 0.0 { fit.anchor_ratio * rms } else { 1.0 });
    params.compression = compression;
    params.compression_bias = bias;
    Ok(params)
}

/// Append-only store of descriptors keyed by strictly increasing scan index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorDatabase<T: Real> {
    indices: Vec<usize>,
    descriptors: Vec<GlobalDescriptor<T>>,
}

impl<T: Real> DescriptorDatabase<T> {
    pub fn new() -> Self {
        Self {
            indices: Vec::new(),
            descriptors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.descriptors.first().map(GlobalDescriptor::dim)
    }

    pub fn push(&mut self, index: usize, descriptor: GlobalDescriptor<T>) -> Result<()> {
        if let Some(&last) = self.indices.last() {
            if index <= last {
                return Err(Error::NonIncreasingIndex { index, last });
            }
        }
        if let Some(d) = self.dim() {
            check_dim(d, descriptor.dim())?;
        }
        self.indices.push(index);
        self.descriptors.push(descriptor);
        Ok(())
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, &GlobalDescriptor<T>)> {
        self.indices.iter().copied().zip(&self.descriptors)
    }

    pub fn get(&self, index: usize) -> Option<&GlobalDescriptor<T>> {
        self.indices.binary_search(&index).ok().map(|i| &self.descriptors[i])
    }

    /// Nearest entry with `scan_index + exclude_last ≤ current`; ties go to
    /// the lowest index.
    pub fn query(&self, query: &GlobalDescriptor<T>, current: usize, exclude_last: usize) -> Option<(usize, T)> {
        let limit = current.checked_sub(exclude_last)?;
        let eligible = self.indices.partition_point(|&i| i <= limit);
        let mut best: Option<(usize, T)> = None;
        for k in 0..eligible {
            let d = squared_distance(self.descriptors[k].vector(), query.vector());
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((self.indices[k], d));
            }
        }
        best.map(|(i, d)| (i, d.sqrt()))
    }

    /// `u64 G, u64 count`, then per entry `u64 index` and `G` little-endian f64.
    pub fn encode(&self) -> Vec<u8> {
        let g = self.dim().unwrap_or(0);
        let mut out = Vec::with_capacity(16 + self.len() * (8 + 8 * g));
        out.extend_from_slice(&(g as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (i, d) in self.entries() {
            out.extend_from_slice(&(i as u64).to_le_bytes());
            for v in d.vector().iter() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    /// Stored vectors are taken as-is (they were normalized on creation).
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let g = r.dim()?;
        let count = r.dim()?;
        let record = g
            .checked_add(1)
            .and_then(|x| x.checked_mul(8))
            .ok_or_else(|| Error::Format("descriptor dimension overflows".into()))?;
        if count.checked_mul(record) != Some(r.remaining()) {
            return Err(Error::Format(format!(
                "descriptor store body is {} bytes, expected {count} records of {record}",
                r.remaining()
            )));
        }
        let mut db = Self::new();
        for _ in 0..count {
            let index = r.dim()?;
            let vector = r.vector(g)?;
            if vector.iter().any(|v: &T| !v.is_finite()) {
                return Err(Error::Format(format!("descriptor {index} is not finite")));
            }
            db.push(index, GlobalDescriptor { vector })?;
        }
        Ok(db)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn db_query<T: Real>(
    db: &DescriptorDatabase<T>,
    query: &GlobalDescriptor<T>,
    current: usize,
    exclude_last: usize,
) -> Option<(usize, T)> {
    db.query(query, current, exclude_last)
}
