//! Exact sampling from the full-covariance Gaussian posterior with
//! precision `Λ_prior + D·F`, where `F = GGᵀ` is a subsampled Fisher.
//!
//! The trick is that with `V = √D·Λ_prior^(−1/2)·G` the posterior covariance
//! is `Λ_prior^(−1/2)(I − V U⁻¹Vᵀ)Λ_prior^(−1/2)` with the small matrix
//! `U = I + VᵀV` (D×D). Drawing `y ~ N(0, I_n)`, `z ~ N(0, I_D)` and forming
//! `x = y − V U⁻¹(Vᵀy + z)` gives `E[xxᵀ] = I − V U⁻¹Vᵀ` exactly, so
//! `Λ_prior^(−1/2)·x` is a posterior sample. All products with `V` go
//! through the implicit curvature kernels; only `U` is materialized.

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::curvature::{FlatVector, ImplicitCurvature};
use crate::linalg;
use crate::{Error, Result};

/// Below this many samples a covariance check is reported as underpowered.
pub const LOW_SAMPLE_BAR: usize = 1000;

/// A posterior-sampling problem: diagonal prior precision, curvature, and
/// the effective datapoint count scaling the Fisher.
#[derive(Debug, Clone)]
pub struct LaplaceSpec<'a> {
    pub prior_diag: Array1<f64>,
    pub curv: &'a ImplicitCurvature,
    pub datapoints: f64,
    pub seed: u64,
}

impl LaplaceSpec<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.curv.num_params();
        if self.prior_diag.len() != n {
            return Err(Error::Shape {
                context: format!(
                    "prior diagonal has {} entries, network has {n} parameters",
                    self.prior_diag.len()
                ),
            });
        }
        if self.prior_diag.iter().any(|&p| !crate::positive(p)) {
            return Err(Error::Invalid {
                message: "prior precision entries must be positive".into(),
            });
        }
        if !crate::non_negative(self.datapoints) {
            return Err(Error::Invalid {
                message: format!("datapoint count must be nonnegative, got {}", self.datapoints),
            });
        }
        Ok(())
    }
}

/// Precomputed pieces shared by all draws from one spec.
struct SamplerCore<'a> {
    curv: &'a ImplicitCurvature,
    inv_sqrt_prior: Array1<f64>,
    sqrt_d: f64,
    u: Array2<f64>,
    dims: Vec<(usize, usize)>,
}

impl SamplerCore<'_> {
    fn prepare<'a>(spec: &LaplaceSpec<'a>) -> Result<SamplerCore<'a>> {
        spec.validate()?;
        Ok(SamplerCore {
            curv: spec.curv,
            inv_sqrt_prior: spec.prior_diag.mapv(|p| 1.0 / p.sqrt()),
            sqrt_d: spec.datapoints.sqrt(),
            u: build_u(spec)?,
            dims: spec.curv.layer_dims(),
        })
    }

    /// One draw; consumes `n` then `D` standard normals from `rng`.
    fn draw(&self, rng: &mut ChaCha12Rng) -> Result<FlatVector> {
        let n = self.curv.num_params();
        let d = self.curv.cols();
        let y: Array1<f64> = Array1::from_shape_fn(n, |_| StandardNormal.sample(rng));
        let z: Array1<f64> = Array1::from_shape_fn(d, |_| StandardNormal.sample(rng));
        // Vᵀy = √D·Gᵀ(Λ^(−1/2)y).
        let scaled_y = FlatVector::from_flat(&y * &self.inv_sqrt_prior, self.dims.clone())?;
        let vty = self.curv.g_transpose_vec(&scaled_y)? * self.sqrt_d;
        let c = linalg::spd_solve_vec(&self.u, (&vty + &z).view())?;
        // V·c = √D·Λ^(−1/2)·(G·c).
        let gc = self.curv.g_lincomb(c.view())?;
        let x = &y - &(gc.data() * &self.inv_sqrt_prior * self.sqrt_d);
        FlatVector::from_flat(x * &self.inv_sqrt_prior, self.dims.clone())
    }
}

/// Assemble `U = I + VᵀV` without materializing `G`.
///
/// A uniform prior reduces `VᵀV` to `(D/τ)·GᵀG`, i.e. a rescaled gram
/// matrix. A general diagonal prior breaks that shortcut, so the entries are
/// accumulated per layer and per output row: the prior's block for row `r`
/// weights a gram of the input factors, and the error factors enter as a
/// rank-one Hadamard mask.
fn build_u(spec: &LaplaceSpec<'_>) -> Result<Array2<f64>> {
    let curv = spec.curv;
    let d = curv.cols();
    let first = spec.prior_diag[0];
    let uniform = spec
        .prior_diag
        .iter()
        .all(|&p| (p - first).abs() <= 1e-14 * first.abs());
    let mut vtv: Array2<f64> = if uniform {
        curv.gram() * (spec.datapoints / first)
    } else {
        let mut acc: Array2<f64> = Array2::zeros((d, d));
        let mut offset = 0;
        for k in 0..curv.layer_count() {
            let a = curv.a_factor(k);
            let e = curv.e_factor(k);
            let (rows, cols_in) = (e.nrows(), a.nrows());
            for r in 0..rows {
                // Input-side gram weighted by this row's prior entries.
                let mut scaled = a.clone();
                for c in 0..cols_in {
                    let w = 1.0 / spec.prior_diag[offset + r * cols_in + c];
                    scaled.row_mut(c).mapv_inplace(|v| v * w.sqrt());
                }
                let t = linalg::gram_of_columns(scaled.view());
                let erow = e.row(r);
                for i in 0..d {
                    for j in 0..d {
                        acc[[i, j]] += erow[i] * erow[j] * t[[i, j]];
                    }
                }
            }
            offset += rows * cols_in;
        }
        let s = curv.col_scale();
        for i in 0..d {
            for j in 0..d {
                acc[[i, j]] *= s[i] * s[j] * spec.datapoints;
            }
        }
        acc
    };
    for i in 0..d {
        vtv[[i, i]] += 1.0;
    }
    Ok(vtv)
}

#[cfg(test)]
pub(crate) fn u_matrix_for_tests(spec: &LaplaceSpec<'_>) -> Result<Array2<f64>> {
    build_u(spec)
}

/// Draw a single posterior sample.
pub fn laplace_sample(spec: &LaplaceSpec<'_>) -> Result<FlatVector> {
    let core = SamplerCore::prepare(spec)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    core.draw(&mut rng)
}

/// Draw `count` posterior samples as the columns of an `n × count` matrix,
/// consuming one sequential random stream (the first column equals
/// `laplace_sample` at the same seed).
pub fn laplace_sample_batch(spec: &LaplaceSpec<'_>, count: usize) -> Result<Array2<f64>> {
    let core = SamplerCore::prepare(spec)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let n = spec.curv.num_params();
    let mut out = Array2::zeros((n, count));
    for j in 0..count {
        let s = core.draw(&mut rng)?;
        out.column_mut(j).assign(s.data());
    }
    Ok(out)
}

/// Empirical-vs-dense covariance comparison.
#[derive(Debug, Clone)]
pub struct CovReport {
    pub samples: usize,
    pub max_deviation: f64,
    pub largest_entry: f64,
    pub low_sample_warning: bool,
}

impl CovReport {
    /// Whether the deviation is within `frac` of the largest dense entry.
    pub fn within(&self, frac: f64) -> bool {
        self.max_deviation <= frac * self.largest_entry
    }
}

/// Draw `samples` posterior samples and compare their empirical second
/// moment to the dense posterior covariance (size-guarded).
pub fn laplace_cov_check(spec: &LaplaceSpec<'_>, samples: usize) -> Result<CovReport> {
    if samples == 0 {
        return Err(Error::Invalid {
            message: "covariance check needs at least one sample".into(),
        });
    }
    let dense = crate::oracle::dense_laplace_cov(
        spec.prior_diag.view(),
        spec.curv,
        spec.datapoints,
    )?;
    let draws = laplace_sample_batch(spec, samples)?;
    let empirical = linalg::scatter_of_columns(draws.view()) / samples as f64;
    let max_deviation = linalg::max_abs((&empirical - &dense).view());
    let largest_entry = linalg::max_abs(dense.view());
    Ok(CovReport {
        samples,
        max_deviation,
        largest_entry,
        low_sample_warning: samples < LOW_SAMPLE_BAR,
    })
}

/// Assemble both sides of `E[xxᵀ] = I − V U⁻¹Vᵀ` densely and return their
/// max absolute disagreement. The left side is the exact second moment of
/// `x = y − V U⁻¹(Vᵀy + z)`, namely `(I − VU⁻¹Vᵀ)² + V U⁻²Vᵀ`.
pub fn identity_check(
    prior_diag: ArrayView1<f64>,
    curv: &ImplicitCurvature,
    datapoints: f64,
) -> Result<f64> {
    let spec = LaplaceSpec {
        prior_diag: prior_diag.to_owned(),
        curv,
        datapoints,
        seed: 0,
    };
    spec.validate()?;
    let g = crate::oracle::assemble_g(curv)?;
    let n = curv.num_params();
    let mut v = g;
    for (r, mut row) in v.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|x| x * datapoints.sqrt() / prior_diag[r].sqrt());
    }
    let d = curv.cols();
    let mut u = linalg::gram_of_columns(v.view());
    for i in 0..d {
        u[[i, i]] += 1.0;
    }
    let k = linalg::spd_solve(&u, v.t())?; // U⁻¹Vᵀ
    let w = linalg::matmul(v.view(), k.view()); // V U⁻¹Vᵀ
    let rhs = &Array2::eye(n) - &w;
    let lhs = &linalg::matmul(rhs.view(), rhs.t()) + &linalg::matmul(k.t(), k.view());
    Ok(linalg::max_abs((&lhs - &rhs).view()))
}
