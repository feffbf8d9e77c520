//! Kronecker-factored curvature state: EMA factor tracking, the two KFAC
//! damping schemes, FOOF's input-side solve, and the amortized inversion
//! schedule.
//!
//! Per layer the tracked factors are `Σ_A ≈ AAᵀ` (inputs) and
//! `Σ_E ≈ E_F E_Fᵀ` (sampled errors), in the same summed-over-columns
//! convention as the crate's gradients, so that the undamped updates are
//! scale-consistent with `grad = E·Aᵀ`. Moving averages are normalized by a
//! running weight, which makes the estimate after any number of updates an
//! exact convex combination of the observed batch factors (and makes the
//! first update equal to the first batch factor).
//!
//! Updates returned here are directions in gradient orientation; the caller
//! owns the learning rate and the sign.

use ndarray::prelude::*;

use crate::curvature::ImplicitCurvature;
use crate::linalg;
use crate::net::BatchTrace;
use crate::{Error, Result};

/// Clamp bounds for the trace ratio at cold start (zero factors).
const RATIO_CLAMP: f64 = 1e12;

/// Split a global damping λ across the two Kronecker factors so that
/// `λ_A·λ_E = λ` and `λ_A/λ_E` equals the trace ratio
/// `n·Tr(Σ_A) / (m·Tr(Σ_E))`.
///
/// Degenerate traces (cold start) clamp the ratio into `[1e−12, 1e12]`; a
/// 0/0 ratio falls back to an even split.
pub fn damping_split(lambda: f64, sigma_a: &Array2<f64>, sigma_e: &Array2<f64>) -> (f64, f64) {
    let (r, _) = trace_ratio(sigma_a, sigma_e);
    (lambda.sqrt() * r.sqrt(), lambda.sqrt() / r.sqrt())
}

/// The clamped trace ratio and whether clamping was needed.
pub fn trace_ratio(sigma_a: &Array2<f64>, sigma_e: &Array2<f64>) -> (f64, bool) {
    let m = sigma_a.nrows() as f64;
    let n = sigma_e.nrows() as f64;
    let raw = n * linalg::trace(sigma_a) / (m * linalg::trace(sigma_e));
    if raw.is_nan() {
        (1.0, true)
    } else if raw > RATIO_CLAMP {
        (RATIO_CLAMP, true)
    } else if raw < 1.0 / RATIO_CLAMP {
        (1.0 / RATIO_CLAMP, true)
    } else {
        (raw, false)
    }
}

/// Solve `(Σ_E ⊗ Σ_A + λI)·vec(x) = vec(grad)` through the factor
/// eigenbases: rotate, divide entrywise by `Λ_E,i·Λ_A,j + λ`, rotate back.
pub fn standard_damped_solve(
    sigma_a: &Array2<f64>,
    sigma_e: &Array2<f64>,
    grad: &Array2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    let (vals_a, q_a) = linalg::eigh(sigma_a);
    let (vals_e, q_e) = linalg::eigh(sigma_e);
    eigenbasis_solve(&vals_a, &q_a, &vals_e, &q_e, grad, lambda)
}

fn eigenbasis_solve(
    vals_a: &Array1<f64>,
    q_a: &Array2<f64>,
    vals_e: &Array1<f64>,
    q_e: &Array2<f64>,
    grad: &Array2<f64>,
    lambda: f64,
) -> Result<Array2<f64>> {
    let mut t = linalg::matmul(linalg::matmul(q_e.t(), grad.view()).view(), q_a.view());
    let mut smallest = f64::INFINITY;
    for i in 0..t.nrows() {
        for j in 0..t.ncols() {
            // Tiny negative eigenvalues are factorization noise on a PSD
            // matrix; the damped denominator must still be positive.
            let denom = vals_e[i] * vals_a[j] + lambda;
            smallest = smallest.min(denom);
            t[[i, j]] /= denom;
        }
    }
    if !crate::positive(smallest) {
        return Err(Error::Factorization {
            smallest_pivot: smallest,
        });
    }
    Ok(linalg::matmul(linalg::matmul(q_e.view(), t.view()).view(), q_a.t()))
}

/// What `amortization_schedule` says to do at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub refresh_inverse: bool,
    pub accumulate: bool,
}

/// Amortized inversion calendar: refresh every `period` steps, accumulate
/// statistics during the `window` steps leading into each refresh.
pub fn amortization_schedule(t: u64, period: u64, window: u64) -> Result<Schedule> {
    if window == 0 || window > period {
        return Err(Error::Invalid {
            message: format!("accumulation window {window} must lie in 1..=period ({period})"),
        });
    }
    Ok(Schedule {
        refresh_inverse: t.is_multiple_of(period),
        accumulate: (t + window) % period < window,
    })
}

/// Which factors an EMA update feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorSet {
    /// Σ_A only — FOOF's default, which needs no sampled backward pass.
    InputsOnly,
    /// Σ_A and Σ_E — KFAC, and FOOF's borrowed-λ_A diagnostic.
    Both,
}

/// How the heuristic path obtains its per-factor damping pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DampingStyle {
    /// The trace-ratio split with `λ_A·λ_E = λ`.
    SplitTraceRule,
    /// Externally pinned pair (analysis hook; the product need not be λ).
    Fixed { lambda_a: f64, lambda_e: f64 },
}

#[derive(Debug, Clone)]
struct LayerFactors {
    raw_a: Array2<f64>,
    raw_e: Array2<f64>,
    p_a: Option<Array2<f64>>,
    p_e: Option<Array2<f64>>,
    eig_a: Option<(Array1<f64>, Array2<f64>)>,
    eig_e: Option<(Array1<f64>, Array2<f64>)>,
    lambda_a: f64,
    lambda_e: f64,
}

/// Per-layer Kronecker factor EMAs plus the cached preconditioner artifacts
/// for whichever update family is in use.
#[derive(Debug, Clone)]
pub struct KroneckerState {
    layers: Vec<LayerFactors>,
    dims: Vec<(usize, usize)>,
    ema_m: f64,
    lambda: f64,
    period: u64,
    window: u64,
    t: u64,
    refreshed_at: Option<u64>,
    omega_a: f64,
    omega_e: f64,
    heuristic_damping: DampingStyle,
    foof_use_split: bool,
    foof_scale: f64,
    clamp_events: u64,
}

impl KroneckerState {
    /// `dims` are the per-layer `(n_out, n_in)` shapes.
    pub fn new(
        dims: &[(usize, usize)],
        ema_m: f64,
        lambda: f64,
        period: u64,
        window: u64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&ema_m) {
            return Err(Error::Invalid {
                message: format!("EMA decay must lie in [0, 1), got {ema_m}"),
            });
        }
        if !crate::non_negative(lambda) {
            return Err(Error::Invalid {
                message: format!("damping must be nonnegative, got {lambda}"),
            });
        }
        // Validate the schedule parameters once up front.
        amortization_schedule(0, period, window)?;
        let layers = dims
            .iter()
            .map(|&(n, m)| LayerFactors {
                raw_a: Array2::zeros((m, m)),
                raw_e: Array2::zeros((n, n)),
                p_a: None,
                p_e: None,
                eig_a: None,
                eig_e: None,
                lambda_a: f64::NAN,
                lambda_e: f64::NAN,
            })
            .collect();
        Ok(KroneckerState {
            layers,
            dims: dims.to_vec(),
            ema_m,
            lambda,
            period,
            window,
            t: 0,
            refreshed_at: None,
            omega_a: 0.0,
            omega_e: 0.0,
            heuristic_damping: DampingStyle::SplitTraceRule,
            foof_use_split: false,
            foof_scale: 1.0,
            clamp_events: 0,
        })
    }

    pub fn with_heuristic_damping(mut self, style: DampingStyle) -> Self {
        self.heuristic_damping = style;
        self
    }

    /// Diagnostic FOOF variant: damp Σ_A with the λ_A that the KFAC split
    /// would pick, and rescale the update by 1/λ_E.
    pub fn with_foof_split(mut self, on: bool) -> Self {
        self.foof_use_split = on;
        self
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn advance(&mut self) {
        self.t += 1;
    }

    pub fn schedule_now(&self) -> Schedule {
        amortization_schedule(self.t, self.period, self.window).expect("validated at build")
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Current damping pair for layer `k` (NaN before the first refresh).
    pub fn lambda_pair(&self, k: usize) -> (f64, f64) {
        (self.layers[k].lambda_a, self.layers[k].lambda_e)
    }

    /// How often the trace ratio had to be clamped (cold-start indicator).
    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    /// Normalized Σ_A for layer `k` (zero before any update).
    pub fn sigma_a(&self, k: usize) -> Array2<f64> {
        if self.omega_a > 0.0 {
            &self.layers[k].raw_a / self.omega_a
        } else {
            self.layers[k].raw_a.clone()
        }
    }

    /// Normalized Σ_E for layer `k` (zero before any update).
    pub fn sigma_e(&self, k: usize) -> Array2<f64> {
        if self.omega_e > 0.0 {
            &self.layers[k].raw_e / self.omega_e
        } else {
            self.layers[k].raw_e.clone()
        }
    }

    /// Fold one batch's factors into the EMAs from a forward/backward trace.
    ///
    /// `FactorSet::Both` requires the sampled errors (`trace.e_f`), i.e. the
    /// extra backward pass through model-sampled labels.
    pub fn update_from_trace(&mut self, trace: &BatchTrace, set: FactorSet) -> Result<()> {
        let e_f = match set {
            FactorSet::InputsOnly => None,
            FactorSet::Both => Some(trace.e_f.as_ref().ok_or_else(|| Error::Invalid {
                message: "factor update needs sampled errors; run the sampled backward pass"
                    .into(),
            })?),
        };
        let a: Vec<&Array2<f64>> = trace.a.iter().collect();
        let e: Option<Vec<&Array2<f64>>> = e_f.map(|e| e.iter().collect());
        self.update_weighted(&a, e.as_deref(), None)
    }

    /// Fold an exact-expectation Fisher's factors into the EMAs: columns are
    /// weighted so that Σ_A accumulates exactly `AAᵀ` over the distinct
    /// inputs and Σ_E the probability-weighted error scatter.
    pub fn update_from_curvature(&mut self, curv: &ImplicitCurvature, n_inputs: usize) -> Result<()> {
        let weights = curv.col_scale() * (n_inputs as f64).sqrt();
        let a: Vec<&Array2<f64>> = (0..curv.layer_count()).map(|k| curv.a_factor(k)).collect();
        let e: Vec<&Array2<f64>> = (0..curv.layer_count()).map(|k| curv.e_factor(k)).collect();
        self.update_weighted(&a, Some(&e), Some(weights.view()))
    }

    fn update_weighted(
        &mut self,
        a: &[&Array2<f64>],
        e: Option<&[&Array2<f64>]>,
        weights: Option<ArrayView1<f64>>,
    ) -> Result<()> {
        if a.len() != self.dims.len() {
            return Err(Error::Shape {
                context: format!(
                    "{} input factors for a {}-layer state",
                    a.len(),
                    self.dims.len()
                ),
            });
        }
        let m = self.ema_m;
        for (k, ak) in a.iter().enumerate() {
            if ak.nrows() != self.dims[k].1 {
                return Err(Error::Shape {
                    context: format!(
                        "layer {k} inputs have {} rows, expected {}",
                        ak.nrows(),
                        self.dims[k].1
                    ),
                });
            }
            let batch = weighted_scatter(ak, weights);
            let lf = &mut self.layers[k];
            lf.raw_a = &lf.raw_a * m + &(batch * (1.0 - m));
        }
        self.omega_a = m * self.omega_a + (1.0 - m);
        if let Some(e) = e {
            for (k, ek) in e.iter().enumerate() {
                if ek.nrows() != self.dims[k].0 {
                    return Err(Error::Shape {
                        context: format!(
                            "layer {k} errors have {} rows, expected {}",
                            ek.nrows(),
                            self.dims[k].0
                        ),
                    });
                }
                let batch = weighted_scatter(ek, weights);
                let lf = &mut self.layers[k];
                lf.raw_e = &lf.raw_e * m + &(batch * (1.0 - m));
            }
            self.omega_e = m * self.omega_e + (1.0 - m);
        }
        Ok(())
    }

    /// Recompute the heuristic path's damping split and cached inverses.
    pub fn refresh_heuristic(&mut self) -> Result<()> {
        for k in 0..self.layers.len() {
            let sigma_a = self.sigma_a(k);
            let sigma_e = self.sigma_e(k);
            let (lambda_a, lambda_e) = match self.heuristic_damping {
                DampingStyle::SplitTraceRule => {
                    let (r, clamped) = trace_ratio(&sigma_a, &sigma_e);
                    if clamped {
                        self.clamp_events += 1;
                    }
                    (self.lambda.sqrt() * r.sqrt(), self.lambda.sqrt() / r.sqrt())
                }
                DampingStyle::Fixed { lambda_a, lambda_e } => (lambda_a, lambda_e),
            };
            let lf = &mut self.layers[k];
            lf.lambda_a = lambda_a;
            lf.lambda_e = lambda_e;
            lf.p_a = Some(linalg::damped_inverse(&sigma_a, lambda_a)?);
            lf.p_e = Some(linalg::damped_inverse(&sigma_e, lambda_e)?);
        }
        self.refreshed_at = Some(self.t);
        Ok(())
    }

    /// Recompute the standard path's cached factor eigendecompositions.
    pub fn refresh_standard(&mut self) -> Result<()> {
        for k in 0..self.layers.len() {
            let sigma_a = self.sigma_a(k);
            let sigma_e = self.sigma_e(k);
            let lf = &mut self.layers[k];
            lf.eig_a = Some(linalg::eigh(&sigma_a));
            lf.eig_e = Some(linalg::eigh(&sigma_e));
        }
        self.refreshed_at = Some(self.t);
        Ok(())
    }

    /// Recompute FOOF's cached input-side inverse.
    pub fn refresh_foof(&mut self) -> Result<()> {
        self.foof_scale = 1.0;
        for k in 0..self.layers.len() {
            let sigma_a = self.sigma_a(k);
            let lambda_a = if self.foof_use_split {
                let sigma_e = self.sigma_e(k);
                let (r, clamped) = trace_ratio(&sigma_a, &sigma_e);
                if clamped {
                    self.clamp_events += 1;
                }
                let lambda_a = self.lambda.sqrt() * r.sqrt();
                let lambda_e = self.lambda.sqrt() / r.sqrt();
                let lf = &mut self.layers[k];
                lf.lambda_a = lambda_a;
                lf.lambda_e = lambda_e;
                lambda_a
            } else {
                self.lambda
            };
            let inv = linalg::damped_inverse(&self.sigma_a(k), lambda_a)?;
            self.layers[k].p_a = Some(inv);
        }
        self.refreshed_at = Some(self.t);
        Ok(())
    }

    fn stale(&self) -> bool {
        self.refreshed_at
            .is_none_or(|r| self.t.saturating_sub(r) > self.period)
    }

    fn check_grads(&self, grads: &[Array2<f64>]) -> Result<()> {
        if grads.len() != self.dims.len() {
            return Err(Error::Shape {
                context: format!(
                    "{} gradients for a {}-layer state",
                    grads.len(),
                    self.dims.len()
                ),
            });
        }
        for (k, g) in grads.iter().enumerate() {
            if g.dim() != self.dims[k] {
                return Err(Error::Shape {
                    context: format!(
                        "layer {k} gradient is {:?}, expected {:?}",
                        g.dim(),
                        self.dims[k]
                    ),
                });
            }
        }
        Ok(())
    }

    /// Heuristically damped KFAC direction: `P_E·grad·P_A` per layer, with
    /// the supervised gradient in the numerator and the sampled factors in
    /// the preconditioner. Refreshes internally if the cache is missing or
    /// older than one period.
    pub fn kfac_update_heuristic(&mut self, grads: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        self.check_grads(grads)?;
        if self.stale() || self.layers.iter().any(|l| l.p_a.is_none() || l.p_e.is_none()) {
            self.refresh_heuristic()?;
        }
        grads
            .iter()
            .enumerate()
            .map(|(k, grad)| {
                let lf = &self.layers[k];
                let p_a = lf.p_a.as_ref().expect("refreshed above");
                let p_e = lf.p_e.as_ref().expect("refreshed above");
                Ok(linalg::matmul(
                    linalg::matmul(p_e.view(), grad.view()).view(),
                    p_a.view(),
                ))
            })
            .collect()
    }

    /// Standard-damped KFAC direction, evaluated in the cached factor
    /// eigenbases; exactly `(Σ_E ⊗ Σ_A + λI)⁻¹·vec(grad)` per layer.
    pub fn kfac_update_standard(&mut self, grads: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        self.check_grads(grads)?;
        if self.stale() || self.layers.iter().any(|l| l.eig_a.is_none() || l.eig_e.is_none()) {
            self.refresh_standard()?;
        }
        grads
            .iter()
            .enumerate()
            .map(|(k, grad)| {
                let lf = &self.layers[k];
                let (vals_a, q_a) = lf.eig_a.as_ref().expect("refreshed above");
                let (vals_e, q_e) = lf.eig_e.as_ref().expect("refreshed above");
                eigenbasis_solve(vals_a, q_a, vals_e, q_e, grad, self.lambda)
            })
            .collect()
    }

    /// FOOF direction: `grad·(λI + Σ_A)⁻¹` per layer — the exact solution of
    /// the damped least-squares problem on each layer's inputs, requiring no
    /// sampled backward pass.
    pub fn foof_update(&mut self, grads: &[Array2<f64>]) -> Result<Vec<Array2<f64>>> {
        self.check_grads(grads)?;
        if self.stale() || self.layers.iter().any(|l| l.p_a.is_none()) {
            self.refresh_foof()?;
        }
        grads
            .iter()
            .enumerate()
            .map(|(k, grad)| {
                let lf = &self.layers[k];
                let p_a = lf.p_a.as_ref().expect("refreshed above");
                let scale = if self.foof_use_split {
                    1.0 / lf.lambda_e
                } else {
                    self.foof_scale
                };
                Ok(linalg::matmul(grad.view(), p_a.view()) * scale)
            })
            .collect()
    }
}

fn weighted_scatter(mat: &Array2<f64>, weights: Option<ArrayView1<f64>>) -> Array2<f64> {
    match weights {
        None => linalg::scatter_of_columns(mat.view()),
        Some(w) => {
            let mut scaled = mat.clone();
            for (j, mut col) in scaled.columns_mut().into_iter().enumerate() {
                col *= w[j];
            }
            linalg::scatter_of_columns(scaled.view())
        }
    }
}
