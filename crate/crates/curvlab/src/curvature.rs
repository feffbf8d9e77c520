//! Implicit representation of the subsampled Fisher `F = GGᵀ` and exact
//! `(λI+F)⁻¹v` products.
//!
//! `G`'s `i`-th column is the scaled per-datapoint gradient `s_i·g_i`; it is
//! never materialized on the Woodbury path. The three vectorized kernels are
//!
//! * `GᵀG` — per layer `(AᵀA) ⊙ (EᵀE)`, column scales folded in,
//! * `Gᵀu` — per layer `diag(Aᵀ·mat(u)ᵀ·E)`, evaluated as column sums of
//!   `E ⊙ (mat(u)·A)`,
//! * `Gw` — per layer `E·diag(w·s)·Aᵀ`,
//!
//! which combine into `(λI+F)⁻¹u = u/λ − G(I+GᵀG/λ)⁻¹Gᵀu / λ²`. When the
//! Fisher has more columns than the network has parameters the Woodbury
//! detour is larger than the problem itself, so `natural_gradient` switches
//! to the algebraically identical dense `(λI+GGᵀ)` solve; both routes are
//! cross-validated against the dense oracle.

use ndarray::prelude::*;

use crate::linalg;
use crate::net::{LossKind, NetworkState, Targets};
use crate::{Error, Result};

/// How the Fisher's columns are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherMode {
    /// One sampled label per input; column scale `1/√B`.
    Mc { seed: u64 },
    /// One column per (input, class) pair; column scale `√(p(y|x)/N)`.
    Full,
}

/// Structural scope of the represented Fisher.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    FullNetwork,
    BlockDiagonal,
}

/// Which minibatch the curvature is estimated on, relative to the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurvaturePolicy {
    /// Fisher and gradient share one minibatch (the default, multiplicatively
    /// coupled estimator).
    SameBatch,
    /// The Fisher comes from the previous disjoint minibatch (stale by one
    /// step), removing the coupling bias; the first step falls back to
    /// same-batch.
    IndependentBatch,
}

/// Concatenation of per-layer matrices in a fixed order: row-major over each
/// `n_out × n_in` matrix, layers input to output.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatVector {
    data: Array1<f64>,
    dims: Vec<(usize, usize)>,
}

impl FlatVector {
    pub fn zeros(dims: &[(usize, usize)]) -> Self {
        let len: usize = dims.iter().map(|(n, m)| n * m).sum();
        FlatVector {
            data: Array1::zeros(len),
            dims: dims.to_vec(),
        }
    }

    /// Flatten per-layer matrices (row-major each, concatenated in order).
    pub fn from_layer_mats(mats: &[Array2<f64>]) -> Self {
        let dims: Vec<_> = mats.iter().map(|m| m.dim()).collect();
        let mut data = Vec::with_capacity(dims.iter().map(|(n, m)| n * m).sum());
        for m in mats {
            data.extend(m.iter().cloned());
        }
        FlatVector {
            data: Array1::from_vec(data),
            dims,
        }
    }

    /// Wrap an existing flat vector, checking the length.
    pub fn from_flat(data: Array1<f64>, dims: Vec<(usize, usize)>) -> Result<Self> {
        let expect: usize = dims.iter().map(|(n, m)| n * m).sum();
        if data.len() != expect {
            return Err(Error::Shape {
                context: format!("flat vector has {} entries, layout needs {expect}", data.len()),
            });
        }
        Ok(FlatVector { data, dims })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn data(&self) -> &Array1<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array1<f64> {
        &mut self.data
    }

    fn offset(&self, k: usize) -> usize {
        self.dims[..k].iter().map(|(n, m)| n * m).sum()
    }

    /// View layer `k` as its `n_out × n_in` matrix.
    pub fn mat(&self, k: usize) -> ArrayView2<'_, f64> {
        let (n, m) = self.dims[k];
        let off = self.offset(k);
        self.data
            .slice(ndarray::s![off..off + n * m])
            .into_shape((n, m))
            .expect("contiguous layer slice")
    }

    /// Clone out the per-layer matrices.
    pub fn to_layer_mats(&self) -> Vec<Array2<f64>> {
        (0..self.dims.len()).map(|k| self.mat(k).to_owned()).collect()
    }

    pub fn dot(&self, other: &FlatVector) -> f64 {
        self.data.dot(&other.data)
    }

    pub fn scaled(&self, c: f64) -> FlatVector {
        FlatVector {
            data: &self.data * c,
            dims: self.dims.clone(),
        }
    }
}

/// Factored Fisher: per-layer `A`/`E_F` matrices with a common column count,
/// plus the per-column scales that define `G`.
#[derive(Debug, Clone)]
pub struct ImplicitCurvature {
    a: Vec<Array2<f64>>,
    e: Vec<Array2<f64>>,
    col_scale: Array1<f64>,
    pub mode: FisherMode,
    pub scope: Scope,
}

impl ImplicitCurvature {
    /// Build the curvature for one batch.
    ///
    /// MC mode samples one label per input from the model's own output
    /// distribution and backpropagates it; full mode (classification only)
    /// takes one column per (input, class) pair weighted by
    /// `√(p(class|input)/N)`, so that densely `GGᵀ = Σ_x (1/N)·Σ_y p(y|x)·g gᵀ`
    /// is the exact per-input expectation.
    pub fn build(net: &NetworkState, x: &Array2<f64>, mode: FisherMode) -> Result<Self> {
        match mode {
            FisherMode::Mc { seed } => {
                let mut trace = net.forward(x)?;
                let sample = net.sample_labels(&trace, seed);
                net.backward_sampled(&mut trace, &sample)?;
                let cols = trace.batch_size();
                let scale = 1.0 / (cols as f64).sqrt();
                trace.col_weights.fill(scale);
                Self::from_parts(
                    trace.a,
                    trace.e_f.expect("sampled backward filled e_f"),
                    trace.col_weights,
                    mode,
                    Scope::FullNetwork,
                )
            }
            FisherMode::Full => {
                if net.loss != LossKind::CrossEntropySoftmax {
                    return Err(Error::Unsupported {
                        message: "full Fisher needs an enumerable label set (classification)"
                            .into(),
                    });
                }
                let mut trace = net.forward(x)?;
                let n_inputs = trace.batch_size();
                let classes = net.output_dim();
                let probs = crate::net::softmax_columns(trace.logits());
                let layers = net.num_layers();
                let mut a_exp: Vec<Array2<f64>> = trace
                    .a
                    .iter()
                    .map(|a| Array2::zeros((a.nrows(), n_inputs * classes)))
                    .collect();
                let mut e_exp: Vec<Array2<f64>> = trace
                    .s
                    .iter()
                    .map(|s| Array2::zeros((s.nrows(), n_inputs * classes)))
                    .collect();
                let mut col_scale = Array1::zeros(n_inputs * classes);
                for c in 0..classes {
                    let sample = crate::net::LabelSample {
                        targets: Targets::Classes(vec![c; n_inputs]),
                        rng_seed: 0,
                    };
                    net.backward_sampled(&mut trace, &sample)?;
                    let e_c = trace.e_f.take().expect("sampled backward filled e_f");
                    for xcol in 0..n_inputs {
                        let j = xcol * classes + c;
                        for k in 0..layers {
                            a_exp[k].column_mut(j).assign(&trace.a[k].column(xcol));
                            e_exp[k].column_mut(j).assign(&e_c[k].column(xcol));
                        }
                        col_scale[j] = (probs[[c, xcol]] / n_inputs as f64).sqrt();
                    }
                }
                Self::from_parts(a_exp, e_exp, col_scale, mode, Scope::FullNetwork)
            }
        }
    }

    /// Wrap explicit factors (used by builders and the dense oracle).
    pub fn from_parts(
        a: Vec<Array2<f64>>,
        e: Vec<Array2<f64>>,
        col_scale: Array1<f64>,
        mode: FisherMode,
        scope: Scope,
    ) -> Result<Self> {
        if a.len() != e.len() || a.is_empty() {
            return Err(Error::Shape {
                context: format!("{} A factors vs {} E factors", a.len(), e.len()),
            });
        }
        let cols = col_scale.len();
        for (k, (ak, ek)) in a.iter().zip(&e).enumerate() {
            if ak.ncols() != cols || ek.ncols() != cols {
                return Err(Error::Shape {
                    context: format!(
                        "layer {k} factors have {}/{} columns, expected {cols}",
                        ak.ncols(),
                        ek.ncols()
                    ),
                });
            }
        }
        Ok(ImplicitCurvature {
            a,
            e,
            col_scale,
            mode,
            scope,
        })
    }

    /// Fisher column count `D`.
    pub fn cols(&self) -> usize {
        self.col_scale.len()
    }

    pub fn layer_count(&self) -> usize {
        self.a.len()
    }

    /// Per-layer `(n_out, n_in)` shapes.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.e
            .iter()
            .zip(&self.a)
            .map(|(e, a)| (e.nrows(), a.nrows()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(n, m)| n * m).sum()
    }

    pub fn a_factor(&self, k: usize) -> &Array2<f64> {
        &self.a[k]
    }

    pub fn e_factor(&self, k: usize) -> &Array2<f64> {
        &self.e[k]
    }

    pub fn col_scale(&self) -> &Array1<f64> {
        &self.col_scale
    }

    fn check_flat(&self, u: &FlatVector) -> Result<()> {
        if u.len() != self.num_params() {
            return Err(Error::Shape {
                context: format!(
                    "flat vector has {} entries, network has {} parameters",
                    u.len(),
                    self.num_params()
                ),
            });
        }
        Ok(())
    }

    /// `GᵀG`: per layer `(AᵀA) ⊙ (EᵀE)`, then both scale foldings.
    pub fn gram(&self) -> Array2<f64> {
        let d = self.cols();
        let mut g: Array2<f64> = Array2::zeros((d, d));
        for k in 0..self.layer_count() {
            let aa = linalg::gram_of_columns(self.a[k].view());
            let ee = linalg::gram_of_columns(self.e[k].view());
            g += &(&aa * &ee);
        }
        for i in 0..d {
            for j in 0..d {
                g[[i, j]] *= self.col_scale[i] * self.col_scale[j];
            }
        }
        g
    }

    /// `Gᵀu`: per layer, column sums of `E ⊙ (mat(u)·A)`.
    pub fn g_transpose_vec(&self, u: &FlatVector) -> Result<Array1<f64>> {
        self.check_flat(u)?;
        let mut v: Array1<f64> = Array1::zeros(self.cols());
        for k in 0..self.layer_count() {
            let t = linalg::matmul(u.mat(k), self.a[k].view());
            v += &(&self.e[k] * &t).sum_axis(Axis(0));
        }
        Ok(v * &self.col_scale)
    }

    /// `Gw`: per layer `E·diag(w ⊙ s)·Aᵀ`.
    pub fn g_lincomb(&self, w: ArrayView1<f64>) -> Result<FlatVector> {
        if w.len() != self.cols() {
            return Err(Error::Shape {
                context: format!(
                    "weight vector has {} entries, Fisher has {} columns",
                    w.len(),
                    self.cols()
                ),
            });
        }
        let ws = &w.to_owned() * &self.col_scale;
        let mats: Vec<Array2<f64>> = (0..self.layer_count())
            .map(|k| {
                let mut e_scaled = self.e[k].clone();
                for (j, mut col) in e_scaled.columns_mut().into_iter().enumerate() {
                    col *= ws[j];
                }
                linalg::matmul(e_scaled.view(), self.a[k].t())
            })
            .collect();
        Ok(FlatVector::from_layer_mats(&mats))
    }

    /// Materialize `G` (`num_params × D`), columns in the flat layout.
    ///
    /// Used by the dense oracle and by the wide-Fisher solve route; memory is
    /// the caller's concern (the oracle wraps this in a size guard).
    pub fn dense_g(&self) -> Array2<f64> {
        let rows = self.num_params();
        let d = self.cols();
        let mut g = Array2::zeros((rows, d));
        for j in 0..d {
            let s = self.col_scale[j];
            let mut off = 0;
            for k in 0..self.layer_count() {
                let (n, m) = (self.e[k].nrows(), self.a[k].nrows());
                let ecol = self.e[k].column(j);
                let acol = self.a[k].column(j);
                for r in 0..n {
                    let er = s * ecol[r];
                    for c in 0..m {
                        g[[off + r * m + c, j]] = er * acol[c];
                    }
                }
                off += n * m;
            }
        }
        g
    }

    /// Exact `(λI + GGᵀ)⁻¹u`.
    ///
    /// Uses the Woodbury form `u/λ − G(I+GᵀG/λ)⁻¹Gᵀu / λ²` when `D ≤ n`, and
    /// the equivalent dense normal-matrix solve when the Fisher is wider than
    /// the parameter space.
    pub fn natural_gradient(&self, u: &FlatVector, lambda: f64) -> Result<FlatVector> {
        self.check_flat(u)?;
        if !crate::positive(lambda) {
            return Err(Error::Invalid {
                message: format!("natural gradient needs positive damping, got {lambda}"),
            });
        }
        if self.cols() <= self.num_params() {
            self.ng_woodbury(u, lambda)
        } else {
            self.ng_dense(u, lambda)
        }
    }

    pub(crate) fn ng_woodbury(&self, u: &FlatVector, lambda: f64) -> Result<FlatVector> {
        let d = self.cols();
        let mut inner = self.gram() / lambda;
        for i in 0..d {
            inner[[i, i]] += 1.0;
        }
        let gtu = self.g_transpose_vec(u)?;
        let c = linalg::spd_solve_vec(&inner, gtu.view())?;
        let correction = self.g_lincomb(c.view())?;
        let data = &u.data / lambda - &correction.data / (lambda * lambda);
        FlatVector::from_flat(data, u.dims.clone())
    }

    pub(crate) fn ng_dense(&self, u: &FlatVector, lambda: f64) -> Result<FlatVector> {
        let g = self.dense_g();
        let mut f = linalg::scatter_of_columns(g.view());
        for i in 0..f.nrows() {
            f[[i, i]] += lambda;
        }
        let x = linalg::spd_solve_vec(&f, u.data.view())?;
        FlatVector::from_flat(x, u.dims.clone())
    }

    /// Layerwise (block-diagonal) natural gradient: each layer solved
    /// independently with only that layer's factors.
    pub fn natural_gradient_blockdiag(&self, u: &FlatVector, lambda: f64) -> Result<FlatVector> {
        self.check_flat(u)?;
        let mut parts = Vec::with_capacity(self.layer_count());
        for k in 0..self.layer_count() {
            let single = ImplicitCurvature::from_parts(
                vec![self.a[k].clone()],
                vec![self.e[k].clone()],
                self.col_scale.clone(),
                self.mode,
                Scope::BlockDiagonal,
            )?;
            let uk = FlatVector::from_layer_mats(&[u.mat(k).to_owned()]);
            let xk = single.natural_gradient(&uk, lambda)?;
            parts.push(xk.mat(0).to_owned());
        }
        Ok(FlatVector::from_layer_mats(&parts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, NetworkState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_curvature(seed: u64, dims: &[(usize, usize)], cols: usize) -> ImplicitCurvature {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = dims
            .iter()
            .map(|&(_, m)| Array2::from_shape_fn((m, cols), |_| rng.gen::<f64>() - 0.5))
            .collect();
        let e = dims
            .iter()
            .map(|&(n, _)| Array2::from_shape_fn((n, cols), |_| rng.gen::<f64>() - 0.5))
            .collect();
        let scale = Array1::from_shape_fn(cols, |_| 0.5 + rng.gen::<f64>());
        ImplicitCurvature::from_parts(a, e, scale, FisherMode::Full, Scope::FullNetwork).unwrap()
    }

    fn random_flat(seed: u64, dims: &[(usize, usize)]) -> FlatVector {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mats: Vec<Array2<f64>> = dims
            .iter()
            .map(|&(n, m)| Array2::from_shape_fn((n, m), |_| rng.gen::<f64>() - 0.5))
            .collect();
        FlatVector::from_layer_mats(&mats)
    }

    #[test]
    fn flat_vector_roundtrips_layer_matrices() {
        let mats = vec![array![[1.0, 2.0], [3.0, 4.0]], array![[5.0, 6.0]]];
        let v = FlatVector::from_layer_mats(&mats);
        assert_eq!(v.len(), 6);
        assert_eq!(v.mat(0).to_owned(), mats[0]);
        assert_eq!(v.mat(1).to_owned(), mats[1]);
        assert_eq!(
            v.data().to_vec(),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            "row-major concatenation"
        );
    }

    #[test]
    fn flat_vector_rejects_wrong_length() {
        let err = FlatVector::from_flat(Array1::zeros(5), vec![(2, 3)]).unwrap_err();
        assert!(err.to_string().contains("flat vector"));
    }

    #[test]
    fn gram_matches_hand_identity_case() {
        // 1 layer, B=2, a₁=(1,0), a₂=(0,1), e₁=e₂=(1), scale 1/√2 → GᵀG = ½I.
        let curv = ImplicitCurvature::from_parts(
            vec![array![[1.0, 0.0], [0.0, 1.0]]],
            vec![array![[1.0, 1.0]]],
            Array1::from_elem(2, std::f64::consts::FRAC_1_SQRT_2),
            FisherMode::Mc { seed: 0 },
            Scope::FullNetwork,
        )
        .unwrap();
        let g = curv.gram();
        assert!(close(g[[0, 0]], 0.5, 1e-15));
        assert!(close(g[[1, 1]], 0.5, 1e-15));
        assert!(close(g[[0, 1]], 0.0, 1e-15));
    }

    #[test]
    fn gram_of_zero_errors_is_zero() {
        let curv = ImplicitCurvature::from_parts(
            vec![array![[1.0, 2.0], [3.0, 4.0]]],
            vec![Array2::zeros((2, 2))],
            Array1::ones(2),
            FisherMode::Mc { seed: 0 },
            Scope::FullNetwork,
        )
        .unwrap();
        assert_eq!(curv.gram(), Array2::zeros((2, 2)));
    }

    #[test]
    fn g_transpose_vec_matches_hand_value() {
        // a=(1,0), e=(2): g = vec([[2,0]]); u = [[1,3]] → Gᵀu = (2).
        let curv = ImplicitCurvature::from_parts(
            vec![array![[1.0], [0.0]]],
            vec![array![[2.0]]],
            Array1::ones(1),
            FisherMode::Mc { seed: 0 },
            Scope::FullNetwork,
        )
        .unwrap();
        let u = FlatVector::from_layer_mats(&[array![[1.0, 3.0]]]);
        let v = curv.g_transpose_vec(&u).unwrap();
        assert!(close(v[0], 2.0, 1e-15));
    }

    #[test]
    fn g_lincomb_indicator_selects_a_scaled_column() {
        let dims = [(2, 3), (2, 2)];
        let curv = random_curvature(3, &dims, 4);
        let dense = curv.dense_g();
        for j in 0..4 {
            let mut w = Array1::zeros(4);
            w[j] = 1.0;
            let col = curv.g_lincomb(w.view()).unwrap();
            for p in 0..curv.num_params() {
                assert!(close(col.data()[p], dense[[p, j]], 1e-13));
            }
        }
    }

    #[test]
    fn implicit_kernels_agree_with_dense_g() {
        for seed in 0..4u64 {
            let dims = [(3, 4), (2, 3)];
            let cols = 6;
            let curv = random_curvature(seed, &dims, cols);
            let g = curv.dense_g();
            // gram
            let dense_gram = linalg::gram_of_columns(g.view());
            let gram = curv.gram();
            for i in 0..cols {
                for j in 0..cols {
                    assert!(close(gram[[i, j]], dense_gram[[i, j]], 1e-12));
                }
            }
            // Gᵀu
            let u = random_flat(seed + 100, &dims);
            let gtu = curv.g_transpose_vec(&u).unwrap();
            let dense_gtu = g.t().dot(u.data());
            for i in 0..cols {
                assert!(close(gtu[i], dense_gtu[i], 1e-12));
            }
            // Gw
            let mut rng = ChaCha12Rng::seed_from_u64(seed + 200);
            let w = Array1::from_shape_fn(cols, |_| rng.gen::<f64>() - 0.5);
            let gw = curv.g_lincomb(w.view()).unwrap();
            let dense_gw = g.dot(&w);
            for p in 0..curv.num_params() {
                assert!(close(gw.data()[p], dense_gw[p], 1e-12));
            }
        }
    }

    #[test]
    fn natural_gradient_with_zero_fisher_is_pure_damping() {
        let dims = [(2, 2)];
        let curv = ImplicitCurvature::from_parts(
            vec![array![[1.0, 2.0], [0.5, 0.1]]],
            vec![Array2::zeros((2, 2))],
            Array1::ones(2),
            FisherMode::Mc { seed: 0 },
            Scope::FullNetwork,
        )
        .unwrap();
        let u = random_flat(1, &dims);
        let ng = curv.natural_gradient(&u, 2.0).unwrap();
        for p in 0..u.len() {
            assert!(close(ng.data()[p], u.data()[p] / 2.0, 1e-15));
        }
    }

    #[test]
    fn huge_damping_dominates_a_bounded_fisher() {
        let dims = [(3, 3)];
        let curv = random_curvature(9, &dims, 5);
        let u = random_flat(10, &dims);
        let lambda = 1e12;
        let ng = curv.natural_gradient(&u, lambda).unwrap();
        for p in 0..u.len() {
            let expect = u.data()[p] / lambda;
            assert!(
                (ng.data()[p] - expect).abs() <= 1e-6 * expect.abs().max(1e-300),
                "{} vs {}",
                ng.data()[p],
                expect
            );
        }
    }

    #[test]
    fn woodbury_and_dense_routes_agree() {
        // Narrow Fisher (D < n) and wide Fisher (D > n), both routes exact.
        for (dims, cols) in [(vec![(3, 4), (2, 3)], 5usize), (vec![(2, 2)], 9usize)] {
            let curv = random_curvature(21, &dims, cols);
            let u = random_flat(22, &dims);
            let lambda = 0.3;
            let a = curv.ng_woodbury(&u, lambda).unwrap();
            let b = curv.ng_dense(&u, lambda).unwrap();
            for p in 0..u.len() {
                assert!(
                    close(a.data()[p], b.data()[p], 1e-10 * (1.0 + a.data()[p].abs())),
                    "routes disagree at {p}"
                );
            }
        }
    }

    #[test]
    fn woodbury_identity_holds() {
        // (λI + F)·natural_gradient(u) = u, with F applied densely.
        let dims = [(3, 4), (2, 3)];
        let curv = random_curvature(31, &dims, 7);
        let u = random_flat(32, &dims);
        let lambda = 0.7;
        let x = curv.natural_gradient(&u, lambda).unwrap();
        let g = curv.dense_g();
        let f = linalg::scatter_of_columns(g.view());
        let fx = f.dot(x.data());
        for p in 0..u.len() {
            let lhs = lambda * x.data()[p] + fx[p];
            assert!(
                (lhs - u.data()[p]).abs() <= 1e-8 * (1.0 + u.data()[p].abs()),
                "residual at {p}: {lhs} vs {}",
                u.data()[p]
            );
        }
    }

    #[test]
    fn scale_covariance_of_the_woodbury_solve() {
        // (λc²I + c²F)⁻¹u = c⁻²·(λI+F)⁻¹u.
        let dims = [(2, 3)];
        let base = random_curvature(41, &dims, 4);
        let u = random_flat(42, &dims);
        let lambda = 0.5;
        let c = 3.0;
        let scaled = ImplicitCurvature::from_parts(
            vec![base.a[0].clone()],
            vec![&base.e[0] * c],
            base.col_scale.clone(),
            base.mode,
            base.scope,
        )
        .unwrap();
        let lhs = scaled.natural_gradient(&u, lambda * c * c).unwrap();
        let rhs = base.natural_gradient(&u, lambda).unwrap().scaled(1.0 / (c * c));
        for p in 0..u.len() {
            assert!(
                close(lhs.data()[p], rhs.data()[p], 1e-10 * (1.0 + rhs.data()[p].abs())),
                "covariance failed at {p}"
            );
        }
    }

    #[test]
    fn blockdiag_equals_full_for_a_single_layer() {
        let dims = [(3, 4)];
        let curv = random_curvature(51, &dims, 6);
        let u = random_flat(52, &dims);
        let a = curv.natural_gradient(&u, 0.2).unwrap();
        let b = curv.natural_gradient_blockdiag(&u, 0.2).unwrap();
        for p in 0..u.len() {
            assert!(close(a.data()[p], b.data()[p], 1e-10));
        }
    }

    #[test]
    fn mc_mode_has_one_column_per_input() {
        let net = NetworkState::new(
            &[3, 4, 2],
            Activation::Relu,
            LossKind::CrossEntropySoftmax,
            1,
        )
        .unwrap();
        let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i + j) as f64 * 0.3).sin());
        let curv = ImplicitCurvature::build(&net, &x, FisherMode::Mc { seed: 7 }).unwrap();
        assert_eq!(curv.cols(), 5);
        let expect = 1.0 / 5f64.sqrt();
        assert!(curv.col_scale().iter().all(|&s| close(s, expect, 1e-15)));
    }

    #[test]
    fn full_mode_matches_the_explicit_expectation() {
        // 2 classes, N=1: GGᵀ = p₀·g₀g₀ᵀ + p₁·g₁g₁ᵀ.
        let net = NetworkState::from_layers(
            vec![array![[0.4, -0.1], [0.2, 0.3]]],
            Activation::Relu,
            LossKind::CrossEntropySoftmax,
        )
        .unwrap();
        let x = array![[0.9], [-0.4]];
        let curv = ImplicitCurvature::build(&net, &x, FisherMode::Full).unwrap();
        assert_eq!(curv.cols(), 2);
        let f = linalg::scatter_of_columns(curv.dense_g().view());

        let trace = net.forward(&x).unwrap();
        let probs = crate::net::softmax_columns(trace.logits());
        let mut expect: Array2<f64> = Array2::zeros((4, 4));
        for c in 0..2 {
            let mut t = net.forward(&x).unwrap();
            let grads = net.backward(&mut t, &Targets::Classes(vec![c])).unwrap();
            let g = FlatVector::from_layer_mats(&grads);
            for p in 0..4 {
                for q in 0..4 {
                    expect[[p, q]] += probs[[c, 0]] * g.data()[p] * g.data()[q];
                }
            }
        }
        for p in 0..4 {
            for q in 0..4 {
                assert!(close(f[[p, q]], expect[[p, q]], 1e-12));
            }
        }
    }

    #[test]
    fn saturated_softmax_gives_a_vanishing_full_fisher() {
        let net = NetworkState::from_layers(
            vec![array![[80.0, 0.0], [0.0, 80.0]]],
            Activation::Relu,
            LossKind::CrossEntropySoftmax,
        )
        .unwrap();
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let curv = ImplicitCurvature::build(&net, &x, FisherMode::Full).unwrap();
        let f = linalg::scatter_of_columns(curv.dense_g().view());
        assert!(linalg::max_abs(f.view()) < 1e-12);
    }

    #[test]
    fn full_fisher_is_rejected_for_regression() {
        let net = NetworkState::new(&[2, 2], Activation::Relu, LossKind::SquaredError, 0)
            .unwrap();
        let err = ImplicitCurvature::build(&net, &array![[1.0], [0.0]], FisherMode::Full)
            .unwrap_err();
        assert!(matches!(err, Error::Unsupported { .. }));
    }

    #[test]
    fn dense_fisher_is_positive_semidefinite() {
        let net = NetworkState::new(
            &[3, 3, 2],
            Activation::Tanh,
            LossKind::CrossEntropySoftmax,
            13,
        )
        .unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| ((i * 5 + j) as f64 * 0.17).cos());
        let curv = ImplicitCurvature::build(&net, &x, FisherMode::Full).unwrap();
        let f = linalg::scatter_of_columns(curv.dense_g().view());
        let (vals, _) = linalg::eigh(&f);
        assert!(vals.iter().all(|&v| v >= -1e-10), "eigenvalues {vals:?}");
    }

    #[test]
    fn rejects_nonpositive_damping() {
        let curv = random_curvature(61, &[(2, 2)], 3);
        let u = random_flat(62, &[(2, 2)]);
        assert!(curv.natural_gradient(&u, 0.0).is_err());
        assert!(curv.natural_gradient(&u, -1.0).is_err());
    }
}
