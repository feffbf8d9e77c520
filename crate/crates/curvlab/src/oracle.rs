//! Brute-force reference computations on tiny instances: explicit `G` and
//! `F = GGᵀ`, dense Kronecker curvatures, dense posterior covariances, and
//! central finite-difference gradients.
//!
//! Everything here is deliberately slow and direct — the point is that each
//! implicit operation in the rest of the crate has a dense twin whose
//! correctness is obvious, and `agreement_checks` runs the whole
//! cross-validation matrix on a fixed set of seeded instances. A size guard
//! keeps the dense paths from being called on anything that isn't tiny.
//!
//! Vec ordering is fixed crate-wide: row-major over each `n_out × n_in`
//! layer matrix, layers concatenated input to output. Every Kronecker
//! identity below depends on it; under this ordering a layer's curvature
//! factorizes as `Σ_E ⊗ Σ_A`.

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::curvature::{FisherMode, FlatVector, ImplicitCurvature};
use crate::linalg;
use crate::net::{Activation, LossKind, NetworkState, Targets};
use crate::{Error, Result};

/// Maximum `n_params · D` the dense paths will materialize.
pub const DENSE_GUARD: usize = 1_000_000;

/// Materialize `G` explicitly, with the size guard applied.
pub fn assemble_g(curv: &ImplicitCurvature) -> Result<Array2<f64>> {
    let size = curv.num_params() * curv.cols();
    if size > DENSE_GUARD {
        return Err(Error::SizeGuard {
            requested: size,
            limit: DENSE_GUARD,
        });
    }
    Ok(curv.dense_g())
}

/// `(λI + GGᵀ)⁻¹u` by direct dense assembly and factorization.
pub fn dense_natural_gradient(
    curv: &ImplicitCurvature,
    u: &FlatVector,
    lambda: f64,
) -> Result<FlatVector> {
    let g = assemble_g(curv)?;
    let mut f = linalg::scatter_of_columns(g.view());
    for i in 0..f.nrows() {
        f[[i, i]] += lambda;
    }
    let x = linalg::spd_solve_vec(&f, u.data().view())?;
    FlatVector::from_flat(x, u.dims().to_vec())
}

/// Kronecker product, `(a ⊗ b)[ip+k, jq+l] = a[i,j]·b[k,l]`.
pub fn kron(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let mut out = Array2::zeros((ar * br, ac * bc));
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[[i, j]];
            for k in 0..br {
                for l in 0..bc {
                    out[[i * br + k, j * bc + l]] = aij * b[[k, l]];
                }
            }
        }
    }
    out
}

/// How damping enters the dense Kronecker curvature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DampingMode {
    /// `Σ_E ⊗ Σ_A + λI` — damping added to the full curvature.
    Standard { lambda: f64 },
    /// `(Σ_E + λ_E I) ⊗ (Σ_A + λ_A I)` — each factor damped separately.
    Heuristic { lambda_a: f64, lambda_e: f64 },
}

/// Dense single-layer Kronecker curvature under the crate's row-major vec.
pub fn dense_kron_curvature(
    sigma_a: &Array2<f64>,
    sigma_e: &Array2<f64>,
    mode: DampingMode,
) -> Array2<f64> {
    match mode {
        DampingMode::Standard { lambda } => {
            let mut c = kron(sigma_e.view(), sigma_a.view());
            for i in 0..c.nrows() {
                c[[i, i]] += lambda;
            }
            c
        }
        DampingMode::Heuristic { lambda_a, lambda_e } => {
            let mut se = sigma_e.clone();
            for i in 0..se.nrows() {
                se[[i, i]] += lambda_e;
            }
            let mut sa = sigma_a.clone();
            for i in 0..sa.nrows() {
                sa[[i, i]] += lambda_a;
            }
            kron(se.view(), sa.view())
        }
    }
}

/// Central finite differences of the total (summed-over-columns) loss.
pub fn finite_diff_grad(
    net: &NetworkState,
    x: &Array2<f64>,
    targets: &Targets,
    eps: f64,
) -> Result<FlatVector> {
    let mut grads = Vec::with_capacity(net.num_layers());
    for k in 0..net.num_layers() {
        let (n, m) = net.layers[k].dim();
        let mut g = Array2::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let mut plus = net.clone();
                plus.layers[k][[i, j]] += eps;
                let lp = plus.loss_total(plus.forward(x)?.logits(), targets)?;
                let mut minus = net.clone();
                minus.layers[k][[i, j]] -= eps;
                let lm = minus.loss_total(minus.forward(x)?.logits(), targets)?;
                g[[i, j]] = (lp - lm) / (2.0 * eps);
            }
        }
        grads.push(g);
    }
    Ok(FlatVector::from_layer_mats(&grads))
}

/// Dense posterior covariance `(diag(prior) + D·F)⁻¹`.
pub fn dense_laplace_cov(
    prior_diag: ArrayView1<f64>,
    curv: &ImplicitCurvature,
    datapoints: f64,
) -> Result<Array2<f64>> {
    let n = curv.num_params();
    if prior_diag.len() != n {
        return Err(Error::Shape {
            context: format!(
                "prior diagonal has {} entries, network has {n} parameters",
                prior_diag.len()
            ),
        });
    }
    if prior_diag.iter().any(|&p| !crate::positive(p)) {
        return Err(Error::Invalid {
            message: "prior precision entries must be positive".into(),
        });
    }
    let g = assemble_g(curv)?;
    let mut precision = linalg::scatter_of_columns(g.view()) * datapoints;
    for i in 0..n {
        precision[[i, i]] += prior_diag[i];
    }
    linalg::spd_solve(&precision, Array2::eye(n).view())
}

/// One row of the agreement matrix.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: String,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleCheck {
    fn new(name: String, max_deviation: f64, tolerance: f64) -> Self {
        let pass = max_deviation.is_finite() && max_deviation <= tolerance;
        OracleCheck {
            name,
            max_deviation,
            tolerance,
            pass,
        }
    }
}

/// Mutation fixture: lets tests prove the agreement matrix actually catches
/// an implementation bug instead of vacuously passing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Flip the sign of the implicit `Gw` product before comparing.
    NegateGw,
}

/// A seeded tiny problem for the cross-validation matrix.
pub struct TestInstance {
    pub name: &'static str,
    pub net: NetworkState,
    pub x: Array2<f64>,
    pub targets: Targets,
    pub mode: FisherMode,
    pub seed: u64,
}

fn instance(
    name: &'static str,
    dims: &[usize],
    activation: Activation,
    loss: LossKind,
    batch: usize,
    mode: FisherMode,
    seed: u64,
) -> TestInstance {
    let net = NetworkState::new(dims, activation, loss, seed).expect("valid dims");
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed);
    let x = Array2::from_shape_fn((dims[0], batch), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let classes = *dims.last().expect("nonempty dims");
    let targets = match loss {
        LossKind::CrossEntropySoftmax => {
            Targets::Classes((0..batch).map(|_| rng.gen_range(0..classes)).collect())
        }
        LossKind::SquaredError => {
            Targets::Values(Array2::from_shape_fn((classes, batch), |_| {
                rng.gen::<f64>() * 2.0 - 1.0
            }))
        }
    };
    TestInstance {
        name,
        net,
        x,
        targets,
        mode,
        seed,
    }
}

/// The fixed instance set: 1–3 layers, widths ≤ 8, D ≤ 20, both losses,
/// both activations, MC and full-mode Fishers, plus one instance whose
/// Fisher is wider than the parameter space (exercising the dense solve
/// route inside `natural_gradient`).
pub fn test_instances() -> Vec<TestInstance> {
    use Activation::{Relu, Tanh};
    use LossKind::{CrossEntropySoftmax as Ce, SquaredError as Se};
    let mc = |seed| FisherMode::Mc { seed };
    vec![
        instance("relu-ce-1layer-mc", &[4, 3], Relu, Ce, 6, mc(101), 1),
        instance("relu-ce-1layer-full", &[4, 3], Relu, Ce, 6, FisherMode::Full, 2),
        instance("tanh-ce-2layer-mc", &[3, 5, 3], Tanh, Ce, 7, mc(102), 3),
        instance("tanh-ce-2layer-full", &[3, 4, 3], Tanh, Ce, 6, FisherMode::Full, 4),
        instance("relu-se-1layer-mc", &[4, 2], Relu, Se, 8, mc(103), 5),
        instance("tanh-se-2layer-mc", &[3, 4, 2], Tanh, Se, 10, mc(104), 6),
        instance("relu-ce-3layer-mc", &[4, 5, 4, 3], Relu, Ce, 9, mc(105), 7),
        instance("tanh-ce-3layer-full", &[3, 3, 3, 2], Tanh, Ce, 8, FisherMode::Full, 8),
        instance("relu-ce-wide-mc", &[8, 8, 5], Relu, Ce, 12, mc(106), 9),
        instance("tanh-se-3layer-mc", &[4, 4, 3, 2], Tanh, Se, 12, mc(107), 10),
        instance("relu-ce-2layer-full", &[5, 4, 4], Relu, Ce, 5, FisherMode::Full, 11),
        instance("tanh-ce-1layer-mc", &[6, 4], Tanh, Ce, 10, mc(108), 12),
        instance("relu-se-3layer-mc", &[5, 3, 3, 1], Relu, Se, 14, mc(109), 13),
        instance("relu-ce-narrownet-full", &[2, 2], Relu, Ce, 5, FisherMode::Full, 14),
    ]
}

/// Max absolute deviation normalized by `max(1, ‖reference‖_∞)`, so the
/// figure reads as absolute for O(1) quantities and relative for large ones.
fn deviation(got: ArrayView1<f64>, reference: ArrayView1<f64>) -> f64 {
    let scale = reference
        .iter()
        .fold(1.0f64, |acc, &v| acc.max(v.abs()));
    got.iter()
        .zip(reference.iter())
        .fold(0.0f64, |acc, (&a, &b)| acc.max((a - b).abs()))
        / scale
}

fn deviation2(got: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    deviation(
        got.view().into_shape(got.len()).expect("contiguous"),
        reference
            .view()
            .into_shape(reference.len())
            .expect("contiguous"),
    )
}

const TOL_PRODUCT: f64 = 1e-10;
const TOL_SOLVE: f64 = 1e-8;
const TOL_FD: f64 = 1e-5;
const TOL_KRON: f64 = 1e-10;

/// Run the full cross-validation matrix over `test_instances`.
///
/// Each implicit operation is compared against its dense twin; products are
/// held to 1e−10, factored solves to 1e−8, finite differences to 1e−5. The
/// `fault` argument injects a deliberate bug so tests can confirm the matrix
/// is not vacuous.
pub fn agreement_checks(fault: Fault) -> Result<Vec<OracleCheck>> {
    let mut checks = Vec::new();
    for inst in test_instances() {
        let curv = ImplicitCurvature::build(&inst.net, &inst.x, inst.mode)?;
        let g = assemble_g(&curv)?;
        let dims = inst.net.layer_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(inst.seed.wrapping_mul(0x9e3779b97f4a7c15));
        let u = FlatVector::from_flat(
            Array1::from_shape_fn(curv.num_params(), |_| rng.gen::<f64>() - 0.5),
            dims.clone(),
        )?;
        let w = Array1::from_shape_fn(curv.cols(), |_| rng.gen::<f64>() - 0.5);
        let lambda = 0.3;

        // Products.
        let gram_dense = linalg::gram_of_columns(g.view());
        checks.push(OracleCheck::new(
            format!("{}/gram", inst.name),
            deviation2(&curv.gram(), &gram_dense),
            TOL_PRODUCT,
        ));
        checks.push(OracleCheck::new(
            format!("{}/gt-vec", inst.name),
            deviation(curv.g_transpose_vec(&u)?.view(), g.t().dot(u.data()).view()),
            TOL_PRODUCT,
        ));
        let mut gw = curv.g_lincomb(w.view())?;
        if fault == Fault::NegateGw {
            *gw.data_mut() *= -1.0;
        }
        checks.push(OracleCheck::new(
            format!("{}/gw", inst.name),
            deviation(gw.data().view(), g.dot(&w).view()),
            TOL_PRODUCT,
        ));

        // Solves.
        let dense_ng = dense_natural_gradient(&curv, &u, lambda)?;
        checks.push(OracleCheck::new(
            format!("{}/natural-gradient", inst.name),
            deviation(
                curv.natural_gradient(&u, lambda)?.data().view(),
                dense_ng.data().view(),
            ),
            TOL_SOLVE,
        ));
        let blockdiag = curv.natural_gradient_blockdiag(&u, lambda)?;
        let mut dense_blocks = Vec::with_capacity(dims.len());
        for k in 0..dims.len() {
            let single = ImplicitCurvature::from_parts(
                vec![curv.a_factor(k).clone()],
                vec![curv.e_factor(k).clone()],
                curv.col_scale().clone(),
                curv.mode,
                curv.scope,
            )?;
            let uk = FlatVector::from_layer_mats(&[u.mat(k).to_owned()]);
            dense_blocks.push(dense_natural_gradient(&single, &uk, lambda)?.mat(0).to_owned());
        }
        checks.push(OracleCheck::new(
            format!("{}/natural-gradient-blockdiag", inst.name),
            deviation(
                blockdiag.data().view(),
                FlatVector::from_layer_mats(&dense_blocks).data().view(),
            ),
            TOL_SOLVE,
        ));

        // Gradients.
        let mut trace = inst.net.forward(&inst.x)?;
        let backprop =
            FlatVector::from_layer_mats(&inst.net.backward(&mut trace, &inst.targets)?);
        let fd = finite_diff_grad(&inst.net, &inst.x, &inst.targets, 1e-5)?;
        checks.push(OracleCheck::new(
            format!("{}/grad-fd", inst.name),
            deviation(backprop.data().view(), fd.data().view()),
            TOL_FD,
        ));

        // Kronecker-preconditioned updates and the posterior sampler have
        // their own dense twins; run them on the same instance.
        checks.extend(kron_checks(&inst, &curv, lambda)?);
    }
    checks.extend(laplace_checks()?);
    Ok(checks)
}

/// Dense twins for the Kronecker-factored updates on one instance.
fn kron_checks(
    inst: &TestInstance,
    curv: &ImplicitCurvature,
    lambda: f64,
) -> Result<Vec<OracleCheck>> {
    let mut checks = Vec::new();
    let mut trace = inst.net.forward(&inst.x)?;
    let grads = inst.net.backward(&mut trace, &inst.targets)?;
    let cols = curv.cols() as f64;
    for (k, grad) in grads.iter().enumerate() {
        let sigma_a = linalg::scatter_of_columns(curv.a_factor(k).view()) / cols;
        let sigma_e = linalg::scatter_of_columns(curv.e_factor(k).view()) / cols;
        let gvec = FlatVector::from_layer_mats(std::slice::from_ref(grad));

        // KFAC, heuristic damping: P_E·grad·P_A against the dense
        // factor-damped Kronecker solve.
        let (lambda_a, lambda_e) =
            crate::kron::damping_split(lambda, &sigma_a, &sigma_e);
        let p_a = linalg::damped_inverse(&sigma_a, lambda_a)?;
        let p_e = linalg::damped_inverse(&sigma_e, lambda_e)?;
        let implicit = linalg::matmul(linalg::matmul(p_e.view(), grad.view()).view(), p_a.view());
        let dense = dense_kron_curvature(
            &sigma_a,
            &sigma_e,
            DampingMode::Heuristic { lambda_a, lambda_e },
        );
        let solved = linalg::spd_solve_vec(&dense, gvec.data().view())?;
        checks.push(OracleCheck::new(
            format!("{}/kfac-heuristic-l{k}", inst.name),
            deviation(
                FlatVector::from_layer_mats(&[implicit]).data().view(),
                solved.view(),
            ),
            TOL_SOLVE,
        ));

        // KFAC, standard damping: eigenbasis evaluation against the dense
        // (Σ_E⊗Σ_A + λI) solve.
        let implicit = crate::kron::standard_damped_solve(&sigma_a, &sigma_e, grad, lambda)?;
        let dense = dense_kron_curvature(&sigma_a, &sigma_e, DampingMode::Standard { lambda });
        let solved = linalg::spd_solve_vec(&dense, gvec.data().view())?;
        checks.push(OracleCheck::new(
            format!("{}/kfac-standard-l{k}", inst.name),
            deviation(
                FlatVector::from_layer_mats(&[implicit]).data().view(),
                solved.view(),
            ),
            TOL_SOLVE,
        ));

        // FOOF: the update must satisfy its normal equations,
        // dir·(λI + Σ_A) = grad.
        let dir = linalg::matmul(grad.view(), linalg::damped_inverse(&sigma_a, lambda)?.view());
        let mut damped_a = sigma_a.clone();
        for i in 0..damped_a.nrows() {
            damped_a[[i, i]] += lambda;
        }
        let residual = &linalg::matmul(dir.view(), damped_a.view()) - grad;
        checks.push(OracleCheck::new(
            format!("{}/foof-normal-eq-l{k}", inst.name),
            deviation2(&(&residual + grad), grad),
            TOL_KRON,
        ));
    }
    Ok(checks)
}

/// Dense twins for the posterior sampler's internal identity.
fn laplace_checks() -> Result<Vec<OracleCheck>> {
    let net = NetworkState::new(
        &[3, 4, 2],
        Activation::Tanh,
        LossKind::CrossEntropySoftmax,
        77,
    )?;
    let mut rng = ChaCha12Rng::seed_from_u64(0x1a91ace);
    let x = Array2::from_shape_fn((3, 4), |_| rng.gen::<f64>() * 2.0 - 1.0);
    let curv = ImplicitCurvature::build(&net, &x, FisherMode::Full)?;
    let n = curv.num_params();
    let prior = Array1::from_shape_fn(n, |_| 0.5 + rng.gen::<f64>());
    let datapoints = 4.0;

    // E[xxᵀ] = I − V U⁻¹ Vᵀ, assembled densely.
    let dev = crate::laplace::identity_check(prior.view(), &curv, datapoints)?;
    let mut checks = vec![OracleCheck::new(
        "laplace/identity".into(),
        dev,
        TOL_KRON,
    )];

    // Posterior covariance from the dense precision equals the same matrix
    // assembled through the low-rank factors.
    let cov = dense_laplace_cov(prior.view(), &curv, datapoints)?;
    let g = assemble_g(&curv)?;
    let mut precision = linalg::scatter_of_columns(g.view()) * datapoints;
    for i in 0..n {
        precision[[i, i]] += prior[i];
    }
    let product = linalg::matmul(precision.view(), cov.view());
    checks.push(OracleCheck::new(
        "laplace/dense-cov".into(),
        deviation2(&product, &Array2::eye(n)),
        TOL_SOLVE,
    ));
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn assemble_g_matches_the_hand_outer_product() {
        // a=(1,2), e=(3), scale 1 → column vec([[3,6]]).
        let curv = ImplicitCurvature::from_parts(
            vec![array![[1.0], [2.0]]],
            vec![array![[3.0]]],
            Array1::ones(1),
            FisherMode::Mc { seed: 0 },
            crate::curvature::Scope::FullNetwork,
        )
        .unwrap();
        let g = assemble_g(&curv).unwrap();
        assert_eq!(g, array![[3.0], [6.0]]);
    }

    #[test]
    fn assemble_g_of_zero_errors_is_zero() {
        let curv = ImplicitCurvature::from_parts(
            vec![array![[1.0, 2.0]]],
            vec![Array2::zeros((3, 2))],
            Array1::ones(2),
            FisherMode::Mc { seed: 0 },
            crate::curvature::Scope::FullNetwork,
        )
        .unwrap();
        assert_eq!(assemble_g(&curv).unwrap(), Array2::zeros((3, 2)));
    }

    #[test]
    fn assemble_g_enforces_the_size_guard() {
        let curv = ImplicitCurvature::from_parts(
            vec![Array2::zeros((1001, 1001))],
            vec![Array2::zeros((1001, 1001))],
            Array1::ones(1001),
            FisherMode::Mc { seed: 0 },
            crate::curvature::Scope::FullNetwork,
        )
        .unwrap();
        match assemble_g(&curv) {
            Err(Error::SizeGuard { requested, limit }) => {
                assert!(requested > limit);
                assert_eq!(limit, DENSE_GUARD);
            }
            other => panic!("expected size guard error, got {other:?}"),
        }
    }

    #[test]
    fn dense_natural_gradient_with_zero_fisher_is_pure_damping() {
        let curv = ImplicitCurvature::from_parts(
            vec![array![[1.0, 2.0], [0.3, 0.4]]],
            vec![Array2::zeros((2, 2))],
            Array1::ones(2),
            FisherMode::Mc { seed: 0 },
            crate::curvature::Scope::FullNetwork,
        )
        .unwrap();
        let u = FlatVector::from_layer_mats(&[array![[1.0, -2.0], [3.0, 0.5]]]);
        let x = dense_natural_gradient(&curv, &u, 4.0).unwrap();
        for p in 0..u.len() {
            assert!(close(x.data()[p], u.data()[p] / 4.0, 1e-14));
        }
    }

    #[test]
    fn kron_matches_the_definition() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[0.0, 5.0], [6.0, 7.0]];
        let k = kron(a.view(), b.view());
        assert_eq!(k.dim(), (4, 4));
        assert_eq!(k[[0, 1]], 5.0); // a00·b01
        assert_eq!(k[[2, 0]], 0.0); // a10·b00
        assert_eq!(k[[3, 3]], 4.0 * 7.0);
        // Mixed-product smoke: (A⊗B)(x⊗y) = (Ax)⊗(By).
        let x = array![[1.0], [2.0]];
        let y = array![[3.0], [-1.0]];
        let lhs = k.dot(&kron(x.view(), y.view()));
        let rhs = kron(a.dot(&x).view(), b.dot(&y).view());
        for i in 0..4 {
            assert!(close(lhs[[i, 0]], rhs[[i, 0]], 1e-13));
        }
    }

    #[test]
    fn heuristic_curvature_expands_into_standard_plus_cross_terms() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let raw_a = Array2::from_shape_fn((3, 6), |_| rng.gen::<f64>() - 0.5);
        let raw_e = Array2::from_shape_fn((2, 6), |_| rng.gen::<f64>() - 0.5);
        let sigma_a = linalg::scatter_of_columns(raw_a.view());
        let sigma_e = linalg::scatter_of_columns(raw_e.view());
        let (lambda_a, lambda_e) = (0.7, 0.2);
        let heuristic = dense_kron_curvature(
            &sigma_a,
            &sigma_e,
            DampingMode::Heuristic { lambda_a, lambda_e },
        );
        let standard = dense_kron_curvature(
            &sigma_a,
            &sigma_e,
            DampingMode::Standard {
                lambda: lambda_a * lambda_e,
            },
        );
        let cross = kron(sigma_e.view(), Array2::eye(3).view()) * lambda_a
            + kron(Array2::eye(2).view(), sigma_a.view()) * lambda_e;
        let zero = &heuristic - &standard - &cross;
        assert!(linalg::max_abs(zero.view()) < 1e-10);
    }

    #[test]
    fn kron_curvature_is_exact_for_a_single_column() {
        // With one datapoint the Kronecker factorization is not an
        // approximation: vec(eaᵀ)vec(eaᵀ)ᵀ = (eeᵀ)⊗(aaᵀ) under row-major vec.
        let a = array![[1.0], [-2.0], [0.5]];
        let e = array![[3.0], [1.0]];
        let curv = ImplicitCurvature::from_parts(
            vec![a.clone()],
            vec![e.clone()],
            Array1::ones(1),
            FisherMode::Mc { seed: 0 },
            crate::curvature::Scope::FullNetwork,
        )
        .unwrap();
        let f = linalg::scatter_of_columns(assemble_g(&curv).unwrap().view());
        let sigma_a = linalg::scatter_of_columns(a.view());
        let sigma_e = linalg::scatter_of_columns(e.view());
        let k = dense_kron_curvature(&sigma_a, &sigma_e, DampingMode::Standard { lambda: 0.0 });
        assert!(linalg::max_abs((&f - &k).view()) < 1e-12);
    }

    #[test]
    fn finite_differences_match_backprop_on_a_seeded_net() {
        let inst = &test_instances()[2];
        let mut trace = inst.net.forward(&inst.x).unwrap();
        let bp = FlatVector::from_layer_mats(&inst.net.backward(&mut trace, &inst.targets).unwrap());
        let fd = finite_diff_grad(&inst.net, &inst.x, &inst.targets, 1e-5).unwrap();
        assert!(deviation(bp.data().view(), fd.data().view()) < 1e-6);
    }

    #[test]
    fn laplace_cov_reduces_to_the_prior_when_fisher_is_zero() {
        let curv = ImplicitCurvature::from_parts(
            vec![array![[1.0, 2.0], [0.5, -1.0]]],
            vec![Array2::zeros((2, 2))],
            Array1::ones(2),
            FisherMode::Mc { seed: 0 },
            crate::curvature::Scope::FullNetwork,
        )
        .unwrap();
        let prior = array![2.0, 4.0, 5.0, 10.0];
        let cov = dense_laplace_cov(prior.view(), &curv, 3.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 / prior[i] } else { 0.0 };
                assert!(close(cov[[i, j]], expect, 1e-14));
            }
        }
    }

    #[test]
    fn laplace_cov_rejects_nonpositive_priors() {
        let curv = ImplicitCurvature::from_parts(
            vec![array![[1.0]]],
            vec![array![[1.0]]],
            Array1::ones(1),
            FisherMode::Mc { seed: 0 },
            crate::curvature::Scope::FullNetwork,
        )
        .unwrap();
        assert!(dense_laplace_cov(array![0.0].view(), &curv, 1.0).is_err());
    }

    #[test]
    fn instance_matrix_covers_the_contracted_variety() {
        let insts = test_instances();
        assert!(insts.len() >= 12);
        assert!(insts.iter().any(|i| i.net.num_layers() == 3));
        assert!(insts.iter().any(|i| i.net.loss == LossKind::SquaredError));
        assert!(insts.iter().any(|i| matches!(i.mode, FisherMode::Full)));
        assert!(insts.iter().any(|i| matches!(i.mode, FisherMode::Mc { .. })));
        for inst in &insts {
            let curv = ImplicitCurvature::build(&inst.net, &inst.x, inst.mode).unwrap();
            assert!(curv.cols() <= 20, "{} has D={}", inst.name, curv.cols());
            assert!(inst
                .net
                .layer_dims()
                .iter()
                .all(|&(n, m)| n <= 8 && m <= 8));
        }
        // At least one instance exercises the wide-Fisher dense route.
        assert!(insts.iter().any(|i| {
            let curv = ImplicitCurvature::build(&i.net, &i.x, i.mode).unwrap();
            curv.cols() > curv.num_params()
        }));
    }

    #[test]
    fn agreement_matrix_passes_clean_and_catches_the_injected_fault() {
        let clean = agreement_checks(Fault::None).unwrap();
        assert!(!clean.is_empty());
        for c in &clean {
            assert!(c.pass, "{} deviated {} > {}", c.name, c.max_deviation, c.tolerance);
        }
        let faulty = agreement_checks(Fault::NegateGw).unwrap();
        let gw_failures = faulty
            .iter()
            .filter(|c| c.name.ends_with("/gw") && !c.pass)
            .count();
        assert!(gw_failures > 0, "injected sign error went undetected");
        // Names are unique.
        let mut names: Vec<_> = clean.iter().map(|c| c.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), clean.len());
    }
}
