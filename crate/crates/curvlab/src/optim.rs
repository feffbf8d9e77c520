//! One step interface over every update rule: SGD and Adam baselines, the
//! two KFAC variants, FOOF, and the exact subsampled natural gradients.
//!
//! Each optimizer produces a direction in gradient orientation; this module
//! owns the step loop plumbing around it — heavy-ball momentum on the
//! direction, optional decoupled weight decay, the Kronecker factor
//! accumulate/refresh calendar, and the same-batch vs independent-batch
//! pairing of curvature and gradient. Weights move as
//! `W ← W − η·(momentum-filtered direction) − η·wd·W`.

use ndarray::prelude::*;

use crate::curvature::{CurvaturePolicy, FisherMode, FlatVector, ImplicitCurvature};
use crate::kron::{DampingStyle, FactorSet, KroneckerState};
use crate::net::{NetworkState, Targets};
use crate::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Which update rule the step loop runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    KfacHeuristic,
    KfacStandard,
    Foof,
    NaturalGradient,
    NaturalGradientBlockDiag,
}

impl OptimizerKind {
    pub fn uses_kron_factors(self) -> bool {
        matches!(
            self,
            OptimizerKind::KfacHeuristic | OptimizerKind::KfacStandard | OptimizerKind::Foof
        )
    }

    pub fn uses_implicit_fisher(self) -> bool {
        matches!(
            self,
            OptimizerKind::NaturalGradient | OptimizerKind::NaturalGradientBlockDiag
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::KfacHeuristic => "kfac-heuristic",
            OptimizerKind::KfacStandard => "kfac-standard",
            OptimizerKind::Foof => "foof",
            OptimizerKind::NaturalGradient => "natural-gradient",
            OptimizerKind::NaturalGradientBlockDiag => "natural-gradient-blockdiag",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "kfac-heuristic" | "kfac" => Ok(OptimizerKind::KfacHeuristic),
            "kfac-standard" => Ok(OptimizerKind::KfacStandard),
            "foof" => Ok(OptimizerKind::Foof),
            "natural-gradient" | "ng" => Ok(OptimizerKind::NaturalGradient),
            "natural-gradient-blockdiag" | "ng-blockdiag" => {
                Ok(OptimizerKind::NaturalGradientBlockDiag)
            }
            other => Err(Error::Invalid {
                message: format!("unknown optimizer '{other}'"),
            }),
        }
    }
}

/// How Fisher columns are produced when an optimizer needs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FisherChoice {
    /// One model-sampled label per input (seed derived per step).
    Mc,
    /// One column per (input, class) pair — the exact expectation.
    Full,
}

impl std::str::FromStr for FisherChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(FisherChoice::Mc),
            "full" => Ok(FisherChoice::Full),
            other => Err(Error::Invalid {
                message: format!("unknown fisher mode '{other}'"),
            }),
        }
    }
}

/// Hyperparameters shared by every optimizer kind; fields irrelevant to a
/// kind are ignored by it (and validated only where they are meaningful).
#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub damping: f64,
    pub momentum: f64,
    pub ema_m: f64,
    /// Inversion period T for the Kronecker methods.
    pub period: u64,
    /// Accumulation window S (the steps leading into each inversion).
    pub window: u64,
    pub policy: CurvaturePolicy,
    pub fisher: FisherChoice,
    /// Estimate curvature from the single current batch (forces `ema_m = 0`).
    pub subsampled: bool,
    /// Decoupled weight decay strength; 0 disables it.
    pub weight_decay: f64,
    /// Diagnostic FOOF variant that borrows λ_A from the KFAC split and
    /// rescales by 1/λ_E.
    pub foof_lambda_a_from_kfac: bool,
}

impl OptimizerConfig {
    /// Baseline configuration for `kind`: no momentum, EMA decay 0.95,
    /// unamortized factor refreshes, same-batch MC curvature.
    pub fn new(kind: OptimizerKind, lr: f64, damping: f64) -> Self {
        OptimizerConfig {
            kind,
            lr,
            damping,
            momentum: 0.0,
            ema_m: 0.95,
            period: 1,
            window: 1,
            policy: CurvaturePolicy::SameBatch,
            fisher: FisherChoice::Mc,
            subsampled: false,
            weight_decay: 0.0,
            foof_lambda_a_from_kfac: false,
        }
    }

    pub fn effective_ema(&self) -> f64 {
        if self.subsampled {
            0.0
        } else {
            self.ema_m
        }
    }

    fn validate(&self) -> Result<()> {
        if !crate::positive(self.lr) {
            return Err(Error::Invalid {
                message: format!("learning rate must be positive, got {}", self.lr),
            });
        }
        if self.kind.uses_implicit_fisher() && !crate::positive(self.damping) {
            return Err(Error::Invalid {
                message: format!(
                    "natural gradients need positive damping, got {}",
                    self.damping
                ),
            });
        }
        if self.kind.uses_kron_factors() && !crate::non_negative(self.damping) {
            return Err(Error::Invalid {
                message: format!("damping must be nonnegative, got {}", self.damping),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid {
                message: format!("momentum must lie in [0, 1), got {}", self.momentum),
            });
        }
        if self.kind == OptimizerKind::Adam && self.momentum != 0.0 {
            return Err(Error::Invalid {
                message: "Adam keeps its own moment estimates; momentum must be 0".into(),
            });
        }
        if !crate::non_negative(self.weight_decay) {
            return Err(Error::Invalid {
                message: format!("weight decay must be nonnegative, got {}", self.weight_decay),
            });
        }
        Ok(())
    }
}

/// What one step observed and did, for metric logging.
#[derive(Debug, Clone)]
pub struct StepStats {
    /// Mean loss on the step's batch, at the pre-update weights.
    pub loss: f64,
    pub accuracy: Option<f64>,
    /// Raw summed gradient at the pre-update weights.
    pub gradient: Vec<Array2<f64>>,
    /// The preconditioned direction (gradient orientation, pre-momentum).
    pub direction: Vec<Array2<f64>>,
    /// The weight change actually applied.
    pub update: Vec<Array2<f64>>,
}

/// Stateful step loop for one training run.
pub struct Optimizer {
    config: OptimizerConfig,
    dims: Vec<(usize, usize)>,
    kron: Option<KroneckerState>,
    momentum_buf: Option<Vec<Array2<f64>>>,
    adam_m: Option<Vec<Array2<f64>>>,
    adam_v: Option<Vec<Array2<f64>>>,
    adam_t: u64,
    prev_inputs: Option<Array2<f64>>,
    step_index: u64,
    warmup_index: u64,
    run_seed: u64,
}

/// SplitMix64; decorrelates per-step sampling seeds from the run seed.
pub(crate) fn derive_seed(run_seed: u64, salt: u64, counter: u64) -> u64 {
    let mut z = run_seed
        .wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(counter.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Optimizer {
    pub fn new(
        config: OptimizerConfig,
        dims: &[(usize, usize)],
        run_seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let kron = if config.kind.uses_kron_factors() {
            Some(
                KroneckerState::new(
                    dims,
                    config.effective_ema(),
                    config.damping,
                    config.period,
                    config.window,
                )?
                .with_foof_split(config.foof_lambda_a_from_kfac),
            )
        } else {
            None
        };
        Ok(Optimizer {
            config,
            dims: dims.to_vec(),
            kron,
            momentum_buf: None,
            adam_m: None,
            adam_v: None,
            adam_t: 0,
            prev_inputs: None,
            step_index: 0,
            warmup_index: 0,
            run_seed,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn kron_state(&self) -> Option<&KroneckerState> {
        self.kron.as_ref()
    }

    /// Pin the heuristic path's damping pair (analysis hook).
    pub fn set_fixed_damping(&mut self, lambda_a: f64, lambda_e: f64) {
        if let Some(k) = self.kron.take() {
            self.kron = Some(k.with_heuristic_damping(DampingStyle::Fixed { lambda_a, lambda_e }));
        }
    }

    fn factor_set(&self) -> FactorSet {
        match self.config.kind {
            OptimizerKind::Foof if !self.config.foof_lambda_a_from_kfac => FactorSet::InputsOnly,
            _ => FactorSet::Both,
        }
    }

    /// Accumulate Kronecker factors from one batch without taking a step
    /// (the warm-start phase). A no-op for optimizers without factor state.
    pub fn warmup_update(&mut self, net: &NetworkState, inputs: &Array2<f64>) -> Result<()> {
        if self.kron.is_none() {
            return Ok(());
        }
        let seed = derive_seed(self.run_seed, 0x77a5, self.warmup_index);
        self.warmup_index += 1;
        self.accumulate_factors(net, inputs, seed)
    }

    fn accumulate_factors(
        &mut self,
        net: &NetworkState,
        inputs: &Array2<f64>,
        seed: u64,
    ) -> Result<()> {
        let set = self.factor_set();
        match (set, self.config.fisher) {
            (FactorSet::Both, FisherChoice::Full) => {
                let curv = ImplicitCurvature::build(net, inputs, FisherMode::Full)?;
                let kron = self.kron.as_mut().expect("factor optimizers carry state");
                kron.update_from_curvature(&curv, inputs.ncols())
            }
            _ => {
                let mut trace = net.forward(inputs)?;
                if set == FactorSet::Both {
                    let sample = net.sample_labels(&trace, seed);
                    net.backward_sampled(&mut trace, &sample)?;
                }
                let kron = self.kron.as_mut().expect("factor optimizers carry state");
                kron.update_from_trace(&trace, set)
            }
        }
    }

    /// The batch curvature statistics are estimated on: the previous batch
    /// under the independent pairing (falling back to the current batch on
    /// the first step), the current batch otherwise.
    fn stats_inputs<'a>(&'a self, current: &'a Array2<f64>) -> &'a Array2<f64> {
        match (self.config.policy, &self.prev_inputs) {
            (CurvaturePolicy::IndependentBatch, Some(prev)) => prev,
            _ => current,
        }
    }

    fn adam_direction(&mut self, grads: &[Array2<f64>]) -> Vec<Array2<f64>> {
        let m = self
            .adam_m
            .get_or_insert_with(|| grads.iter().map(|g| Array2::zeros(g.dim())).collect());
        let v = self
            .adam_v
            .get_or_insert_with(|| grads.iter().map(|g| Array2::zeros(g.dim())).collect());
        self.adam_t += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.adam_t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.adam_t as i32);
        grads
            .iter()
            .enumerate()
            .map(|(k, g)| {
                m[k] = &m[k] * ADAM_BETA1 + &(g * (1.0 - ADAM_BETA1));
                v[k] = &v[k] * ADAM_BETA2 + &g.mapv(|x| x * x) * (1.0 - ADAM_BETA2);
                let mhat = &m[k] / bias1;
                let vhat = &v[k] / bias2;
                mhat / (vhat.mapv(f64::sqrt) + ADAM_EPS)
            })
            .collect()
    }

    /// Run one optimization step on `net` with the given batch; returns the
    /// batch metrics and the applied update.
    pub fn step(
        &mut self,
        net: &mut NetworkState,
        inputs: &Array2<f64>,
        targets: &Targets,
    ) -> Result<StepStats> {
        let step_seed = derive_seed(self.run_seed, 0x57e9, self.step_index);
        let mut trace = net.forward(inputs)?;
        let loss = net.loss_mean(trace.logits(), targets)?;
        let accuracy = net.accuracy(trace.logits(), targets);
        let grads = net.backward(&mut trace, targets)?;

        let direction: Vec<Array2<f64>> = match self.config.kind {
            OptimizerKind::Sgd => grads.clone(),
            OptimizerKind::Adam => self.adam_direction(&grads),
            OptimizerKind::NaturalGradient | OptimizerKind::NaturalGradientBlockDiag => {
                let mode = match self.config.fisher {
                    FisherChoice::Mc => FisherMode::Mc { seed: step_seed },
                    FisherChoice::Full => FisherMode::Full,
                };
                let curv = ImplicitCurvature::build(net, self.stats_inputs(inputs), mode)?;
                let u = FlatVector::from_layer_mats(&grads);
                let solved = if self.config.kind == OptimizerKind::NaturalGradient {
                    curv.natural_gradient(&u, self.config.damping)?
                } else {
                    curv.natural_gradient_blockdiag(&u, self.config.damping)?
                };
                solved.to_layer_mats()
            }
            OptimizerKind::KfacHeuristic | OptimizerKind::KfacStandard | OptimizerKind::Foof => {
                let kron = self.kron.as_ref().expect("factor optimizers carry state");
                let sched = kron.schedule_now();
                if sched.accumulate {
                    let stats = self.stats_inputs(inputs).to_owned();
                    self.accumulate_factors(net, &stats, step_seed)?;
                }
                let kron = self.kron.as_mut().expect("factor optimizers carry state");
                if sched.refresh_inverse {
                    match self.config.kind {
                        OptimizerKind::KfacHeuristic => kron.refresh_heuristic()?,
                        OptimizerKind::KfacStandard => kron.refresh_standard()?,
                        OptimizerKind::Foof => kron.refresh_foof()?,
                        _ => unreachable!(),
                    }
                }
                match self.config.kind {
                    OptimizerKind::KfacHeuristic => kron.kfac_update_heuristic(&grads)?,
                    OptimizerKind::KfacStandard => kron.kfac_update_standard(&grads)?,
                    OptimizerKind::Foof => kron.foof_update(&grads)?,
                    _ => unreachable!(),
                }
            }
        };

        // Heavy-ball filtering on the direction, then the decoupled decay.
        let mu = self.config.momentum;
        let buf = self
            .momentum_buf
            .get_or_insert_with(|| self.dims.iter().map(|&d| Array2::zeros(d)).collect());
        let mut update = Vec::with_capacity(direction.len());
        for (k, dir) in direction.iter().enumerate() {
            buf[k] = &buf[k] * mu + dir;
            let mut delta = &buf[k] * (-self.config.lr);
            if self.config.weight_decay > 0.0 {
                delta = delta - &net.layers[k] * (self.config.lr * self.config.weight_decay);
            }
            net.layers[k] += &delta;
            update.push(delta);
        }

        if let Some(kron) = self.kron.as_mut() {
            kron.advance();
        }
        if self.config.policy == CurvaturePolicy::IndependentBatch {
            self.prev_inputs = Some(inputs.to_owned());
        }
        self.step_index += 1;
        Ok(StepStats {
            loss,
            accuracy,
            gradient: grads,
            direction,
            update,
        })
    }
}
