//! Comparison finetuners: direct reward maximization with truncated
//! computation graphs (ReFL-style one-step, DRaFT-K), and adjoint-based
//! matching (full costate ODE and the lean variant).

mod adjoint;
mod direct;

pub use adjoint::{
    adjoint_matching_update, lean_adjoint_solve, pmp_adjoint_solve, AdjointTrajectory,
};
pub use direct::{draft_update, refl_update, UpdateStats};

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::align::RoundRecord;
use crate::error::{Error, Result};
use crate::flow::{collect_trajectories, ResidualVelocity, SamplerConfig, TapeVelocity};
use crate::nets::{Activation, FinalInit, Mlp, MlpSpec};
use crate::numcore::{AdamWConfig, OptState, Rng};
use crate::rewards::RewardSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Refl,
    Draft,
    PmpAdjoint,
    LeanAdjoint,
}

impl BaselineKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineKind::Refl => "refl",
            BaselineKind::Draft => "draft",
            BaselineKind::PmpAdjoint => "pmp_adjoint",
            BaselineKind::LeanAdjoint => "lean_adjoint",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    /// Truncated backprop length for DRaFT.
    pub k: usize,
    /// Truncation step range `[lo, hi)` for ReFL.
    pub refl_range: (usize, usize),
    /// Reward temperature β = 1/λ.
    pub beta: f64,
    pub lr: f64,
    pub n_rounds: usize,
    pub traj_per_round: usize,
    /// Transition subsampling bins for the adjoint matching loss.
    pub bins: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub fd_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub residual_hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            kind: BaselineKind::Refl,
            k: 5,
            refl_range: (15, 20),
            beta: 1.0,
            lr: 1e-3,
            n_rounds: 400,
            traj_per_round: 32,
            bins: 5,
            sampler: SamplerConfig::default(),
            seed: 0,
            fd_eps: 1e-3,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            residual_hidden: alloc::vec![64, 64],
            time_embed_dim: 8,
            activation: Activation::Silu,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvalidConfig { detail });
        let n = self.sampler.n_steps;
        self.sampler.validate()?;
        match self.kind {
            BaselineKind::Draft => {
                if self.k < 1 || self.k > n {
                    return bad(format!("draft K {} outside 1..={n}", self.k));
                }
                if self.sampler.integrator != crate::flow::Integrator::Euler {
                    return bad("draft backprop unrolls Euler steps; use the euler integrator".into());
                }
            }
            BaselineKind::Refl => {
                let (lo, hi) = self.refl_range;
                if lo >= hi || hi > n {
                    return bad(format!("refl range [{lo}, {hi}) outside [0, {n})"));
                }
            }
            BaselineKind::PmpAdjoint | BaselineKind::LeanAdjoint => {
                if self.beta <= 0.0 {
                    return bad("adjoint baselines need beta > 0".into());
                }
                if self.bins < 1 || self.bins > n {
                    return Err(Error::BinsExceedSteps {
                        bins: self.bins,
                        n_steps: n,
                    });
                }
            }
        }
        if self.traj_per_round == 0 {
            return bad("traj_per_round must be >= 1".into());
        }
        if self.grad_clip <= 0.0 || self.fd_eps <= 0.0 {
            return bad("grad_clip and fd_eps must be positive".into());
        }
        Ok(())
    }

    fn residual_spec(&self, d: usize) -> MlpSpec {
        MlpSpec {
            input_dim: d,
            time_embed_dim: self.time_embed_dim,
            hidden: self.residual_hidden.clone(),
            activation: self.activation,
            output_dim: d,
            final_init: FinalInit::Tiny,
        }
    }
}

pub struct BaselineResult {
    pub residual: Mlp,
    pub log: Vec<RoundRecord>,
}

/// Round-based trainer shared by all baseline kinds. Emits the same
/// metric-log schema as the value-gradient trainer; the consistency and
/// boundary columns are zero since these methods have no value model.
pub struct BaselineTrainer {
    cfg: BaselineConfig,
    base: Box<dyn TapeVelocity>,
    reward: RewardSpec,
    residual: Mlp,
    opt: OptState,
    rng: Rng,
    round: usize,
    log: Vec<RoundRecord>,
}

impl BaselineTrainer {
    pub fn new(
        cfg: BaselineConfig,
        base: Box<dyn TapeVelocity>,
        reward: RewardSpec,
    ) -> Result<Self> {
        cfg.validate()?;
        reward.validate()?;
        let d = base.dim();
        if let Some(rd) = reward.dim() {
            if rd != d {
                return Err(Error::ShapeMismatch {
                    context: "BaselineTrainer",
                    detail: format!("reward dim {rd} vs field dim {d}"),
                });
            }
        }
        let root = Rng::new(cfg.seed);
        let residual = Mlp::init(cfg.residual_spec(d), &mut root.split("init.residual"))?;
        let opt = OptState::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let rng = root.split("train");
        Ok(BaselineTrainer {
            cfg,
            base,
            reward,
            residual,
            opt,
            rng,
            round: 0,
            log: Vec::new(),
        })
    }

    pub fn cfg(&self) -> &BaselineConfig {
        &self.cfg
    }

    pub fn residual(&self) -> &Mlp {
        &self.residual
    }

    pub fn log(&self) -> &[RoundRecord] {
        &self.log
    }

    pub fn velocity(&self) -> ResidualVelocity<'_, dyn TapeVelocity> {
        ResidualVelocity::new(&*self.base, &self.residual)
    }

    pub fn step_round(&mut self) -> Result<RoundRecord> {
        let round = self.round;
        let stats = match self.cfg.kind {
            BaselineKind::Refl => refl_update(
                &mut self.residual,
                &*self.base,
                &self.reward,
                self.cfg.refl_range,
                &self.cfg.sampler,
                self.cfg.traj_per_round,
                &mut self.rng,
                &mut self.opt,
                self.cfg.grad_clip,
            )?,
            BaselineKind::Draft => draft_update(
                &mut self.residual,
                &*self.base,
                &self.reward,
                self.cfg.k,
                &self.cfg.sampler,
                self.cfg.traj_per_round,
                &mut self.rng,
                &mut self.opt,
                self.cfg.grad_clip,
            )?,
            BaselineKind::PmpAdjoint | BaselineKind::LeanAdjoint => {
                self.adjoint_round()?
            }
        };
        let record = RoundRecord {
            round,
            mean_reward: stats.mean_reward,
            loss_matching: stats.loss,
            loss_consistency: 0.0,
            loss_boundary: 0.0,
            grad_norm_theta: stats.grad_norm,
            grad_norm_phi: 0.0,
        };
        self.log.push(record.clone());
        self.round += 1;
        Ok(record)
    }

    fn adjoint_round(&mut self) -> Result<UpdateStats> {
        let d = self.base.dim();
        let x0s: Vec<Vec<f64>> = (0..self.cfg.traj_per_round)
            .map(|_| self.rng.normal_vec(d))
            .collect();
        let v_theta = ResidualVelocity::new(&*self.base, &self.residual);
        let trajs = collect_trajectories(&v_theta, &x0s, &self.cfg.sampler)?;
        let mut mean_reward = 0.0;
        for traj in &trajs {
            mean_reward += self.reward.eval(traj.terminal())?;
        }
        mean_reward /= trajs.len() as f64;
        let lambda = 1.0 / self.cfg.beta;
        let mut adjoints = Vec::with_capacity(trajs.len());
        for traj in trajs {
            let adj = match self.cfg.kind {
                BaselineKind::PmpAdjoint => pmp_adjoint_solve(
                    traj,
                    &v_theta,
                    &*self.base,
                    &self.reward,
                    lambda,
                    self.cfg.fd_eps,
                )?,
                _ => lean_adjoint_solve(traj, &*self.base, &self.reward, self.cfg.fd_eps)?,
            };
            adjoints.push(adj);
        }
        let (loss, grad_norm) = adjoint_matching_update(
            &mut self.residual,
            &adjoints,
            self.cfg.beta,
            self.cfg.bins,
            &mut self.rng,
            &mut self.opt,
            self.cfg.grad_clip,
        )?;
        Ok(UpdateStats {
            loss,
            grad_norm,
            mean_reward,
        })
    }

    pub fn run(&mut self, rounds: usize) -> Result<()> {
        for _ in 0..rounds {
            self.step_round()?;
        }
        Ok(())
    }

    pub fn into_result(self) -> BaselineResult {
        BaselineResult {
            residual: self.residual,
            log: self.log,
        }
    }
}

/// Runs the configured baseline to completion.
pub fn baseline_train(
    cfg: BaselineConfig,
    base: Box<dyn TapeVelocity>,
    reward: RewardSpec,
) -> Result<BaselineResult> {
    let rounds = cfg.n_rounds;
    let mut trainer = BaselineTrainer::new(cfg, base, reward)?;
    trainer.run(rounds)?;
    Ok(trainer.into_result())
}
