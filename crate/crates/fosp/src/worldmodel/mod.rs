//! Recurrent state-space world model: deterministic recurrent state plus
//! discrete stochastic latents, with observation, reward, and cost decoders.
//! Computes the KL-balanced model loss and generates imagined rollouts.

use crate::approx::{
    collect_grad, register_params, Activation, ApproximatorSpec, GruCell, LayoutBuilder, Mlp,
    OutputHead, ParameterVector, PvVars, Tape, Var,
};
use crate::datastore::Batch;
use crate::{FospError, Result};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Copy, Debug)]
pub struct WorldModelConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub deter_dim: usize,
    pub n_latents: usize,
    pub latent_classes: usize,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub kl_beta: f64,
    pub free_bits: f64,
}

impl WorldModelConfig {
    pub fn latent_dim(&self) -> usize {
        self.n_latents * self.latent_classes
    }

    pub fn state_dim(&self) -> usize {
        self.deter_dim + self.latent_dim()
    }
}

/// Batched model state: rows are batch elements.
#[derive(Clone, Debug)]
pub struct StateBatch {
    pub h: Array2<f64>,
    /// One-hot sample blocks, `[B, n_latents * latent_classes]`.
    pub z: Array2<f64>,
    pub logits: Array2<f64>,
}

impl StateBatch {
    pub fn zeros(rows: usize, cfg: &WorldModelConfig) -> StateBatch {
        StateBatch {
            h: Array2::zeros((rows, cfg.deter_dim)),
            z: Array2::zeros((rows, cfg.latent_dim())),
            logits: Array2::zeros((rows, cfg.latent_dim())),
        }
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    /// Model feature `s = concat(h, z)`.
    pub fn feature(&self) -> Array2<f64> {
        let (b, dh) = self.h.dim();
        let dz = self.z.ncols();
        let mut f = Array2::zeros((b, dh + dz));
        f.slice_mut(s![.., ..dh]).assign(&self.h);
        f.slice_mut(s![.., dh..]).assign(&self.z);
        f
    }

    pub fn row(&self, idx: usize) -> StateBatch {
        StateBatch {
            h: self.h.slice(s![idx..idx + 1, ..]).to_owned(),
            z: self.z.slice(s![idx..idx + 1, ..]).to_owned(),
            logits: self.logits.slice(s![idx..idx + 1, ..]).to_owned(),
        }
    }

    /// Stacks states (by rows) into one batch.
    pub fn stack(states: &[StateBatch]) -> StateBatch {
        let rows: usize = states.iter().map(|s| s.rows()).sum();
        let mut out = StateBatch {
            h: Array2::zeros((rows, states[0].h.ncols())),
            z: Array2::zeros((rows, states[0].z.ncols())),
            logits: Array2::zeros((rows, states[0].logits.ncols())),
        };
        let mut at = 0;
        for st in states {
            let n = st.rows();
            out.h.slice_mut(s![at..at + n, ..]).assign(&st.h);
            out.z.slice_mut(s![at..at + n, ..]).assign(&st.z);
            out.logits.slice_mut(s![at..at + n, ..]).assign(&st.logits);
            at += n;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSampling {
    /// Draw the one-hot sample from the categorical distribution.
    Sampled,
    /// Deterministic argmax (zero-temperature) latents.
    Mode,
}

/// Head predictions decoded from a model state.
#[derive(Clone, Debug)]
pub struct WorldModelOutputs {
    pub obs_mean: Array2<f64>,
    pub reward_mean: Vec<f64>,
    pub cost_logit: Vec<f64>,
}

/// Imagined on-policy rollout, generated entirely through the prior.
/// `states` has H+1 entries (index 0 = start states); `actions[h]` is taken
/// from `states[h]`; `rewards[h]`/`costs[h]` are decoded at `states[h+1]`
/// (arrival convention). Costs are Bernoulli probabilities in [0,1].
#[derive(Clone, Debug)]
pub struct ImaginedRollout {
    pub states: Vec<StateBatch>,
    pub actions: Vec<Array2<f64>>,
    pub rewards: Vec<Vec<f64>>,
    pub costs: Vec<Vec<f64>>,
    pub log_probs: Vec<Vec<f64>>,
    pub entropies: Vec<Vec<f64>>,
}

impl ImaginedRollout {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn batch(&self) -> usize {
        self.states[0].rows()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelLossReport {
    pub total: f64,
    /// Per-step means; the KL components are raw values before the
    /// free-bits floor, so both KL terms agree in value.
    pub obs_nll: f64,
    pub reward_nll: f64,
    pub cost_nll: f64,
    pub kl_dyn: f64,
    pub kl_rep: f64,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: WorldModelConfig,
    gru: GruCell,
    posterior: Mlp,
    prior: Mlp,
    dec_obs: Mlp,
    dec_reward: Mlp,
    dec_cost: Mlp,
}

impl WorldModel {
    /// Declares all submodel segments under `prefix` on the shared layout.
    pub fn new(cfg: WorldModelConfig, prefix: &str, builder: &mut LayoutBuilder) -> Result<WorldModel> {
        let mlp = |i: usize, o: usize| {
            ApproximatorSpec::new(i, o, cfg.hidden_layers, cfg.hidden_units)
                .with_activation(Activation::Silu)
        };
        let gru = GruCell::new(
            cfg.latent_dim() + cfg.act_dim,
            cfg.deter_dim,
            &format!("{prefix}/gru"),
            builder,
        );
        let posterior = Mlp::new(
            mlp(cfg.deter_dim + cfg.obs_dim, cfg.latent_dim()).with_head(OutputHead::Logits),
            &format!("{prefix}/post"),
            builder,
        )?;
        let prior = Mlp::new(
            mlp(cfg.deter_dim, cfg.latent_dim()).with_head(OutputHead::Logits),
            &format!("{prefix}/prior"),
            builder,
        )?;
        let dec_obs = Mlp::new(mlp(cfg.state_dim(), cfg.obs_dim), &format!("{prefix}/dec_obs"), builder)?;
        let dec_reward = Mlp::new(mlp(cfg.state_dim(), 1), &format!("{prefix}/dec_reward"), builder)?;
        let dec_cost = Mlp::new(mlp(cfg.state_dim(), 1), &format!("{prefix}/dec_cost"), builder)?;
        Ok(WorldModel {
            cfg,
            gru,
            posterior,
            prior,
            dec_obs,
            dec_reward,
            dec_cost,
        })
    }

    pub fn init(&self, pv: &mut ParameterVector, rng: &mut impl Rng) {
        self.gru.init(pv, rng);
        self.posterior.init(pv, rng);
        self.prior.init(pv, rng);
        self.dec_obs.init(pv, rng);
        self.dec_reward.init(pv, rng);
        self.dec_cost.init(pv, rng);
    }

    /// Deterministic recurrent step `h_t = f(z_{t-1}, h_{t-1}, a_{t-1})`.
    pub fn sequence_step(
        &self,
        pv: &ParameterVector,
        prev: &StateBatch,
        action: &Array2<f64>,
    ) -> Array2<f64> {
        let b = prev.rows();
        let mut input = Array2::zeros((b, self.cfg.latent_dim() + self.cfg.act_dim));
        input.slice_mut(s![.., ..self.cfg.latent_dim()]).assign(&prev.z);
        input.slice_mut(s![.., self.cfg.latent_dim()..]).assign(action);
        self.gru.forward(pv, input.view(), prev.h.view())
    }

    /// Posterior logits `q(z_t | h_t, x_t)`.
    pub fn posterior_logits(&self, pv: &ParameterVector, h: &Array2<f64>, obs: &Array2<f64>) -> Array2<f64> {
        let b = h.nrows();
        let mut input = Array2::zeros((b, self.cfg.deter_dim + self.cfg.obs_dim));
        input.slice_mut(s![.., ..self.cfg.deter_dim]).assign(h);
        input.slice_mut(s![.., self.cfg.deter_dim..]).assign(obs);
        self.posterior.forward(pv, input.view())
    }

    /// Prior logits `p(z_t | h_t)`.
    pub fn prior_logits(&self, pv: &ParameterVector, h: &Array2<f64>) -> Array2<f64> {
        self.prior.forward(pv, h.view())
    }

    /// One-hot sample per latent; straight-through handling lives on the
    /// tape path, this is the value-level sampler shared by both paths.
    pub fn sample_latent(
        &self,
        logits: &Array2<f64>,
        rng: &mut ChaCha8Rng,
        sampling: LatentSampling,
    ) -> Array2<f64> {
        sample_onehot_grouped(logits, self.cfg.latent_classes, rng, sampling)
    }

    pub fn decode(&self, pv: &ParameterVector, feature: &Array2<f64>) -> WorldModelOutputs {
        let obs_mean = self.dec_obs.forward(pv, feature.view());
        let reward_mean = self.dec_reward.forward(pv, feature.view()).column(0).to_vec();
        let cost_logit = self.dec_cost.forward(pv, feature.view()).column(0).to_vec();
        WorldModelOutputs {
            obs_mean,
            reward_mean,
            cost_logit,
        }
    }

    /// Bernoulli cost probability at the given features.
    pub fn cost_probability(&self, pv: &ParameterVector, feature: &Array2<f64>) -> Vec<f64> {
        self.dec_cost
            .forward(pv, feature.view())
            .column(0)
            .iter()
            .map(|&l| sigmoid(l))
            .collect()
    }

    /// Runs the posterior over a batch segment; `h` (and the previous latent
    /// and action) are reset to zero wherever `is_first` is set.
    pub fn observe_sequence(
        &self,
        pv: &ParameterVector,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
        sampling: LatentSampling,
    ) -> Vec<StateBatch> {
        let (b, t_len, _) = batch.observations.dim();
        let mut states = Vec::with_capacity(t_len);
        let mut prev = StateBatch::zeros(b, &self.cfg);
        for t in 0..t_len {
            let mut action = batch.actions.slice(s![.., t, ..]).to_owned();
            for bi in 0..b {
                if batch.is_first[[bi, t]] {
                    prev.h.row_mut(bi).fill(0.0);
                    prev.z.row_mut(bi).fill(0.0);
                    action.row_mut(bi).fill(0.0);
                }
            }
            let h = self.sequence_step(pv, &prev, &action);
            let obs = batch.observations.slice(s![.., t, ..]).to_owned();
            let logits = self.posterior_logits(pv, &h, &obs);
            let z = self.sample_latent(&logits, rng, sampling);
            let state = StateBatch { h, z, logits };
            prev = state.clone();
            states.push(state);
        }
        states
    }

    /// Imagined rollout of `horizon` steps from `starts` through the prior.
    /// `policy` maps state features to (encoded actions, log-probs,
    /// entropies).
    pub fn imagine<F>(
        &self,
        pv: &ParameterVector,
        starts: &StateBatch,
        horizon: usize,
        rng: &mut ChaCha8Rng,
        sampling: LatentSampling,
        mut policy: F,
    ) -> ImaginedRollout
    where
        F: FnMut(&Array2<f64>, &mut ChaCha8Rng) -> (Array2<f64>, Vec<f64>, Vec<f64>),
    {
        let mut rollout = ImaginedRollout {
            states: vec![starts.clone()],
            actions: Vec::new(),
            rewards: Vec::new(),
            costs: Vec::new(),
            log_probs: Vec::new(),
            entropies: Vec::new(),
        };
        let mut current = starts.clone();
        for _ in 0..horizon {
            let feature = current.feature();
            let (action, logp, ent) = policy(&feature, rng);
            let h = self.sequence_step(pv, &current, &action);
            let logits = self.prior_logits(pv, &h);
            let z = self.sample_latent(&logits, rng, sampling);
            let next = StateBatch { h, z, logits };
            let nf = next.feature();
            let reward = self.dec_reward.forward(pv, nf.view()).column(0).to_vec();
            let cost: Vec<f64> = self
                .dec_cost
                .forward(pv, nf.view())
                .column(0)
                .iter()
                .map(|&l| sigmoid(l))
                .collect();
            rollout.actions.push(action);
            rollout.rewards.push(reward);
            rollout.costs.push(cost);
            rollout.log_probs.push(logp);
            rollout.entropies.push(ent);
            rollout.states.push(next.clone());
            current = next;
        }
        rollout
    }

    /// Model loss with gradient. Also returns the posterior states of the
    /// forward pass (detached) so downstream losses reuse them.
    pub fn model_loss(
        &self,
        params: &ParameterVector,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
        sampling: LatentSampling,
    ) -> Result<(ModelLossReport, ParameterVector, Vec<StateBatch>)> {
        let (tape, vars, loss_var, report, states) =
            self.build_loss_tape(params, batch, rng, sampling)?;
        let grads = tape.backward(loss_var);
        let grad = collect_grad(&tape, &grads, params, &vars);
        if !grad.all_finite() {
            return Err(FospError::non_finite("model_loss", "gradient"));
        }
        Ok((report, grad, states))
    }

    /// Loss value only (used by audits; `Mode` sampling keeps it a
    /// deterministic function of the parameters).
    pub fn model_loss_value(
        &self,
        params: &ParameterVector,
        batch: &Batch,
        sampling: LatentSampling,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, _, report, _) = self
            .build_loss_tape(params, batch, &mut rng, sampling)
            .expect("loss tape");
        report.total
    }

    #[allow(clippy::type_complexity)]
    fn build_loss_tape(
        &self,
        params: &ParameterVector,
        batch: &Batch,
        rng: &mut ChaCha8Rng,
        sampling: LatentSampling,
    ) -> Result<(Tape, PvVars, Var, ModelLossReport, Vec<StateBatch>)> {
        let (b, t_len, obs_dim) = batch.observations.dim();
        if obs_dim != self.cfg.obs_dim {
            return Err(FospError::shape(
                "model_loss",
                format!("obs_dim {}", self.cfg.obs_dim),
                format!("{obs_dim}"),
            ));
        }
        let classes = self.cfg.latent_classes;
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, params);

        let mut h_prev = tape.constant(Array2::zeros((b, self.cfg.deter_dim)));
        let mut z_prev = tape.constant(Array2::zeros((b, self.cfg.latent_dim())));
        let mut total: Option<Var> = None;
        let mut sum_obs = 0.0;
        let mut sum_reward = 0.0;
        let mut sum_cost = 0.0;
        let mut sum_kl = 0.0;
        let mut states = Vec::with_capacity(t_len);

        for t in 0..t_len {
            let mut action = batch.actions.slice(s![.., t, ..]).to_owned();
            let mut reset_rows = Vec::new();
            for bi in 0..b {
                if batch.is_first[[bi, t]] {
                    reset_rows.push(bi);
                    action.row_mut(bi).fill(0.0);
                }
            }
            if !reset_rows.is_empty() && t > 0 {
                let mut hm = Array2::from_elem((b, self.cfg.deter_dim), 1.0);
                let mut zm = Array2::from_elem((b, self.cfg.latent_dim()), 1.0);
                for &bi in &reset_rows {
                    hm.row_mut(bi).fill(0.0);
                    zm.row_mut(bi).fill(0.0);
                }
                let hmask = tape.constant(hm);
                let zmask = tape.constant(zm);
                h_prev = tape.mul(h_prev, hmask);
                z_prev = tape.mul(z_prev, zmask);
            }

            let a = tape.constant(action);
            let gru_in = tape.concat_cols(z_prev, a);
            let h = self.gru.apply(&mut tape, &vars, gru_in, h_prev);

            let obs = tape.constant(batch.observations.slice(s![.., t, ..]).to_owned());
            let post_in = tape.concat_cols(h, obs);
            let q_logits = self.posterior.apply(&mut tape, &vars, post_in);
            let p_logits = self.prior.apply(&mut tape, &vars, h);

            // Straight-through sample from the posterior.
            let q_probs = tape.grouped_softmax(q_logits, classes);
            let hard = sample_onehot_grouped(tape.value(q_probs), classes, rng, sampling);
            let z = tape.straight_through(q_probs, &hard);

            let s_t = tape.concat_cols(h, z);

            // Reconstruction terms: unit-variance Gaussian heads for
            // observation and reward, Bernoulli head for cost.
            let obs_hat = self.dec_obs.apply(&mut tape, &vars, s_t);
            let diff = tape.sub(obs_hat, obs);
            let sq = tape.square(diff);
            let half_sq = tape.sum_cols(sq);
            let half_sq = tape.scale(half_sq, 0.5);
            let obs_nll = tape.add_scalar(half_sq, 0.5 * obs_dim as f64 * LN_2PI);

            let reward_hat = self.dec_reward.apply(&mut tape, &vars, s_t);
            let r = tape.constant(column(&batch.rewards, t, b));
            let rdiff = tape.sub(reward_hat, r);
            let rsq = tape.square(rdiff);
            let rhalf = tape.scale(rsq, 0.5);
            let reward_nll = tape.add_scalar(rhalf, 0.5 * LN_2PI);

            let cost_logit = self.dec_cost.apply(&mut tape, &vars, s_t);
            let sp = tape.softplus(cost_logit);
            let c = tape.constant(column(&batch.costs, t, b));
            let cl = tape.mul(c, cost_logit);
            let cost_nll = tape.sub(sp, cl);

            // KL terms: same value, different gradient routing.
            let q_sg = tape.stop_grad(q_logits);
            let kl_dyn = categorical_kl(&mut tape, q_sg, p_logits, classes);
            let p_sg = tape.stop_grad(p_logits);
            let kl_rep = categorical_kl(&mut tape, q_logits, p_sg, classes);

            sum_obs += tape.value(obs_nll).sum();
            sum_reward += tape.value(reward_nll).sum();
            sum_cost += tape.value(cost_nll).sum();
            sum_kl += tape.value(kl_dyn).sum();

            let kl_dyn_fl = tape.max_const(kl_dyn, self.cfg.free_bits);
            let kl_rep_fl = tape.max_const(kl_rep, self.cfg.free_bits);
            let kl_rep_scaled = tape.scale(kl_rep_fl, self.cfg.kl_beta);

            let mut step = tape.add(obs_nll, reward_nll);
            step = tape.add(step, cost_nll);
            step = tape.add(step, kl_dyn_fl);
            step = tape.add(step, kl_rep_scaled);
            let step_sum = tape.sum_all(step);
            total = Some(match total {
                Some(acc) => tape.add(acc, step_sum),
                None => step_sum,
            });

            states.push(StateBatch {
                h: tape.value(h).clone(),
                z: tape.value(z).clone(),
                logits: tape.value(q_logits).clone(),
            });
            h_prev = h;
            z_prev = z;
        }

        let total = total.expect("non-empty segment");
        let loss = tape.scale(total, 1.0 / b as f64);
        let n = (b * t_len) as f64;
        let report = ModelLossReport {
            total: tape.scalar(loss),
            obs_nll: sum_obs / n,
            reward_nll: sum_reward / n,
            cost_nll: sum_cost / n,
            kl_dyn: sum_kl / n,
            kl_rep: sum_kl / n,
        };
        if !report.total.is_finite() {
            return Err(FospError::non_finite(
                "model_loss",
                format!(
                    "obs_nll={} reward_nll={} cost_nll={} kl={}",
                    report.obs_nll, report.reward_nll, report.cost_nll, report.kl_dyn
                ),
            ));
        }
        Ok((tape, vars, loss, report, states))
    }
}

fn column(m: &Array2<f64>, t: usize, b: usize) -> Array2<f64> {
    let mut out = Array2::zeros((b, 1));
    for bi in 0..b {
        out[[bi, 0]] = m[[bi, t]];
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// KL(q || p) per row, summed over latent groups, from logits.
fn categorical_kl(tape: &mut Tape, q_logits: Var, p_logits: Var, classes: usize) -> Var {
    let q = tape.grouped_softmax(q_logits, classes);
    let logq = tape.grouped_log_softmax(q_logits, classes);
    let logp = tape.grouped_log_softmax(p_logits, classes);
    let diff = tape.sub(logq, logp);
    let prod = tape.mul(q, diff);
    tape.sum_cols(prod)
}

/// Samples one one-hot block per latent group from row-block probabilities.
pub fn sample_onehot_grouped(
    probs: &Array2<f64>,
    classes: usize,
    rng: &mut ChaCha8Rng,
    sampling: LatentSampling,
) -> Array2<f64> {
    let (rows, cols) = probs.dim();
    let groups = cols / classes;
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for g in 0..groups {
            let lo = g * classes;
            let pick = match sampling {
                LatentSampling::Mode => {
                    let mut best = lo;
                    for c in lo..lo + classes {
                        if probs[[r, c]] > probs[[r, best]] {
                            best = c;
                        }
                    }
                    best
                }
                LatentSampling::Sampled => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = lo + classes - 1;
                    for c in lo..lo + classes {
                        acc += probs[[r, c]];
                        if u < acc {
                            pick = c;
                            break;
                        }
                    }
                    pick
                }
            };
            out[[r, pick]] = 1.0;
        }
    }
    out
}
