//! Rollouts, advantage estimation and the PPO / GRPO updates.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::diffcore::{Adam, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaze::{predict_gaze, GazeTable, TokenClassMap};
use crate::models::{GenerateConfig, PolicyModel, RewardModel, Sampling};
use crate::rewardlab::{
    distribute_reward_with_temperature, shape_with_kl, sparse_reward_vector, RewardLayout, TokenRewardVector,
};

/// How the sequence reward reaches the policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Sparse,
    GazeRm,
    GazeDistrib,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Sparse, Scheme::GazeRm, Scheme::GazeDistrib];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Sparse => "sparse",
            Scheme::GazeRm => "gaze_rm",
            Scheme::GazeDistrib => "gaze_distrib",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown scheme '{s}' (sparse, gaze_rm, gaze_distrib)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ppo,
    Grpo,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Ppo => "ppo",
            Algorithm::Grpo => "grpo",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(Algorithm::Ppo),
            "grpo" => Ok(Algorithm::Grpo),
            _ => Err(Error::config(format!("unknown algorithm '{s}' (ppo, grpo)"))),
        }
    }
}

/// One sampled response with everything the updates need.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    /// Acting-policy log-probability of each response token.
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    /// Reward model output for the sequence.
    pub score: f64,
    /// Scheme reward before KL shaping.
    pub raw_rewards: TokenRewardVector,
    /// KL-shaped rewards consumed by PPO.
    pub rewards: TokenRewardVector,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.response.is_empty()
    }

    /// `sum(logpi - logpi_ref)` over the response.
    pub fn kl(&self) -> f64 {
        self.logprobs.iter().zip(&self.ref_logprobs).map(|(p, q)| p - q).sum()
    }

    pub fn tokens(&self) -> Vec<usize> {
        [&self.prompt[..], &self.response[..]].concat()
    }
}

/// What turns a response into per-token rewards.
pub struct RewardSource<'a> {
    pub scheme: Scheme,
    pub reward_model: &'a RewardModel,
    pub gaze_table: Option<&'a GazeTable>,
    pub classes: &'a TokenClassMap,
    /// Softmax temperature of the gaze distribution.
    pub temperature: f64,
    /// KL coefficient used for shaping.
    pub beta: f64,
    /// Subtract the batch mean score before spreading it over tokens.
    pub center_scores: bool,
}

impl RewardSource<'_> {
    pub fn validate(&self) -> Result<()> {
        match (self.scheme, self.reward_model.gaze_mode(), self.gaze_table) {
            (Scheme::GazeRm, None, _) => Err(Error::config("scheme gaze_rm needs a gaze-augmented reward model")),
            (Scheme::GazeRm, Some(_), None) => Err(Error::config("scheme gaze_rm needs a gaze table for its inputs")),
            (Scheme::Sparse | Scheme::GazeDistrib, Some(m), _) => Err(Error::config(format!(
                "scheme {} takes a gaze-free reward model, got one with {m} projection",
                self.scheme
            ))),
            (Scheme::GazeDistrib, None, None) => Err(Error::config("scheme gaze_distrib needs a gaze table")),
            _ => Ok(()),
        }
    }

    /// Reward-model score of `prompt ++ response` and the pre-KL token rewards.
    pub fn reward(&self, prompt: &[usize], response: &[usize], rng: &mut dyn rand::RngCore) -> Result<(f64, TokenRewardVector)> {
        let (s, trt) = self.score(prompt, response, rng)?;
        Ok((s, self.token_rewards(s, trt.as_deref(), response.len())?))
    }

    /// Sequence score, plus the response's TRT values under `gaze_distrib`.
    pub fn score(&self, prompt: &[usize], response: &[usize], rng: &mut dyn rand::RngCore) -> Result<(f64, Option<Vec<f64>>)> {
        let tokens = [prompt, response].concat();
        match self.scheme {
            Scheme::Sparse => Ok((self.reward_model.score(&tokens, None)?, None)),
            Scheme::GazeRm => {
                let table = self.gaze_table.expect("validated");
                let gaze = predict_gaze(table, self.classes, &tokens, Some(rng))?;
                Ok((self.reward_model.score(&tokens, Some(&gaze))?, None))
            }
            Scheme::GazeDistrib => {
                let s = self.reward_model.score(&tokens, None)?;
                let table = self.gaze_table.expect("validated");
                let trt = predict_gaze(table, self.classes, response, Some(rng))?.iter().map(|g| g.trt).collect();
                Ok((s, Some(trt)))
            }
        }
    }

    /// Spreads `reward` over `n` response tokens as the scheme prescribes.
    pub fn token_rewards(&self, reward: f64, trt: Option<&[f64]>, n: usize) -> Result<TokenRewardVector> {
        match (self.scheme, trt) {
            (Scheme::GazeDistrib, Some(trt)) => distribute_reward_with_temperature(reward, trt, self.temperature),
            (Scheme::GazeDistrib, None) => Err(Error::usage("gaze_distrib needs TRT values")),
            _ => sparse_reward_vector(reward, n),
        }
    }
}

/// Records the policy pass over `prompt ++ response` and returns the rows that
/// predict response tokens: `([n, V]` log-probs, `[n]` chosen-token log-probs, `[n]` values).
pub fn response_graph(policy: &PolicyModel, g: &mut Graph<'_>, prompt: &[usize], response: &[usize]) -> Result<(Var, Var, Var)> {
    if prompt.is_empty() || response.is_empty() {
        return Err(Error::usage("rollout needs a nonempty prompt and response"));
    }
    let tokens = [prompt, response].concat();
    let (lp, values) = policy.forward_graph(g, &tokens)?;
    let rows: Vec<usize> = (prompt.len() - 1..tokens.len() - 1).collect();
    let lp_rows = g.select_rows(lp, &rows)?;
    let picked = g.gather(lp_rows, response)?;
    let v = g.reshape(values, &[tokens.len(), 1])?;
    let v = g.select_rows(v, &rows)?;
    let v = g.reshape(v, &[response.len()])?;
    Ok((lp_rows, picked, v))
}

/// Per-token log-probabilities and values of `response` given `prompt`.
pub fn response_logprobs(policy: &PolicyModel, prompt: &[usize], response: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::with_params(policy.params());
    let (_, lp, v) = response_graph(policy, &mut g, prompt, response)?;
    Ok((g.value(lp).to_vec(), g.value(v).to_vec()))
}

/// Samples one response per prompt at temperature 1 and scores it.
pub fn collect_rollouts<R: Rng + ?Sized>(
    policy: &PolicyModel,
    reference: &PolicyModel,
    prompts: &[Vec<usize>],
    source: &RewardSource<'_>,
    generation: &GenerateConfig,
    rng: &mut R,
) -> Result<Vec<Rollout>> {
    source.validate()?;
    let mut scored = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let full = policy.generate(prompt, generation, rng)?;
        let response = full[prompt.len()..].to_vec();
        if response.is_empty() {
            return Err(Error::usage("prompt leaves no room for a response"));
        }
        let mut dyn_rng = rand_chacha::ChaCha8Rng::from_rng(&mut &mut *rng);
        let (score, trt) = source.score(prompt, &response, &mut dyn_rng)?;
        scored.push((prompt, response, score, trt));
    }
    let baseline = if source.center_scores {
        scored.iter().map(|s| s.2).sum::<f64>() / scored.len().max(1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(scored.len());
    for (prompt, response, score, trt) in scored {
        let (logprobs, values) = response_logprobs(policy, prompt, &response)?;
        let (ref_logprobs, _) = response_logprobs(reference, prompt, &response)?;
        let raw = source.token_rewards(score - baseline, trt.as_deref(), response.len())?;
        let rewards = shape_with_kl(&raw, &logprobs, &ref_logprobs, source.beta)?;
        out.push(Rollout {
            prompt: prompt.clone(),
            response,
            logprobs,
            values,
            ref_logprobs,
            score,
            raw_rewards: raw,
            rewards,
        });
    }
    Ok(out)
}

/// Generalized advantage estimation with a zero bootstrap after the last token.
pub fn compute_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() {
        return Err(Error::usage("GAE over an empty sequence"));
    }
    if rewards.len() != values.len() {
        return Err(Error::usage(format!(
            "GAE got {} rewards and {} values",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Rescales to mean 0 and (population) standard deviation 1.
pub fn whiten(xs: &mut [f64]) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return;
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-8);
    for x in xs {
        *x = (*x - mean) * inv;
    }
}

/// Clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)` for one token.
pub fn clipped_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub whiten_advantages: bool,
    /// Subtract the batch mean score before token distribution.
    pub center_scores: bool,
    pub grad_clip: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            gamma: 1.0,
            lambda: 0.95,
            beta: 0.05,
            epochs: 2,
            minibatch: 8,
            lr: 3e-4,
            vf_coef: 0.5,
            ent_coef: 0.0,
            whiten_advantages: true,
            center_scores: true,
            grad_clip: 1.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config(format!("ppo.clip must lie in (0, 1), got {}", self.clip)));
        }
        for (name, v) in [("ppo.gamma", self.gamma), ("ppo.lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.beta >= 0.0) || !(self.vf_coef >= 0.0) || !(self.ent_coef >= 0.0) {
            return Err(Error::config("ppo.beta, ppo.vf_coef and ppo.ent_coef must be >= 0"));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::config("ppo.epochs and ppo.minibatch must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("ppo.lr and ppo.grad_clip must be positive"));
        }
        Ok(())
    }
}

/// How GRPO turns a group's reward vectors into token advantages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrpoAdvantage {
    /// Normalise the summed sequence rewards; every token gets its sequence's value.
    Outcome,
    /// Normalise every rewarded position across the group, then sum from each token onward.
    Process,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip: f64,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Groups per optimizer step.
    pub minibatch: usize,
    pub eps: f64,
    /// Divide by `n - 1` rather than `n` in the group standard deviation.
    pub sample_std: bool,
    pub advantage: GrpoAdvantage,
    pub grad_clip: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            clip: 0.2,
            beta: 0.05,
            lr: 3e-4,
            epochs: 2,
            minibatch: 2,
            eps: 1e-8,
            sample_std: true,
            advantage: GrpoAdvantage::Process,
            grad_clip: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config(format!("grpo.group_size must be >= 2, got {}", self.group_size)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config(format!("grpo.clip must lie in (0, 1), got {}", self.clip)));
        }
        if !(self.beta >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::config("grpo.beta must be >= 0 and grpo.eps > 0"));
        }
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::config("grpo.epochs and grpo.minibatch must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("grpo.lr and grpo.grad_clip must be positive"));
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64], sample: bool) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let denom = if sample { n - 1.0 } else { n };
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / denom.max(1.0);
    (mean, var.sqrt())
}

/// `(R_g - mean(R)) / (std(R) + eps)`.
pub fn group_advantages(rewards: &[f64], eps: f64, sample_std: bool) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::usage(format!("group of {} has no spread", rewards.len())));
    }
    let (mean, std) = mean_std(rewards, sample_std);
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps)).collect())
}

/// Token advantages for one group.
pub fn grpo_token_advantages(group: &[&TokenRewardVector], cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>> {
    match cfg.advantage {
        GrpoAdvantage::Outcome => {
            let totals: Vec<f64> = group.iter().map(|v| v.sum()).collect();
            let adv = group_advantages(&totals, cfg.eps, cfg.sample_std)?;
            Ok(group.iter().zip(adv).map(|(v, a)| vec![a; v.len()]).collect())
        }
        GrpoAdvantage::Process => {
            if group.len() < 2 {
                return Err(Error::usage(format!("group of {} has no spread", group.len())));
            }
            let steps = |v: &TokenRewardVector| match v.layout {
                RewardLayout::Terminal => v.len() - 1..v.len(),
                RewardLayout::Dense => 0..v.len(),
            };
            let all: Vec<f64> = group.iter().flat_map(|v| v.rewards[steps(v)].to_vec()).collect();
            let (mean, std) = mean_std(&all, cfg.sample_std);
            Ok(group
                .iter()
                .map(|v| {
                    let mut norm = vec![0.0; v.len()];
                    for i in steps(v) {
                        norm[i] = (v.rewards[i] - mean) / (std + cfg.eps);
                    }
                    let mut acc = 0.0;
                    for x in norm.iter_mut().rev() {
                        acc += *x;
                        *x = acc;
                    }
                    norm
                })
                .collect())
        }
    }
}

/// Summary of one optimisation phase.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    /// Mean reward-model score over the rollouts.
    pub mean_reward: f64,
    /// Mean per-sequence `sum(logpi - logpi_ref)` at collection time.
    pub kl: f64,
    /// Mean total loss over minibatches.
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

fn finish_step(policy: &mut PolicyModel, opt: &mut Adam, grads: &crate::diffcore::Gradients, clip: f64) -> Result<()> {
    let store = policy.params_mut();
    store.zero_grad();
    store.accumulate(grads);
    let norm = store.clip_grad_norm(clip);
    if !norm.is_finite() {
        return Err(Error::Diverged(format!("gradient norm {norm}")));
    }
    opt.step_lenient(store)
}

fn sum_vars(g: &mut Graph<'_>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = g.add(acc, *v)?;
    }
    Ok(acc)
}

/// Per-token `clip(rho) A` surrogate terms for a rollout; returns (surrogate sum, entropy sum, lp rows, new values).
fn surrogate(
    policy: &PolicyModel,
    g: &mut Graph<'_>,
    r: &Rollout,
    advantages: &[f64],
    clip: f64,
    clipped: &mut usize,
) -> Result<(Var, Var, Var, Var)> {
    let n = r.len();
    let (rows, lp, values) = response_graph(policy, g, &r.prompt, &r.response)?;
    let old = g.constant(Tensor::vector(r.logprobs.clone()));
    let adv = g.constant(Tensor::vector(advantages.to_vec()));
    let diff = g.sub(lp, old)?;
    let ratio = g.exp(diff);
    *clipped += g
        .value(ratio)
        .iter()
        .filter(|x| (**x - 1.0).abs() > clip)
        .count();
    let s1 = g.mul(ratio, adv)?;
    let rc = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let s2 = g.mul(rc, adv)?;
    let obj = g.minimum(s1, s2)?;
    let obj = g.sum(obj);
    let p = g.exp(rows);
    let plogp = g.mul(p, rows)?;
    let neg_ent = g.sum(plogp);
    debug_assert_eq!(g.shape(values), &[n]);
    Ok((obj, neg_ent, lp, values))
}

/// Clipped-surrogate PPO with a value loss and an entropy bonus over `rollouts`.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PolicyModel,
    opt: &mut Adam,
    rollouts: &[Rollout],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    cfg.validate()?;
    if rollouts.is_empty() {
        return Err(Error::usage("PPO update without rollouts"));
    }
    let mut advantages = Vec::with_capacity(rollouts.len());
    let mut returns = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        let (a, ret) = compute_gae(&r.rewards.rewards, &r.values, cfg.gamma, cfg.lambda)?;
        advantages.push(a);
        returns.push(ret);
    }
    if cfg.whiten_advantages {
        let mut flat: Vec<f64> = advantages.iter().flatten().copied().collect();
        whiten(&mut flat);
        let mut it = flat.into_iter();
        for a in &mut advantages {
            for x in a.iter_mut() {
                *x = it.next().expect("same length");
            }
        }
    }

    let mut stats = UpdateStats {
        mean_reward: rollouts.iter().map(|r| r.score).sum::<f64>() / rollouts.len() as f64,
        kl: rollouts.iter().map(Rollout::kl).sum::<f64>() / rollouts.len() as f64,
        ..UpdateStats::default()
    };
    let mut order: Vec<usize> = (0..rollouts.len()).collect();
    let (mut batches, mut tokens_seen, mut clipped) = (0usize, 0usize, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.minibatch) {
            let grads = {
                let mut g = Graph::with_params(policy.params());
                let (mut objs, mut ents, mut vls) = (Vec::new(), Vec::new(), Vec::new());
                let mut n_tok = 0;
                for &i in batch {
                    let r = &rollouts[i];
                    let (obj, neg_ent, _, values) = surrogate(policy, &mut g, r, &advantages[i], cfg.clip, &mut clipped)?;
                    let ret = g.constant(Tensor::vector(returns[i].clone()));
                    let err = g.sub(values, ret)?;
                    let sq = g.mul(err, err)?;
                    vls.push(g.sum(sq));
                    objs.push(obj);
                    ents.push(neg_ent);
                    n_tok += r.len();
                }
                let inv = 1.0 / n_tok as f64;
                let obj = sum_vars(&mut g, &objs)?;
                let pg = g.scale(obj, -inv);
                let vl = sum_vars(&mut g, &vls)?;
                let vl = g.scale(vl, 0.5 * inv);
                let neg_ent = sum_vars(&mut g, &ents)?;
                let neg_ent = g.scale(neg_ent, inv);
                let vterm = g.scale(vl, cfg.vf_coef);
                let eterm = g.scale(neg_ent, cfg.ent_coef);
                let loss = g.add(pg, vterm)?;
                let loss = g.add(loss, eterm)?;
                let value = g.item(loss);
                if !value.is_finite() {
                    return Err(Error::Diverged(format!("PPO loss {value}")));
                }
                stats.loss += value;
                stats.policy_loss += g.item(pg);
                stats.value_loss += g.item(vl);
                stats.entropy -= g.item(neg_ent);
                batches += 1;
                tokens_seen += n_tok;
                g.backward(loss)?
            };
            finish_step(policy, opt, &grads, cfg.grad_clip)?;
        }
    }
    let b = batches as f64;
    stats.loss /= b;
    stats.policy_loss /= b;
    stats.value_loss /= b;
    stats.entropy /= b;
    stats.clip_fraction = clipped as f64 / tokens_seen as f64;
    Ok(stats)
}

/// Group-relative update; every group holds rollouts for a single prompt.
/// The KL to the reference enters the loss through the `exp(q - p) - (q - p) - 1` estimator.
pub fn grpo_update<R: Rng + ?Sized>(
    policy: &mut PolicyModel,
    opt: &mut Adam,
    groups: &[Vec<Rollout>],
    cfg: &GrpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::usage("GRPO update without groups"));
    }
    let mut advantages = Vec::with_capacity(groups.len());
    for group in groups {
        if group.len() != cfg.group_size {
            return Err(Error::usage(format!(
                "group of {} rollouts, expected {}",
                group.len(),
                cfg.group_size
            )));
        }
        if group.iter().any(|r| r.prompt != group[0].prompt) {
            return Err(Error::usage("GRPO group mixes prompts"));
        }
        let vecs: Vec<&TokenRewardVector> = group.iter().map(|r| &r.raw_rewards).collect();
        advantages.push(grpo_token_advantages(&vecs, cfg)?);
    }

    let n_roll: usize = groups.iter().map(Vec::len).sum();
    let mut stats = UpdateStats {
        mean_reward: groups.iter().flatten().map(|r| r.score).sum::<f64>() / n_roll as f64,
        kl: groups.iter().flatten().map(Rollout::kl).sum::<f64>() / n_roll as f64,
        ..UpdateStats::default()
    };
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let (mut batches, mut tokens_seen, mut clipped) = (0usize, 0usize, 0usize);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.minibatch) {
            let grads = {
                let mut g = Graph::with_params(policy.params());
                let mut terms = Vec::new();
                let mut ent_terms = Vec::new();
                let mut kls = Vec::new();
                let mut n_seq = 0;
                for &gi in batch {
                    for (r, adv) in groups[gi].iter().zip(&advantages[gi]) {
                        let (obj, neg_ent, lp, _) = surrogate(policy, &mut g, r, adv, cfg.clip, &mut clipped)?;
                        let inv_len = 1.0 / r.len() as f64;
                        terms.push(g.scale(obj, inv_len));
                        ent_terms.push(g.scale(neg_ent, inv_len));
                        let refs = g.constant(Tensor::vector(r.ref_logprobs.clone()));
                        let d = g.sub(refs, lp)?;
                        let e = g.exp(d);
                        let k3 = g.sub(e, d)?;
                        let k3 = g.sum(k3);
                        // the constant -1 per token does not affect gradients
                        kls.push(g.scale(k3, inv_len));
                        n_seq += 1;
                        tokens_seen += r.len();
                    }
                }
                let inv = 1.0 / n_seq as f64;
                let obj = sum_vars(&mut g, &terms)?;
                let pg = g.scale(obj, -inv);
                let kl = sum_vars(&mut g, &kls)?;
                let kl = g.scale(kl, inv * cfg.beta);
                let loss = g.add(pg, kl)?;
                let value = g.item(loss) - cfg.beta;
                if !value.is_finite() {
                    return Err(Error::Diverged(format!("GRPO loss {value}")));
                }
                let neg_ent = sum_vars(&mut g, &ent_terms)?;
                stats.entropy -= g.item(neg_ent) * inv;
                stats.loss += value;
                stats.policy_loss += g.item(pg);
                batches += 1;
                g.backward(loss)?
            };
            finish_step(policy, opt, &grads, cfg.grad_clip)?;
        }
    }
    let b = batches as f64;
    stats.loss /= b;
    stats.policy_loss /= b;
    stats.entropy /= b;
    stats.clip_fraction = clipped as f64 / tokens_seen as f64;
    Ok(stats)
}

/// Ratios `pi / pi_old` of a rollout's response tokens under `policy`.
pub fn ppo_ratios(policy: &PolicyModel, rollout: &Rollout) -> Result<Vec<f64>> {
    let (lp, _) = response_logprobs(policy, &rollout.prompt, &rollout.response)?;
    Ok(lp.iter().zip(&rollout.logprobs).map(|(a, b)| (a - b).exp()).collect())
}

/// Generation settings used for rollouts: temperature 1, stop at `eos`.
pub fn rollout_generation(max_new: usize, eos: usize) -> GenerateConfig {
    GenerateConfig {
        max_new,
        sampling: Sampling::Temperature(1.0),
        eos: Some(eos),
    }
}

#[cfg(test)]
mod tests;
