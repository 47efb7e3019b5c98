//! Reward models, gaze-weighted reward distribution and KL shaping.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::diffcore::{softmax_in_place, Adam, AdamConfig, Graph};
use crate::error::{Error, Result};
use crate::gaze::{predict_gaze, GazeFeatures, GazeTable, TokenClassMap};
use crate::models::{GazeMode, GazeProjectionSpec, ModelDims, ModelIdentity, RewardModel};

/// A prompt with a preferred and a dispreferred response.
///
/// Gaze, when present, covers the whole `prompt ++ response` sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub chosen_gaze: Option<Vec<GazeFeatures>>,
    pub rejected_gaze: Option<Vec<GazeFeatures>>,
}

impl PreferencePair {
    pub fn new(prompt: Vec<usize>, chosen: Vec<usize>, rejected: Vec<usize>) -> Result<Self> {
        if chosen == rejected {
            return Err(Error::usage("chosen and rejected responses are identical"));
        }
        Ok(Self {
            prompt,
            chosen,
            rejected,
            chosen_gaze: None,
            rejected_gaze: None,
        })
    }

    pub fn chosen_sequence(&self) -> Vec<usize> {
        [&self.prompt[..], &self.chosen[..]].concat()
    }

    pub fn rejected_sequence(&self) -> Vec<usize> {
        [&self.prompt[..], &self.rejected[..]].concat()
    }

    pub fn has_gaze(&self) -> bool {
        self.chosen_gaze.is_some() && self.rejected_gaze.is_some()
    }

    /// Fills both gaze fields from `table`.
    pub fn attach_gaze(&mut self, table: &GazeTable, classes: &TokenClassMap, mut rng: Option<&mut dyn RngCore>) -> Result<()> {
        self.chosen_gaze = Some(predict_gaze(table, classes, &self.chosen_sequence(), rng.as_mut().map(|r| &mut **r as &mut dyn RngCore))?);
        self.rejected_gaze = Some(predict_gaze(table, classes, &self.rejected_sequence(), rng)?);
        Ok(())
    }
}

/// Per-token rewards together with the sequence reward they were derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenRewardVector {
    pub rewards: Vec<f64>,
    /// Sequence reward `R`. Equals the sum of `rewards` until KL shaping is applied.
    pub total: f64,
    pub layout: RewardLayout,
}

/// Where the sequence reward was placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardLayout {
    Terminal,
    Dense,
}

impl TokenRewardVector {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Spreads `r` over tokens in proportion to `softmax(trt)`.
pub fn distribute_reward(r: f64, trt: &[f64]) -> Result<TokenRewardVector> {
    distribute_reward_with_temperature(r, trt, 1.0)
}

/// [`distribute_reward`] with weights `softmax(trt / temperature)`.
pub fn distribute_reward_with_temperature(r: f64, trt: &[f64], temperature: f64) -> Result<TokenRewardVector> {
    if trt.is_empty() {
        return Err(Error::usage("cannot distribute a reward over zero tokens"));
    }
    if let Some(bad) = trt.iter().find(|t| !t.is_finite()) {
        return Err(Error::usage(format!("non-finite TRT value {bad}")));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::usage(format!("temperature must be positive, got {temperature}")));
    }
    if !r.is_finite() {
        return Err(Error::Diverged(format!("sequence reward {r}")));
    }
    let mut w: Vec<f64> = trt.iter().map(|t| t / temperature).collect();
    softmax_in_place(&mut w);
    Ok(TokenRewardVector {
        rewards: w.into_iter().map(|w| r * w).collect(),
        total: r,
        layout: RewardLayout::Dense,
    })
}

/// Whole reward on the final token.
pub fn sparse_reward_vector(r: f64, n: usize) -> Result<TokenRewardVector> {
    if n == 0 {
        return Err(Error::usage("sparse reward vector needs at least one token"));
    }
    let mut rewards = vec![0.0; n];
    rewards[n - 1] = r;
    Ok(TokenRewardVector {
        rewards,
        total: r,
        layout: RewardLayout::Terminal,
    })
}

/// `r'_i = r_i - beta * (logpi_i - logpi_ref_i)`.
pub fn shape_with_kl(dense: &TokenRewardVector, policy_logprobs: &[f64], reference_logprobs: &[f64], beta: f64) -> Result<TokenRewardVector> {
    let n = dense.len();
    if policy_logprobs.len() != n || reference_logprobs.len() != n {
        return Err(Error::usage(format!(
            "KL shaping lengths differ: rewards {n}, policy {}, reference {}",
            policy_logprobs.len(),
            reference_logprobs.len()
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::usage(format!("KL coefficient must be >= 0, got {beta}")));
    }
    let rewards = dense
        .rewards
        .iter()
        .zip(policy_logprobs.iter().zip(reference_logprobs))
        .map(|(r, (p, q))| if beta == 0.0 { *r } else { r - beta * (p - q) })
        .collect();
    Ok(TokenRewardVector {
        rewards,
        total: dense.total,
        layout: dense.layout,
    })
}

/// Per-pair Bradley–Terry loss `-ln sigma(chosen - rejected)`.
pub fn pairwise_loss(score_chosen: f64, score_rejected: f64) -> f64 {
    -crate::diffcore::log_sigmoid(score_chosen - score_rejected)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardTrainConfig {
    pub dims: ModelDims,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub gaze_hidden: usize,
    /// Width of the concatenated gaze embedding (`concat` mode only).
    pub gaze_dim: usize,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims {
                d_model: 32,
                n_blocks: 1,
                ..ModelDims::default()
            },
            epochs: 6,
            batch_size: 16,
            lr: 1e-3,
            grad_clip: 1.0,
            gaze_hidden: 16,
            gaze_dim: 16,
        }
    }
}

impl RewardTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("reward training needs epochs >= 1 and batch_size >= 1"));
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("reward training lr and grad_clip must be positive"));
        }
        if self.gaze_hidden == 0 || self.gaze_dim == 0 {
            return Err(Error::config("gaze_hidden and gaze_dim must be >= 1"));
        }
        Ok(())
    }
}

/// A reward model with its held-out pairwise accuracy.
#[derive(Clone, Debug)]
pub struct TrainedRewardModel {
    pub model: RewardModel,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// Fresh reward model whose embeddings are augmented with projected gaze.
pub fn build_gaze_reward_model<R: Rng + ?Sized>(
    dims: ModelDims,
    mode: GazeMode,
    hidden: usize,
    gaze_dim: usize,
    identity: ModelIdentity,
    rng: &mut R,
) -> Result<RewardModel> {
    let spec = GazeProjectionSpec { mode, hidden, gaze_dim };
    RewardModel::new(dims, Some(spec), identity, rng)
}

fn gaze_of(pair: &PreferencePair, chosen: bool, with_gaze: bool) -> Result<Option<&[GazeFeatures]>> {
    if !with_gaze {
        return Ok(None);
    }
    let g = if chosen { &pair.chosen_gaze } else { &pair.rejected_gaze };
    g.as_deref()
        .map(Some)
        .ok_or_else(|| Error::config("gaze-augmented reward model needs gaze features on every pair"))
}

/// Fraction of pairs the model orders correctly (ties count as wrong).
pub fn pairwise_accuracy(model: &RewardModel, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::usage("pairwise accuracy over an empty set"));
    }
    let with_gaze = model.gaze_mode().is_some();
    let mut right = 0usize;
    for p in pairs {
        let c = model.score(&p.chosen_sequence(), gaze_of(p, true, with_gaze)?)?;
        let r = model.score(&p.rejected_sequence(), gaze_of(p, false, with_gaze)?)?;
        if c > r {
            right += 1;
        }
    }
    Ok(right as f64 / pairs.len() as f64)
}

/// Bradley–Terry training. After training the score offset is set so the mean
/// score over all training responses is zero.
pub fn train_reward_model<R: Rng + ?Sized>(
    train: &[PreferencePair],
    heldout: &[PreferencePair],
    cfg: &RewardTrainConfig,
    gaze_mode: Option<GazeMode>,
    identity: ModelIdentity,
    rng: &mut R,
) -> Result<TrainedRewardModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::usage("reward model training set is empty"));
    }
    if heldout.is_empty() {
        return Err(Error::usage("reward model held-out set is empty"));
    }
    let with_gaze = gaze_mode.is_some();
    if with_gaze && !train.iter().chain(heldout).all(PreferencePair::has_gaze) {
        return Err(Error::config("gaze_mode is set but some pairs carry no gaze features"));
    }
    let mut model = match gaze_mode {
        None => RewardModel::new(cfg.dims, None, identity, rng)?,
        Some(mode) => build_gaze_reward_model(cfg.dims, mode, cfg.gaze_hidden, cfg.gaze_dim, identity, rng)?,
    };
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut last_epoch_loss = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let grads = {
                let mut g = Graph::with_params(model.params());
                let mut losses = Vec::with_capacity(batch.len());
                for &i in batch {
                    let p = &train[i];
                    let c = model.score_graph(&mut g, &p.chosen_sequence(), gaze_of(p, true, with_gaze)?)?;
                    let r = model.score_graph(&mut g, &p.rejected_sequence(), gaze_of(p, false, with_gaze)?)?;
                    let margin = g.sub(c, r)?;
                    let ls = g.log_sigmoid(margin);
                    losses.push(ls);
                }
                let mut acc = losses[0];
                for l in &losses[1..] {
                    acc = g.add(acc, *l)?;
                }
                let loss = g.scale(acc, -1.0 / batch.len() as f64);
                let value = g.item(loss);
                if !value.is_finite() {
                    return Err(Error::Diverged(format!("reward model loss {value} in epoch {epoch}")));
                }
                total += value * batch.len() as f64;
                g.backward(loss)?
            };
            let store = model.params_mut();
            store.zero_grad();
            store.accumulate(&grads);
            store.clip_grad_norm(cfg.grad_clip);
            opt.step_lenient(store)?;
        }
        last_epoch_loss = total / train.len() as f64;
        log::debug!("reward model {} epoch {epoch}: loss {last_epoch_loss:.4}", model.identity);
    }

    let mut sum = 0.0;
    for p in train {
        sum += model.score(&p.chosen_sequence(), gaze_of(p, true, with_gaze)?)?;
        sum += model.score(&p.rejected_sequence(), gaze_of(p, false, with_gaze)?)?;
    }
    model.score_offset = sum / (2 * train.len()) as f64;

    let heldout_accuracy = pairwise_accuracy(&model, heldout)?;
    Ok(TrainedRewardModel {
        model,
        heldout_accuracy,
        final_loss: last_epoch_loss,
    })
}

fn write_ids(out: &mut String, ids: &[usize]) {
    for (i, t) in ids.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{t}");
    }
}

fn write_gaze(out: &mut String, gaze: &[GazeFeatures]) {
    for (i, g) in gaze.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{:?},{:?},{:?},{:?}", g.ffd, g.gpt, g.trt, g.nfix);
    }
}

/// Serialises pairs, one per line:
/// `prompt<TAB>chosen<TAB>rejected[<TAB>chosen_gaze<TAB>rejected_gaze]`.
/// Ids are space separated; gaze is space separated `ffd,gpt,trt,nfix` quadruples
/// covering prompt and response.
pub fn format_pairs(pairs: &[PreferencePair]) -> String {
    let mut out = String::from("# prompt\tchosen\trejected[\tchosen_gaze\trejected_gaze]\n");
    for p in pairs {
        write_ids(&mut out, &p.prompt);
        out.push('\t');
        write_ids(&mut out, &p.chosen);
        out.push('\t');
        write_ids(&mut out, &p.rejected);
        if let (Some(c), Some(r)) = (&p.chosen_gaze, &p.rejected_gaze) {
            out.push('\t');
            write_gaze(&mut out, c);
            out.push('\t');
            write_gaze(&mut out, r);
        }
        out.push('\n');
    }
    out
}

pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fail = |message: String| Error::Parse {
            path: origin.to_owned(),
            line: n + 1,
            message,
        };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 && fields.len() != 5 {
            return Err(fail(format!("expected 3 or 5 tab-separated fields, found {}", fields.len())));
        }
        let ids = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| fail(format!("bad token id '{t}'"))))
                .collect()
        };
        let gaze = |s: &str| -> Result<Vec<GazeFeatures>> {
            s.split_whitespace()
                .map(|q| {
                    let v: Vec<f64> = q
                        .split(',')
                        .map(|x| x.parse().map_err(|_| fail(format!("bad gaze value '{x}'"))))
                        .collect::<Result<_>>()?;
                    match v[..] {
                        [a, b, c, d] => GazeFeatures::new(a, b, c, d).map_err(|e| fail(e.to_string())),
                        _ => Err(fail(format!("gaze entry '{q}' needs 4 values"))),
                    }
                })
                .collect()
        };
        let mut pair = PreferencePair::new(ids(fields[0])?, ids(fields[1])?, ids(fields[2])?)
            .map_err(|e| fail(e.to_string()))?;
        if fields.len() == 5 {
            let (c, r) = (gaze(fields[3])?, gaze(fields[4])?);
            if c.len() != pair.prompt.len() + pair.chosen.len() || r.len() != pair.prompt.len() + pair.rejected.len() {
                return Err(fail("gaze length does not match prompt + response length".into()));
            }
            pair.chosen_gaze = Some(c);
            pair.rejected_gaze = Some(r);
        }
        pairs.push(pair);
    }
    Ok(pairs)
}

pub fn save_pairs(pairs: &[PreferencePair], path: &Path) -> Result<()> {
    std::fs::write(path, format_pairs(pairs)).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<PreferencePair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pairs(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthenv::{generate_preference_pairs, make_prompt_set, TaskSpec, UniformSampler};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn distribute_examples() {
        let v = distribute_reward(2.0, &[0.5; 4]).unwrap();
        assert_eq!(v.rewards, vec![0.5; 4]);
        assert_eq!(v.total, 2.0);

        // mpmath: 1/(1+3), 3/(1+3)
        let v = distribute_reward(1.0, &[0.0, 3f64.ln()]).unwrap();
        assert!((v.rewards[0] - 0.25).abs() < 1e-15);
        assert!((v.rewards[1] - 0.75).abs() < 1e-15);

        assert!(distribute_reward(0.0, &[0.3, 0.1, 2.0]).unwrap().rewards.iter().all(|r| *r == 0.0));
        assert_eq!(distribute_reward(-1.0, &[0.7, 0.7]).unwrap().rewards, vec![-0.5, -0.5]);
    }

    #[test]
    fn distribute_errors_and_temperature() {
        assert!(matches!(distribute_reward(1.0, &[]), Err(Error::Usage(_))));
        assert!(matches!(distribute_reward(1.0, &[0.1, f64::NAN]), Err(Error::Usage(_))));
        assert!(matches!(distribute_reward(1.0, &[f64::INFINITY]), Err(Error::Usage(_))));
        assert!(distribute_reward_with_temperature(1.0, &[0.1], 0.0).is_err());

        // huge TRT stays finite thanks to max subtraction
        let v = distribute_reward(1.0, &[1000.0, 999.0]).unwrap();
        assert!(v.rewards.iter().all(|r| r.is_finite()));

        let t = [0.0, 0.2697, 0.0122];
        let sharp = distribute_reward_with_temperature(1.0, &t, 0.05).unwrap();
        let flat = distribute_reward(1.0, &t).unwrap();
        assert!(sharp.rewards[1] > flat.rewards[1]);
        assert!((sharp.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_shaping_examples() {
        let v = sparse_reward_vector(1.0, 1).unwrap();
        let s = shape_with_kl(&v, &[-0.3], &[-0.5], 0.1).unwrap();
        assert!((s.rewards[0] - 0.98).abs() < 1e-15);

        let d = distribute_reward(3.0, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(shape_with_kl(&d, &[-1.0, -2.0, -0.1], &[-0.2, -0.3, -0.4], 0.0).unwrap(), d);
        assert_eq!(shape_with_kl(&d, &[-1.0, -2.0, -0.1], &[-1.0, -2.0, -0.1], 0.7).unwrap(), d);
        assert!(matches!(shape_with_kl(&d, &[0.0; 2], &[0.0; 3], 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn sparse_examples() {
        assert_eq!(sparse_reward_vector(1.5, 3).unwrap().rewards, vec![0.0, 0.0, 1.5]);
        assert_eq!(sparse_reward_vector(-0.25, 1).unwrap().rewards, vec![-0.25]);
        assert!(sparse_reward_vector(1.0, 0).is_err());
    }

    #[test]
    fn pairwise_loss_limits() {
        assert!((pairwise_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(pairwise_loss(800.0, -800.0) < 1e-300);
        assert!((pairwise_loss(-40.0, 0.0) - 40.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn distribute_invariants(r in -10.0f64..10.0, trt in prop::collection::vec(-5.0f64..5.0, 1..512), c in -50.0f64..50.0) {
            let v = distribute_reward(r, &trt).unwrap();
            prop_assert!((v.sum() - r).abs() <= 1e-9 * r.abs().max(1.0));
            let shifted: Vec<f64> = trt.iter().map(|t| t + c).collect();
            let w = distribute_reward(r, &shifted).unwrap();
            for (a, b) in v.rewards.iter().zip(&w.rewards) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            if r != 0.0 {
                let top = trt.iter().cloned().fold(f64::MIN, f64::max);
                let top_abs = v.rewards.iter().map(|x| x.abs()).fold(0.0, f64::max);
                for (i, t) in trt.iter().enumerate() {
                    if *t == top {
                        prop_assert_eq!(v.rewards[i].abs(), top_abs);
                    }
                }
            }
        }

        #[test]
        fn distribute_monotone(r in prop_oneof![-10.0f64..-1e-3, 1e-3f64..10.0], trt in prop::collection::vec(-5.0f64..5.0, 2..64)) {
            let v = distribute_reward(r, &trt).unwrap();
            for i in 0..trt.len() {
                for j in 0..trt.len() {
                    if trt[i] > trt[j] {
                        prop_assert!(v.rewards[i].abs() > v.rewards[j].abs());
                    }
                }
            }
        }

        #[test]
        fn sparse_conserves(r in -10.0f64..10.0, n in 1usize..64) {
            prop_assert_eq!(sparse_reward_vector(r, n).unwrap().sum(), r);
        }
    }

    fn small_pairs(n: usize, seed: u64) -> (TaskSpec, Vec<PreferencePair>) {
        let spec = TaskSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompts = make_prompt_set(&spec, n, &mut rng).unwrap();
        let pairs = generate_preference_pairs(&spec, &prompts, &UniformSampler::new(&spec), 4, &mut rng).unwrap();
        (spec, pairs)
    }

    #[test]
    fn dataset_round_trip() {
        let (spec, mut pairs) = small_pairs(6, 1);
        let table = GazeTable::default();
        pairs[0].attach_gaze(&table, &spec.class_map(), None).unwrap();
        pairs[1]
            .attach_gaze(&table.clone().with_noise(0.05), &spec.class_map(), Some(&mut ChaCha8Rng::seed_from_u64(2)))
            .unwrap();
        let text = format_pairs(&pairs);
        assert_eq!(parse_pairs(&text, "mem").unwrap(), pairs);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        save_pairs(&pairs, &path).unwrap();
        assert_eq!(load_pairs(&path).unwrap(), pairs);
    }

    #[test]
    fn dataset_parse_errors_name_the_line() {
        let err = parse_pairs("1 2\t3\t4\n1 2\t3\n", "f.tsv").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(matches!(parse_pairs("1\t2\t2\n", "f").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(parse_pairs("1\t2\tx\n", "f").is_err());
        assert!(parse_pairs("1\t2\t3\t0,0,0,0\t0,0,0\n", "f").is_err());
        assert!(parse_pairs("1\t2\t3\t0,0,0,0\t0,0,0,0\n", "f").is_err(), "gaze shorter than sequence");
    }

    #[test]
    fn training_validates_inputs() {
        let (_, pairs) = small_pairs(12, 3);
        let id = ModelIdentity::new("train", 0, "a");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = RewardTrainConfig {
            dims: ModelDims { d_model: 16, ..ModelDims::default() },
            epochs: 1,
            ..RewardTrainConfig::default()
        };
        assert!(matches!(
            train_reward_model(&pairs, &pairs, &cfg, Some(GazeMode::Concat), id.clone(), &mut rng),
            Err(Error::Config(_))
        ));
        assert!(train_reward_model(&[], &pairs, &cfg, None, id.clone(), &mut rng).is_err());
        let bad = RewardTrainConfig { epochs: 0, ..cfg };
        assert!(matches!(train_reward_model(&pairs, &pairs, &bad, None, id, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn short_training_lowers_loss_and_centres_scores() {
        let (spec, mut pairs) = small_pairs(200, 4);
        let table = GazeTable::default();
        for p in &mut pairs {
            p.attach_gaze(&table, &spec.class_map(), None).unwrap();
        }
        let cfg = RewardTrainConfig {
            dims: ModelDims { d_model: 16, ..ModelDims::default() },
            epochs: 2,
            ..RewardTrainConfig::default()
        };
        for mode in [None, Some(GazeMode::Add), Some(GazeMode::Concat)] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let t = train_reward_model(&pairs, &pairs[..50], &cfg, mode, ModelIdentity::new("t", 9, "a"), &mut rng).unwrap();
            assert!(t.final_loss < std::f64::consts::LN_2, "{mode:?} {}", t.final_loss);
            let with_gaze = mode.is_some();
            let mean: f64 = pairs
                .iter()
                .flat_map(|p| {
                    [
                        t.model.score(&p.chosen_sequence(), gaze_of(p, true, with_gaze).unwrap()).unwrap(),
                        t.model.score(&p.rejected_sequence(), gaze_of(p, false, with_gaze).unwrap()).unwrap(),
                    ]
                })
                .sum::<f64>()
                / (2 * pairs.len()) as f64;
            assert!(mean.abs() < 1e-9, "{mean}");
        }
    }
}
