//! Declarative experiments: SFT, reward models, policy optimisation and reporting.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Adam, AdamConfig, Graph};
use crate::error::{Error, Result};
use crate::evalkit::{
    aggregate_seeds, minmax_normalize, validation_score, ConvergenceReport, ConvergenceSettings, HoldoutEvaluator,
    HoldoutMean, TrainingCurve,
};
use crate::gaze::{GazeTable, TokenClassMap};
use crate::models::{GazeMode, ModelDims, ModelIdentity, PolicyModel};
use crate::rewardlab::{train_reward_model, PreferencePair, RewardTrainConfig, TrainedRewardModel};
use crate::rltrain::{
    collect_rollouts, grpo_update, ppo_update, response_graph, rollout_generation, Algorithm, GrpoConfig, PpoConfig,
    RewardSource, Scheme, UpdateStats,
};
use crate::synthenv::{generate_preference_pairs, make_prompt_set, TaskSpec, UniformSampler};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub eval_prompts: usize,
    /// Random candidates drawn per prompt when building preference pairs.
    pub candidates_per_prompt: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_pairs: 2000,
            heldout_pairs: 400,
            eval_prompts: 256,
            candidates_per_prompt: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

/// Everything one `run` needs.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub algorithm: Algorithm,
    pub scheme: Scheme,
    /// Reward-model gaze integration; `gaze_rm` only.
    pub gaze_mode: Option<GazeMode>,
    pub seeds: Vec<u64>,
    /// Policy-optimisation steps.
    pub steps: usize,
    /// Rollouts per step. GRPO splits them into groups of `grpo.group_size`.
    pub batch_size: usize,
    pub eval_every: usize,
    /// Task specification file; the built-in task when absent.
    pub task: Option<PathBuf>,
    /// Gaze table file; the built-in table when absent.
    pub gaze_table: Option<PathBuf>,
    /// Replaces the table's noise level when set.
    pub gaze_noise: Option<f64>,
    /// Softmax temperature of the gaze reward distribution.
    pub temperature: f64,
    /// Concurrent seeds.
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub policy: ModelDims,
    pub sft: SftConfig,
    pub reward: RewardTrainConfig,
    pub ppo: PpoConfig,
    pub grpo: GrpoConfig,
    pub convergence: ConvergenceSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            algorithm: Algorithm::Ppo,
            scheme: Scheme::Sparse,
            gaze_mode: None,
            seeds: vec![0, 1, 2],
            steps: 200,
            batch_size: 32,
            eval_every: 1,
            task: None,
            gaze_table: None,
            gaze_noise: None,
            temperature: 1.0,
            workers: 1,
            output_dir: None,
            data: DataConfig::default(),
            policy: ModelDims {
                d_model: 32,
                n_blocks: 1,
                ..ModelDims::default()
            },
            sft: SftConfig::default(),
            reward: RewardTrainConfig::default(),
            ppo: PpoConfig::default(),
            grpo: GrpoConfig::default(),
            convergence: ConvergenceSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_owned(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_owned(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `dotted.key=value` overrides. Values are read as TOML, falling back to a string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).expect("config serialises");
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override '{o}' is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut table = &mut root;
            for p in &parts[..parts.len() - 1] {
                table = table
                    .entry(p.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::config(format!("override '{key}': '{p}' is not a section")))?;
            }
            table.insert(parts[parts.len() - 1].to_owned(), value);
        }
        let text = toml::to_string(&root).expect("table serialises");
        Self::parse(&text, "overrides")
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match (self.scheme, self.gaze_mode) {
            (Scheme::GazeRm, None) => problems.push("gaze_mode: scheme gaze_rm needs add or concat".to_string()),
            (Scheme::Sparse | Scheme::GazeDistrib, Some(m)) => {
                problems.push(format!("gaze_mode: '{m}' is only valid with scheme gaze_rm"))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            problems.push("seeds: at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            problems.push("seeds: duplicates".into());
        }
        if self.batch_size == 0 {
            problems.push("batch_size: must be >= 1".into());
        }
        if self.algorithm == Algorithm::Grpo && self.grpo.group_size > 0 && !self.batch_size.is_multiple_of(self.grpo.group_size) {
            problems.push(format!(
                "batch_size: {} is not a multiple of grpo.group_size {}",
                self.batch_size, self.grpo.group_size
            ));
        }
        if self.eval_every == 0 {
            problems.push("eval_every: must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            problems.push("temperature: must be positive".into());
        }
        if let Some(n) = self.gaze_noise {
            if !(n >= 0.0 && n.is_finite()) {
                problems.push("gaze_noise: must be >= 0".into());
            }
        }
        if self.workers == 0 {
            problems.push("workers: must be >= 1".into());
        }
        let d = &self.data;
        if d.train_pairs == 0 || d.heldout_pairs == 0 || d.eval_prompts == 0 {
            problems.push("data: train_pairs, heldout_pairs and eval_prompts must be >= 1".into());
        }
        if d.candidates_per_prompt < 2 {
            problems.push("data.candidates_per_prompt: must be >= 2".into());
        }
        if self.sft.batch_size == 0 || !(self.sft.lr > 0.0) {
            problems.push("sft: batch_size >= 1 and lr > 0 required".into());
        }
        for (section, r) in [
            ("policy", self.policy.validate()),
            ("reward", self.reward.validate()),
            ("ppo", self.ppo.validate()),
            ("grpo", self.grpo.validate()),
        ] {
            if let Err(e) = r {
                problems.push(format!("{section}: {e}"));
            }
        }
        let c = &self.convergence;
        if !(c.fraction > 0.0 && c.fraction <= 1.0) || c.window == 0 {
            problems.push("convergence: fraction in (0, 1] and window >= 1 required".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Validates, then loads the task and gaze table and checks them against the model sizes.
    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let spec = match &self.task {
            Some(p) => TaskSpec::load(p)?,
            None => TaskSpec::default(),
        };
        let mut table = match &self.gaze_table {
            Some(p) => GazeTable::load(p)?,
            None => GazeTable::default(),
        };
        if let Some(n) = self.gaze_noise {
            table = table.with_noise(n);
        }
        let longest = 2 + spec.prompts.max_keywords + spec.prompts.max_response;
        for (section, dims) in [("policy", &self.policy), ("reward.dims", &self.reward.dims)] {
            if dims.vocab_size != spec.vocab_size() {
                return Err(Error::config(format!(
                    "{section}.vocab_size is {} but the task has {} tokens",
                    dims.vocab_size,
                    spec.vocab_size()
                )));
            }
            if dims.max_len < longest {
                return Err(Error::config(format!(
                    "{section}.max_len {} is shorter than the longest episode ({longest})",
                    dims.max_len
                )));
            }
        }
        Ok(Resolved {
            classes: spec.class_map(),
            cfg: self.clone(),
            spec,
            table,
        })
    }
}

/// A validated config with its task and gaze table loaded.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub cfg: ExperimentConfig,
    pub spec: TaskSpec,
    pub table: GazeTable,
    pub classes: TokenClassMap,
}

#[derive(Clone, Copy)]
enum Stream {
    Pairs = 1,
    RewardInit = 2,
    PolicyInit = 3,
    Sft = 4,
    EvalPrompts = 5,
    EvalSampling = 6,
    Rollouts = 7,
    Updates = 8,
    Gaze = 9,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Seed used for the hold-out reward model of run seed `seed`.
pub fn holdout_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Supervised pass maximising the likelihood of chosen responses. Returns the last epoch's mean token loss.
pub fn supervised_finetune<R: rand::Rng + ?Sized>(
    policy: &mut PolicyModel,
    pairs: &[PreferencePair],
    cfg: &SftConfig,
    rng: &mut R,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::usage("SFT needs at least one pair"));
    }
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let grads = {
                let mut g = Graph::with_params(policy.params());
                let mut terms = Vec::new();
                let mut n = 0;
                for &i in batch {
                    let p = &pairs[i];
                    let (_, lp, _) = response_graph(policy, &mut g, &p.prompt, &p.chosen)?;
                    terms.push(g.sum(lp));
                    n += p.chosen.len();
                }
                let mut acc = terms[0];
                for t in &terms[1..] {
                    acc = g.add(acc, *t)?;
                }
                let loss = g.scale(acc, -1.0 / n as f64);
                total += g.item(loss) * n as f64;
                count += n;
                g.backward(loss)?
            };
            let store = policy.params_mut();
            store.zero_grad();
            store.accumulate(&grads);
            store.clip_grad_norm(1.0);
            opt.step_lenient(store)?;
        }
        last = total / count as f64;
    }
    Ok(last)
}

/// Per-seed artefacts shared by every arm trained on that seed.
#[derive(Clone, Debug)]
pub struct SeedAssets {
    pub seed: u64,
    pub sft: PolicyModel,
    pub sft_loss: f64,
    pub reward_model: Option<TrainedRewardModel>,
    pub gaze_reward_model: Option<TrainedRewardModel>,
    pub holdout: HoldoutEvaluator,
    pub holdout_accuracy: f64,
    pub eval_prompts: Vec<Vec<usize>>,
    pub sft_holdout: HoldoutMean,
}

fn make_pairs(res: &Resolved, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PreferencePair>> {
    let sampler = UniformSampler::new(&res.spec);
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let prompts = make_prompt_set(&res.spec, count - pairs.len(), rng)?;
        pairs.extend(generate_preference_pairs(
            &res.spec,
            &prompts,
            &sampler,
            res.cfg.data.candidates_per_prompt,
            rng,
        )?);
    }
    Ok(pairs)
}

/// Builds the SFT policy, the reward models the listed arms need and the hold-out evaluator.
pub fn prepare_seed(res: &Resolved, seed: u64, gaze_rm: Option<GazeMode>, need_plain_rm: bool) -> Result<SeedAssets> {
    let cfg = &res.cfg;
    let d = cfg.data;
    let mut pair_rng = stream(seed, Stream::Pairs);
    let mut pairs = make_pairs(res, d.train_pairs + d.heldout_pairs, &mut pair_rng)?;
    let mut gaze_rng = stream(seed, Stream::Gaze);
    if gaze_rm.is_some() {
        for p in &mut pairs {
            p.attach_gaze(&res.table, &res.classes, Some(&mut gaze_rng))?;
        }
    }
    let (train, heldout) = pairs.split_at(d.train_pairs);

    let identity = ModelIdentity::new("train", seed, "train");
    let reward_model = if need_plain_rm {
        let t = train_reward_model(train, heldout, &cfg.reward, None, identity.clone(), &mut stream(seed, Stream::RewardInit))?;
        log::info!("seed {seed}: reward model held-out accuracy {:.3}", t.heldout_accuracy);
        Some(t)
    } else {
        None
    };
    let gaze_reward_model = match gaze_rm {
        Some(mode) => {
            let t = train_reward_model(train, heldout, &cfg.reward, Some(mode), identity.clone(), &mut stream(seed, Stream::RewardInit))?;
            log::info!("seed {seed}: gaze reward model ({mode}) held-out accuracy {:.3}", t.heldout_accuracy);
            Some(t)
        }
        None => None,
    };

    let hseed = holdout_seed(seed);
    let hpairs = make_pairs(res, d.train_pairs + d.heldout_pairs, &mut stream(hseed, Stream::Pairs))?;
    let (htrain, hheld) = hpairs.split_at(d.train_pairs);
    let h = train_reward_model(
        htrain,
        hheld,
        &cfg.reward,
        None,
        ModelIdentity::new("holdout", hseed, "holdout"),
        &mut stream(hseed, Stream::RewardInit),
    )?;
    log::info!("seed {seed}: hold-out reward model accuracy {:.3}", h.heldout_accuracy);
    let training_ids: Vec<&ModelIdentity> = reward_model
        .iter()
        .chain(gaze_reward_model.iter())
        .map(|t| &t.model.identity)
        .collect();
    let holdout = HoldoutEvaluator::new(h.model, training_ids)?;

    let mut sft = PolicyModel::new(cfg.policy, &mut stream(seed, Stream::PolicyInit))?;
    let sft_loss = supervised_finetune(&mut sft, train, &cfg.sft, &mut stream(seed, Stream::Sft))?;
    log::info!("seed {seed}: SFT loss {sft_loss:.4}");

    let eval_prompts = make_prompt_set(&res.spec, d.eval_prompts, &mut stream(seed, Stream::EvalPrompts))?;
    let mut assets = SeedAssets {
        seed,
        sft,
        sft_loss,
        reward_model,
        gaze_reward_model,
        holdout,
        holdout_accuracy: h.heldout_accuracy,
        eval_prompts,
        sft_holdout: HoldoutMean { mean: 0.0, prompt_set: 0 },
    };
    assets.sft_holdout = evaluate(res, &assets, &assets.sft)?;
    Ok(assets)
}

/// Hold-out mean of `policy` on the seed's evaluation prompts, sampled with a fixed stream.
pub fn evaluate(res: &Resolved, assets: &SeedAssets, policy: &PolicyModel) -> Result<HoldoutMean> {
    let gen = rollout_generation(res.spec.prompts.max_response, res.spec.eos);
    let mut rng = stream(assets.seed, Stream::EvalSampling);
    let responses = assets
        .eval_prompts
        .iter()
        .map(|p| policy.generate(p, &gen, &mut rng).map(|full| full[p.len()..].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    assets.holdout.mean_score(&assets.eval_prompts, &responses)
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub scheme: Scheme,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub train_reward: Option<f64>,
    pub holdout_score: Option<f64>,
    pub validation_score: Option<f64>,
    pub kl: Option<f64>,
    pub loss: Option<f64>,
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

/// Outcome of training one (scheme, algorithm, seed) arm.
#[derive(Clone, Debug)]
pub struct ArmResult {
    pub scheme: Scheme,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub validation: TrainingCurve,
    pub train_reward: TrainingCurve,
    pub best_policy: PolicyModel,
    pub best_validation: f64,
}

/// Optimises the seed's SFT policy under `scheme` and `algorithm`. Each record is handed
/// to `sink` as soon as it exists.
pub fn train_arm(
    res: &Resolved,
    assets: &SeedAssets,
    scheme: Scheme,
    algorithm: Algorithm,
    sink: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<ArmResult> {
    let cfg = &res.cfg;
    let seed = assets.seed;
    let rm = match scheme {
        Scheme::GazeRm => assets.gaze_reward_model.as_ref(),
        _ => assets.reward_model.as_ref(),
    }
    .ok_or_else(|| Error::config(format!("seed {seed} has no reward model for scheme {scheme}")))?;
    let source = RewardSource {
        scheme,
        reward_model: &rm.model,
        gaze_table: Some(&res.table),
        classes: &res.classes,
        temperature: cfg.temperature,
        beta: match algorithm {
            Algorithm::Ppo => cfg.ppo.beta,
            Algorithm::Grpo => cfg.grpo.beta,
        },
        center_scores: algorithm == Algorithm::Ppo && cfg.ppo.center_scores,
    };
    source.validate()?;
    let gen = rollout_generation(res.spec.prompts.max_response, res.spec.eos);
    let lr = match algorithm {
        Algorithm::Ppo => cfg.ppo.lr,
        Algorithm::Grpo => cfg.grpo.lr,
    };
    let mut opt = Adam::new(AdamConfig {
        lr,
        ..AdamConfig::default()
    });
    let mut roll_rng = stream(seed, Stream::Rollouts);
    let mut upd_rng = stream(seed, Stream::Updates);
    let mut policy = assets.sft.clone();

    let mut validation = TrainingCurve::new("validation_score", scheme, algorithm, seed);
    let mut train_reward = TrainingCurve::new("train_reward", scheme, algorithm, seed);
    let mut records = Vec::new();
    let mut best = (0.0, policy.clone());

    let mut emit = |rec: MetricRecord, records: &mut Vec<MetricRecord>| -> Result<()> {
        sink(&rec)?;
        records.push(rec);
        Ok(())
    };
    emit(
        MetricRecord {
            step: 0,
            scheme,
            algorithm,
            seed,
            train_reward: None,
            holdout_score: Some(assets.sft_holdout.mean),
            validation_score: Some(validation_score(assets.sft_holdout, assets.sft_holdout)?),
            kl: None,
            loss: None,
        },
        &mut records,
    )?;
    validation.push(0, 0.0)?;

    for step in 1..=cfg.steps {
        let stats: UpdateStats = match algorithm {
            Algorithm::Ppo => {
                let prompts = make_prompt_set(&res.spec, cfg.batch_size, &mut roll_rng)?;
                let rollouts = collect_rollouts(&policy, &assets.sft, &prompts, &source, &gen, &mut roll_rng)?;
                ppo_update(&mut policy, &mut opt, &rollouts, &cfg.ppo, &mut upd_rng)?
            }
            Algorithm::Grpo => {
                let g = cfg.grpo.group_size;
                let distinct = make_prompt_set(&res.spec, cfg.batch_size / g, &mut roll_rng)?;
                let prompts: Vec<Vec<usize>> = distinct.iter().flat_map(|p| std::iter::repeat_n(p.clone(), g)).collect();
                let rollouts = collect_rollouts(&policy, &assets.sft, &prompts, &source, &gen, &mut roll_rng)?;
                let groups: Vec<Vec<_>> = rollouts.chunks(g).map(<[_]>::to_vec).collect();
                grpo_update(&mut policy, &mut opt, &groups, &cfg.grpo, &mut upd_rng)?
            }
        };
        if !stats.mean_reward.is_finite() {
            return Err(Error::Diverged(format!("mean reward {} at step {step}", stats.mean_reward)));
        }
        train_reward.push(step, stats.mean_reward)?;
        let (holdout, val) = if step % cfg.eval_every == 0 || step == cfg.steps {
            let m = evaluate(res, assets, &policy)?;
            let v = validation_score(m, assets.sft_holdout)?;
            validation.push(step, v)?;
            if v > best.0 {
                best = (v, policy.clone());
            }
            (Some(m.mean), Some(v))
        } else {
            (None, None)
        };
        log::debug!(
            "{scheme}/{algorithm} seed {seed} step {step}: reward {:.4} kl {:.4} loss {:.4} val {val:?}",
            stats.mean_reward,
            stats.kl,
            stats.loss
        );
        emit(
            MetricRecord {
                step,
                scheme,
                algorithm,
                seed,
                train_reward: Some(stats.mean_reward),
                holdout_score: holdout,
                validation_score: val,
                kl: Some(stats.kl),
                loss: Some(stats.loss),
            },
            &mut records,
        )?;
    }
    Ok(ArmResult {
        scheme,
        algorithm,
        seed,
        records,
        validation,
        train_reward,
        best_policy: best.1,
        best_validation: best.0,
    })
}

/// Name of the marker left in a run directory whose run did not finish.
pub const FAILED_MARKER: &str = "FAILED";

/// Files written by [`run_experiment`].
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub report: Option<ConvergenceReport>,
    pub arms: Vec<ArmResult>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn run_seed(res: &Resolved, seed: u64, dir: &Path) -> Result<ArmResult> {
    let cfg = &res.cfg;
    let seed_dir = dir.join(format!("seed-{seed}"));
    fs::create_dir_all(&seed_dir).map_err(|e| Error::io(&seed_dir, e))?;
    let gaze = if cfg.scheme == Scheme::GazeRm { cfg.gaze_mode } else { None };
    let assets = prepare_seed(res, seed, gaze, cfg.scheme != Scheme::GazeRm)?;
    let metrics_path = seed_dir.join("metrics.jsonl");
    let mut file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut sink = |r: &MetricRecord| -> Result<()> {
        writeln!(file, "{}", r.to_json()).map_err(|e| Error::io(&metrics_path, e))
    };
    let arm = train_arm(res, &assets, cfg.scheme, cfg.algorithm, &mut sink)?;
    arm.best_policy.save(&seed_dir.join("best_policy.grlf"))?;
    for t in assets.reward_model.iter().chain(assets.gaze_reward_model.iter()) {
        t.model.save(&seed_dir.join("reward_model.grlf"))?;
    }
    assets.holdout.model().save(&seed_dir.join("holdout_model.grlf"))?;
    Ok(arm)
}

/// Runs every seed of `res` under `out_root/<name>`. Per-seed metrics are written as
/// they are produced; on failure the partial files stay and a `FAILED` marker names the error.
pub fn run_experiment(res: &Resolved, out_root: &Path) -> Result<RunSummary> {
    let cfg = &res.cfg;
    let dir = out_root.join(&cfg.name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    write_file(&dir.join("config.resolved.toml"), &cfg.to_toml())?;

    let results: Vec<Result<ArmResult>> = if cfg.workers <= 1 || cfg.seeds.len() == 1 {
        cfg.seeds.iter().map(|&s| run_seed(res, s, &dir)).collect()
    } else {
        let mut slots: Vec<Option<Result<ArmResult>>> = (0..cfg.seeds.len()).map(|_| None).collect();
        for chunk in cfg.seeds.iter().enumerate().collect::<Vec<_>>().chunks(cfg.workers) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(i, s)| (*i, scope.spawn(|| run_seed(res, **s, &dir))))
                    .collect();
                for (i, h) in handles {
                    slots[i] = Some(h.join().unwrap_or_else(|_| Err(Error::Diverged("worker panicked".into()))));
                }
            });
        }
        slots.into_iter().map(|s| s.expect("every seed ran")).collect()
    };

    let mut combined = String::new();
    for &seed in &cfg.seeds {
        let p = dir.join(format!("seed-{seed}")).join("metrics.jsonl");
        if let Ok(text) = fs::read_to_string(&p) {
            combined.push_str(&text);
        }
    }
    write_file(&dir.join("metrics.jsonl"), &combined)?;

    let mut arms = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in cfg.seeds.iter().zip(results) {
        match r {
            Ok(a) => arms.push(a),
            Err(e) => failures.push((*seed, e)),
        }
    }
    if !failures.is_empty() {
        let text: String = failures.iter().map(|(s, e)| format!("seed {s}: {e}\n")).collect();
        write_file(&marker, &text)?;
        log::error!("run '{}' failed; partial artifacts kept in {}", cfg.name, dir.display());
        return Err(failures.into_iter().next().expect("nonempty").1);
    }

    let report = if arms.len() >= 2 {
        let curves: Vec<TrainingCurve> = arms.iter().map(|a| a.validation.clone()).collect();
        let rep = aggregate_seeds(&curves, cfg.convergence)?;
        write_file(&dir.join("report.csv"), &rep.to_csv())?;
        write_file(&dir.join("report.txt"), &rep.to_table())?;
        Some(rep)
    } else {
        log::warn!("a single seed gives no convergence report");
        None
    };
    Ok(RunSummary { dir, report, arms })
}

/// A one-screen description of what `run` would do.
pub fn describe_plan(res: &Resolved) -> String {
    let cfg = &res.cfg;
    let mut out = format!(
        "run '{}': {} with {} reward",
        cfg.name, cfg.algorithm, cfg.scheme
    );
    if let Some(m) = cfg.gaze_mode {
        out.push_str(&format!(" ({m} gaze integration)"));
    }
    out.push_str(&format!(
        "\n  seeds {:?}, {} steps x {} rollouts, evaluation every {} step(s) on {} prompts\n",
        cfg.seeds, cfg.steps, cfg.batch_size, cfg.eval_every, cfg.data.eval_prompts
    ));
    out.push_str(&format!(
        "  task: {} tokens, {} keyword cues; gaze noise {}\n",
        res.spec.vocab_size(),
        res.spec.cues().count(),
        res.table.noise_sigma
    ));
    out.push_str("  per seed: SFT on chosen responses -> reward model(s) -> hold-out model -> policy optimisation\n\n");
    out.push_str("# resolved configuration\n");
    out.push_str(&cfg.to_toml());
    out
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Curves of one metric, keyed by (scheme, algorithm, seed).
pub fn curves_from_records(records: &[MetricRecord], metric: &str) -> Result<Vec<TrainingCurve>> {
    let pick = |r: &MetricRecord| match metric {
        "train_reward" => Ok(r.train_reward),
        "holdout_score" => Ok(r.holdout_score),
        "validation_score" => Ok(r.validation_score),
        "kl" => Ok(r.kl),
        "loss" => Ok(r.loss),
        _ => Err(Error::usage(format!("unknown metric '{metric}'"))),
    };
    let mut map: BTreeMap<(Scheme, Algorithm, u64), TrainingCurve> = BTreeMap::new();
    for r in records {
        if let Some(v) = pick(r)? {
            map.entry((r.scheme, r.algorithm, r.seed))
                .or_insert_with(|| TrainingCurve::new(metric, r.scheme, r.algorithm, r.seed))
                .push(r.step, v)?;
        }
    }
    Ok(map.into_values().collect())
}

/// Metrics exported by [`export_curves`].
pub const EXPORTED_METRICS: [&str; 3] = ["validation_score", "train_reward", "holdout_score"];

/// Long-format CSV (`step,seed,scheme,value`) per metric. Constant curves are skipped
/// with a warning when normalising.
pub fn export_curves(run_dir: &Path, normalize: bool) -> Result<BTreeMap<String, String>> {
    let records = read_metrics(&run_dir.join("metrics.jsonl"))?;
    let mut out = BTreeMap::new();
    for metric in EXPORTED_METRICS {
        let mut csv = String::from("step,seed,scheme,value\n");
        for c in curves_from_records(&records, metric)? {
            let c = if normalize {
                match minmax_normalize(&c) {
                    Ok(n) => n,
                    Err(e) => {
                        log::warn!("{metric}: skipping {} seed {}: {e}", c.scheme, c.seed);
                        continue;
                    }
                }
            } else {
                c
            };
            for (step, v) in c.points() {
                csv.push_str(&format!("{step},{},{},{v}\n", c.seed, c.scheme));
            }
        }
        out.insert(metric.to_string(), csv);
    }
    Ok(out)
}

/// Merges the reports of several runs; speedups are taken against the sparse run.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<ConvergenceReport> {
    let mut rows = Vec::new();
    for d in dirs {
        let path = d.join("report.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        for row in ConvergenceReport::parse_csv(&text, &path.display().to_string())?.rows {
            if rows.iter().any(|r: &crate::evalkit::ReportRow| r.scheme == row.scheme && r.algorithm == row.algorithm) {
                log::warn!("{}: duplicate {}/{} row ignored", path.display(), row.scheme, row.algorithm);
                continue;
            }
            rows.push(row);
        }
    }
    let mut report = ConvergenceReport { rows };
    report.fill_speedups(Scheme::Sparse)?;
    Ok(report)
}
