use super::*;
use crate::diffcore::AdamConfig;
use crate::gaze::GazeTable;
use crate::models::{GazeMode, GazeProjectionSpec, ModelDims, ModelIdentity};
use crate::synthenv::{make_prompt_set, TaskSpec};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn dims() -> ModelDims {
    ModelDims {
        d_model: 16,
        max_len: 16,
        n_blocks: 1,
        ..ModelDims::default()
    }
}

struct Fixture {
    spec: TaskSpec,
    policy: PolicyModel,
    rm: RewardModel,
    gaze_rm: RewardModel,
    table: GazeTable,
    classes: TokenClassMap,
    prompts: Vec<Vec<usize>>,
}

fn fixture() -> Fixture {
    let spec = TaskSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prompts = make_prompt_set(&spec, 6, &mut rng).unwrap();
    let policy = PolicyModel::new(dims(), &mut rng).unwrap();
    let rm = RewardModel::new(dims(), None, ModelIdentity::new("rm", 1, "a"), &mut rng).unwrap();
    let gaze_rm = RewardModel::new(
        dims(),
        Some(GazeProjectionSpec::new(GazeMode::Concat)),
        ModelIdentity::new("rm", 1, "a"),
        &mut rng,
    )
    .unwrap();
    Fixture {
        classes: spec.class_map(),
        spec,
        policy,
        rm,
        gaze_rm,
        table: GazeTable::default(),
        prompts,
    }
}

impl Fixture {
    fn source(&self, scheme: Scheme) -> RewardSource<'_> {
        RewardSource {
            scheme,
            reward_model: if scheme == Scheme::GazeRm { &self.gaze_rm } else { &self.rm },
            gaze_table: Some(&self.table),
            classes: &self.classes,
            temperature: 1.0,
            beta: 0.05,
            center_scores: false,
        }
    }

    fn rollouts(&self, scheme: Scheme, seed: u64) -> Vec<Rollout> {
        let gen = rollout_generation(8, self.spec.eos);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        collect_rollouts(&self.policy, &self.policy, &self.prompts, &self.source(scheme), &gen, &mut rng).unwrap()
    }
}

fn gae_oracle(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = r.len();
    let val = |i: usize| if i < n { v[i] } else { 0.0 };
    (0..n)
        .map(|t| {
            let mut a = 0.0;
            for k in 0..n - t {
                let delta = r[t + k] + gamma * val(t + k + 1) - val(t + k);
                a += (gamma * lambda).powi(k as i32) * delta;
            }
            a
        })
        .collect()
}

#[test]
fn names_round_trip() {
    for s in Scheme::ALL {
        assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
    }
    assert_eq!("grpo".parse::<Algorithm>().unwrap(), Algorithm::Grpo);
    assert!(matches!("dpo".parse::<Algorithm>(), Err(Error::Config(_))));
    assert!(matches!("dense".parse::<Scheme>(), Err(Error::Config(_))));
}

#[test]
fn gae_examples() {
    let r = [0.5, -1.0, 2.0, 0.25];
    let (a, ret) = compute_gae(&r, &[0.0; 4], 1.0, 1.0).unwrap();
    assert_eq!(a, vec![1.75, 1.25, 2.25, 0.25]);
    assert_eq!(ret, a);

    let (a, ret) = compute_gae(&[3.0], &[1.25], 0.9, 0.95).unwrap();
    assert_eq!(a, vec![1.75]);
    assert_eq!(ret, vec![3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let v: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (a, _) = compute_gae(&r, &v, 0.9, 0.95).unwrap();
    for (x, y) in a.iter().zip(gae_oracle(&r, &v, 0.9, 0.95)) {
        assert!((x - y).abs() < 1e-12);
    }

    assert!(matches!(compute_gae(&[], &[], 1.0, 1.0), Err(Error::Usage(_))));
    assert!(compute_gae(&[1.0], &[1.0, 2.0], 1.0, 1.0).is_err());
}

proptest! {
    #[test]
    fn gae_matches_oracle(
        rv in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..=8),
        gamma in 0.0f64..=1.0,
        lambda in 0.0f64..=1.0,
    ) {
        let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
        let (a, ret) = compute_gae(&r, &v, gamma, lambda).unwrap();
        for (t, (x, y)) in a.iter().zip(gae_oracle(&r, &v, gamma, lambda)).enumerate() {
            prop_assert!((x - y).abs() <= 1e-12, "t={} {} vs {}", t, x, y);
            prop_assert_eq!(ret[t], a[t] + v[t]);
        }
    }

    #[test]
    fn group_advantages_shift_and_scale(
        rs in prop::collection::vec(-5.0f64..5.0, 2..8),
        c in -100.0f64..100.0,
        k in 0.1f64..10.0,
    ) {
        let base = group_advantages(&rs, 1e-8, true).unwrap();
        let shifted: Vec<f64> = rs.iter().map(|r| r + c).collect();
        for (a, b) in base.iter().zip(group_advantages(&shifted, 1e-8, true).unwrap()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        let mean = rs.iter().sum::<f64>() / rs.len() as f64;
        let scaled: Vec<f64> = rs.iter().map(|r| mean + k * (r - mean)).collect();
        for (a, b) in base.iter().zip(group_advantages(&scaled, 1e-8, true).unwrap()) {
            prop_assert!(a.signum() == b.signum() || a.abs() < 1e-9);
        }
    }
}

#[test]
fn clip_formula() {
    assert!((clipped_objective(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
    assert_eq!(clipped_objective(1.0, -0.7, 0.2), -0.7);
    assert_eq!(clipped_objective(0.5, -1.0, 0.2), -0.8);
    assert_eq!(clipped_objective(0.5, 1.0, 0.2), 0.5);
}

#[test]
fn group_advantage_examples() {
    let a = group_advantages(&[1.0, 2.0, 3.0], 1e-8, true).unwrap();
    for (x, y) in a.iter().zip([-1.0, 0.0, 1.0]) {
        assert!((x - y).abs() < 1e-7);
    }
    assert_eq!(group_advantages(&[0.4; 4], 1e-8, true).unwrap(), vec![0.0; 4]);
    assert!(group_advantages(&[1.0], 1e-8, true).is_err());
}

#[test]
fn process_advantages_reduce_to_outcome_for_terminal_rewards() {
    let vecs: Vec<TokenRewardVector> = [(1.0, 3), (2.5, 1), (-0.5, 4)]
        .iter()
        .map(|(r, n)| sparse_reward_vector(*r, *n).unwrap())
        .collect();
    let refs: Vec<&TokenRewardVector> = vecs.iter().collect();
    let process = grpo_token_advantages(&refs, &GrpoConfig::default()).unwrap();
    let outcome = grpo_token_advantages(
        &refs,
        &GrpoConfig {
            advantage: GrpoAdvantage::Outcome,
            ..GrpoConfig::default()
        },
    )
    .unwrap();
    assert_eq!(process, outcome);
    assert_eq!(outcome[0].len(), 3);
    assert!(outcome[0].iter().all(|a| *a == outcome[0][0]));
}

#[test]
fn process_advantages_sum_normalised_rewards_to_go() {
    let a = TokenRewardVector {
        rewards: vec![1.0, 3.0],
        total: 4.0,
        layout: RewardLayout::Dense,
    };
    let b = TokenRewardVector {
        rewards: vec![2.0],
        total: 2.0,
        layout: RewardLayout::Dense,
    };
    // pooled rewards [1, 3, 2]: mean 2, sample std 1
    let adv = grpo_token_advantages(&[&a, &b], &GrpoConfig::default()).unwrap();
    let expect = [vec![0.0, 1.0], vec![0.0]];
    for (x, y) in adv.iter().flatten().zip(expect.iter().flatten()) {
        assert!((x - y).abs() < 1e-7, "{adv:?}");
    }
}

#[test]
fn scheme_model_mismatch_is_a_config_error() {
    let f = fixture();
    let mut src = f.source(Scheme::GazeRm);
    src.reward_model = &f.rm;
    assert!(matches!(src.validate(), Err(Error::Config(_))));
    let mut src = f.source(Scheme::Sparse);
    src.reward_model = &f.gaze_rm;
    assert!(matches!(src.validate(), Err(Error::Config(_))));
    let mut src = f.source(Scheme::GazeDistrib);
    src.gaze_table = None;
    assert!(matches!(src.validate(), Err(Error::Config(_))));
    let gen = rollout_generation(4, f.spec.eos);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(collect_rollouts(&f.policy, &f.policy, &f.prompts, &src, &gen, &mut rng).is_err());
}

#[test]
fn rollouts_carry_scheme_rewards() {
    let f = fixture();
    for r in f.rollouts(Scheme::Sparse, 3) {
        let n = r.len();
        assert!(r.raw_rewards.rewards[..n - 1].iter().all(|x| *x == 0.0));
        assert_eq!(r.raw_rewards.rewards[n - 1], r.score);
        assert_eq!((r.logprobs.len(), r.values.len(), r.ref_logprobs.len()), (n, n, n));
        // reference == policy here, so shaping is a no-op
        assert_eq!(r.rewards, r.raw_rewards);
    }
    for r in f.rollouts(Scheme::GazeRm, 3) {
        assert_eq!(*r.raw_rewards.rewards.last().unwrap(), r.score);
    }
    for r in f.rollouts(Scheme::GazeDistrib, 3) {
        assert!((r.raw_rewards.sum() - r.score).abs() <= 1e-9 * r.score.abs().max(1.0));
        assert!(r.raw_rewards.rewards.iter().all(|x| x.signum() == r.score.signum()));
    }
    assert_eq!(f.rollouts(Scheme::GazeDistrib, 8), f.rollouts(Scheme::GazeDistrib, 8));
}

#[test]
fn kl_shaping_uses_the_reference() {
    let f = fixture();
    let reference = PolicyModel::new(dims(), &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let gen = rollout_generation(8, f.spec.eos);
    let src = f.source(Scheme::Sparse);
    let rs = collect_rollouts(&f.policy, &reference, &f.prompts, &src, &gen, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    for r in &rs {
        for i in 0..r.len() {
            let want = r.raw_rewards.rewards[i] - 0.05 * (r.logprobs[i] - r.ref_logprobs[i]);
            assert_eq!(r.rewards.rewards[i], want);
        }
    }
}

#[test]
fn first_epoch_ratios_are_one() {
    let f = fixture();
    for r in f.rollouts(Scheme::Sparse, 5) {
        assert!(ppo_ratios(&f.policy, &r).unwrap().iter().all(|x| *x == 1.0));
    }
}

#[test]
fn zero_advantages_leave_the_policy_alone() {
    let f = fixture();
    let mut rs = f.rollouts(Scheme::Sparse, 6);
    for r in &mut rs {
        r.values = vec![0.0; r.len()];
        r.rewards.rewards = vec![0.0; r.len()];
    }
    let cfg = PpoConfig {
        vf_coef: 0.0,
        ent_coef: 0.0,
        ..PpoConfig::default()
    };
    let mut policy = f.policy.clone();
    let mut opt = Adam::new(AdamConfig::default());
    ppo_update(&mut policy, &mut opt, &rs, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for id in policy.params().ids() {
        assert_eq!(policy.params().get(id).data(), f.policy.params().get(id).data());
    }
}

#[test]
fn ppo_moves_towards_advantaged_tokens() {
    let f = fixture();
    let mut rs = f.rollouts(Scheme::Sparse, 9);
    let r0 = rs[0].clone();
    for (i, r) in rs.iter_mut().enumerate() {
        let sign = if i == 0 { 1.0 } else { -1.0 };
        r.values = vec![0.0; r.len()];
        r.rewards.rewards = vec![sign; r.len()];
    }
    let cfg = PpoConfig {
        vf_coef: 0.0,
        lr: 1e-2,
        epochs: 1,
        minibatch: 64,
        ..PpoConfig::default()
    };
    let mut policy = f.policy.clone();
    let mut opt = Adam::new(AdamConfig::default());
    let stats = ppo_update(&mut policy, &mut opt, &rs, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(stats.loss.is_finite() && stats.entropy > 0.0);
    let before: f64 = r0.logprobs.iter().sum();
    let (after, _) = response_logprobs(&policy, &r0.prompt, &r0.response).unwrap();
    assert!(after.iter().sum::<f64>() > before);
}

#[test]
fn grpo_checks_groups_and_updates() {
    let f = fixture();
    let prompt = f.prompts[0].clone();
    let gen = rollout_generation(8, f.spec.eos);
    let src = f.source(Scheme::GazeDistrib);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let group = collect_rollouts(&f.policy, &f.policy, &vec![prompt; 4], &src, &gen, &mut rng).unwrap();
    let cfg = GrpoConfig::default();
    let mut policy = f.policy.clone();
    let mut opt = Adam::new(AdamConfig::default());

    let mut mixed = group.clone();
    mixed[1].prompt = f.prompts[1].clone();
    assert!(grpo_update(&mut policy, &mut opt, &[mixed], &cfg, &mut rng).is_err());
    assert!(grpo_update(&mut policy, &mut opt, &[group[..3].to_vec()], &cfg, &mut rng).is_err());

    let stats = grpo_update(&mut policy, &mut opt, &[group.clone()], &cfg, &mut rng).unwrap();
    assert!(stats.loss.is_finite());
    assert_eq!(stats.kl, 0.0);
    // value head is untouched by GRPO
    for id in f.policy.value_head_params() {
        assert_eq!(policy.params().get(id).data(), f.policy.params().get(id).data());
    }
    let moved = policy
        .params()
        .ids()
        .any(|id| policy.params().get(id).data() != f.policy.params().get(id).data());
    assert!(moved);
}

#[test]
fn configs_validate() {
    assert!(PpoConfig::default().validate().is_ok());
    assert!(PpoConfig { clip: 1.0, ..PpoConfig::default() }.validate().is_err());
    assert!(PpoConfig { lambda: 1.5, ..PpoConfig::default() }.validate().is_err());
    assert!(GrpoConfig { group_size: 1, ..GrpoConfig::default() }.validate().is_err());
}

#[test]
fn centred_scores_sum_to_zero_over_the_batch() {
    let f = fixture();
    let gen = rollout_generation(8, f.spec.eos);
    for scheme in [Scheme::Sparse, Scheme::GazeDistrib] {
        let mut src = f.source(scheme);
        src.center_scores = true;
        let rs = collect_rollouts(&f.policy, &f.policy, &f.prompts, &src, &gen, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mean = rs.iter().map(|r| r.score).sum::<f64>() / rs.len() as f64;
        let total: f64 = rs.iter().map(|r| r.raw_rewards.sum()).sum();
        assert!(total.abs() < 1e-9, "{total}");
        for r in &rs {
            assert!((r.raw_rewards.total - (r.score - mean)).abs() < 1e-12);
        }
    }
}
