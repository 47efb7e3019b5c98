use gazelab_core::evalkit::{steps_to_convergence, TrainingCurve};
use gazelab_core::gaze::GazeTable;
use gazelab_core::models::{GazeMode, ModelDims, ModelIdentity, PolicyModel, RewardModel};
use gazelab_core::rewardlab::{load_pairs, save_pairs, train_reward_model, RewardTrainConfig};
use gazelab_core::rltrain::{Algorithm, Scheme};
use gazelab_core::synthenv::{generate_preference_pairs, make_prompt_set, TaskSpec, UniformSampler};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelDims {
    ModelDims {
        d_model: 16,
        n_blocks: 1,
        max_len: 16,
        ..ModelDims::default()
    }
}

#[test]
fn pairs_survive_disk_and_train_both_reward_models() {
    let spec = TaskSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let prompts = make_prompt_set(&spec, 120, &mut rng).unwrap();
    let mut pairs = generate_preference_pairs(&spec, &prompts, &UniformSampler::new(&spec), 8, &mut rng).unwrap();
    let table = GazeTable::default();
    let classes = spec.class_map();
    for p in &mut pairs {
        p.attach_gaze(&table, &classes, None).unwrap();
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.tsv");
    save_pairs(&pairs, &path).unwrap();
    let back = load_pairs(&path).unwrap();
    assert_eq!(back, pairs);

    let cfg = RewardTrainConfig {
        dims: small(),
        epochs: 2,
        ..RewardTrainConfig::default()
    };
    let (train, held) = back.split_at(90);
    for mode in [None, Some(GazeMode::Add), Some(GazeMode::Concat)] {
        let t = train_reward_model(train, held, &cfg, mode, ModelIdentity::new("rm", 21, "train"), &mut rng).unwrap();
        assert_eq!(t.model.gaze_mode(), mode);
        assert!((0.0..=1.0).contains(&t.heldout_accuracy));
        assert!(t.final_loss.is_finite());

        let saved = dir.path().join("rm.grlf");
        t.model.save(&saved).unwrap();
        let loaded = RewardModel::load(&saved).unwrap();
        let p = &held[0];
        let gaze = mode.map(|_| p.chosen_gaze.as_deref().unwrap());
        assert_eq!(
            loaded.score(&p.chosen_sequence(), gaze).unwrap(),
            t.model.score(&p.chosen_sequence(), gaze).unwrap()
        );
    }
}

#[test]
fn policy_checkpoints_reproduce_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let policy = PolicyModel::new(small(), &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.grlf");
    policy.save(&path).unwrap();
    let loaded = PolicyModel::load(&path).unwrap();
    let tokens = [1, 7, 3, 9, 12];
    assert_eq!(loaded.forward(&tokens).unwrap(), policy.forward(&tokens).unwrap());
}

#[test]
fn convergence_on_a_known_curve() {
    // ramps to 1.0 by step 10, then stays flat
    let points: Vec<(usize, f64)> = (0..=30).map(|s| (s, (s as f64 / 10.0).min(1.0))).collect();
    let curve = TrainingCurve::new("validation_score", Scheme::GazeDistrib, Algorithm::Ppo, 0)
        .with_points(points)
        .unwrap();
    // trailing window 5: (0.8+0.9+1+1+1)/5 = 0.94 at step 12, (0.9+1+1+1+1)/5 = 0.98 at step 13
    assert_eq!(steps_to_convergence(&curve, 0.95, 5).unwrap(), Some(13));
}
