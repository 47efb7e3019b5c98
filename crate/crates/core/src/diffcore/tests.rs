use proptest::prelude::*;

use super::gradcheck::{check_gradients, RandomGraph};
use super::*;
use crate::Error;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.0, 0.0]));
    let p = g.softmax(x);
    assert_eq!(g.value(p), &[0.5, 0.5]);
}

#[test]
fn matmul_by_identity() {
    let mut g = Graph::new();
    let eye = g.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.input(Tensor::matrix(2, 2, vec![1.5, -2.0, 3.25, 4.0]).unwrap());
    let out = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(out), &[1.5, -2.0, 3.25, 4.0]);
    assert_eq!(g.shape(out), &[2, 2]);
}

#[test]
fn gelu_matches_high_precision_erf_form() {
    // mpmath, 40 digits: x/2 * (1 + erf(x / sqrt(2)))
    let cases = [
        (1.0, 0.841_344_746_068_542_9),
        (-0.5, -0.154_268_769_362_993_45),
        (2.5, 2.484_475_836_685_559_7),
    ];
    for (x, expected) in cases {
        assert!((gelu(x) - expected).abs() < 1e-15, "gelu({x}) = {}", gelu(x));
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = g.input(Tensor::zeros(&[4]));
    let msg = g.add(a, c).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4]"), "{msg}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.3, -1.0, 7.0]));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_mean_square() {
    let build = |g: &mut Graph<'_>, v: &[Var]| -> crate::Result<Var> {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.mean(sq))
    };
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    let root = build(&mut g, &[x]).unwrap();
    let grads = g.backward(root).unwrap();
    assert!(close(grads.wrt(x).unwrap(), &[1.0, 2.0], 1e-15));

    let fd = check_gradients(&[Tensor::vector(vec![1.0, 2.0])], 1e-5, build).unwrap();
    assert!(fd.max_rel_error < 1e-8, "{fd:?}");
}

#[test]
fn constant_root_leaves_all_grads_zero() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    let _unused = g.scale(x, 3.0);
    let c = g.constant(Tensor::scalar(4.0));
    let grads = g.backward(c).unwrap();
    assert_eq!(grads.wrt_or_zero(x, 2), vec![0.0, 0.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(Error::Usage(_))));
}

#[test]
fn embedding_rejects_out_of_range_id() {
    let mut g = Graph::new();
    let t = g.input(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.embedding(t, &[0, 3]), Err(Error::Usage(_))));
}

#[test]
fn causal_mask_blocks_future_positions() {
    let mut g = Graph::new();
    let s = g.input(Tensor::zeros(&[3, 3]));
    let m = g.causal_mask(s).unwrap();
    let p = g.softmax(m);
    let v = g.value(p);
    assert!(close(&v[0..3], &[1.0, 0.0, 0.0], 0.0));
    assert!(close(&v[3..6], &[0.5, 0.5, 0.0], 1e-15));
}

#[test]
fn clamp_and_minimum_route_gradients() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![0.5, 1.0, 1.5]));
    let y = g.input(Tensor::vector(vec![1.0, 0.0, 2.0]));
    let c = g.clamp(x, 0.8, 1.2);
    assert_eq!(g.value(c), &[0.8, 1.0, 1.2]);
    let m = g.minimum(c, y).unwrap();
    assert_eq!(g.value(m), &[0.8, 0.0, 1.2]);
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    // only the middle element of x is inside the clamp range, but it loses the minimum
    assert_eq!(grads.wrt(x).unwrap(), &[0.0, 0.0, 0.0]);
    assert_eq!(grads.wrt(y).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn random_graphs_pass_finite_difference_check() {
    for seed in 0..20 {
        let rg = RandomGraph::sample(seed, 200);
        let res = rg.check(1e-5).unwrap();
        assert!(res.max_rel_error < 1e-4, "seed {seed}: {res:?}");
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let rg = RandomGraph::sample(7, 200);
    let run = || {
        let mut g = Graph::new();
        let vars: Vec<Var> = rg.inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = rg.build(&mut g, &vars).unwrap();
        let grads = g.backward(root).unwrap();
        vars.iter()
            .map(|v| grads.wrt_or_zero(*v, g.value(*v).len()))
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

fn single_param_store(value: f64, grad: Option<f64>) -> (ParamStore, ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("theta", Tensor::vector(vec![value]));
    if let Some(g) = grad {
        store.set_grad(id, vec![g]);
    }
    (store, id)
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let (mut store, id) = single_param_store(0.7, Some(0.0));
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut store).unwrap();
    assert_eq!(store.get(id).data(), &[0.7]);
}

#[test]
fn adam_first_step_moves_by_lr() {
    let (mut store, id) = single_param_store(0.0, Some(1.0));
    let mut adam = Adam::new(AdamConfig {
        lr: 0.1,
        betas: (0.9, 0.999),
        eps: 1e-8,
    });
    adam.step(&mut store).unwrap();
    let delta = store.get(id).data()[0];
    // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps)
    assert!((delta - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15, "{delta}");
}

/// Standalone scalar Adam written straight from the recurrences.
fn scalar_adam(theta: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
    let (mut th, mut m, mut v) = (theta, 0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    th
}

#[test]
fn adam_two_steps_match_scalar_reference() {
    let (mut store, id) = single_param_store(0.25, Some(0.6));
    let cfg = AdamConfig {
        lr: 0.05,
        betas: (0.8, 0.99),
        eps: 1e-8,
    };
    let mut adam = Adam::new(cfg);
    adam.step(&mut store).unwrap();
    store.set_grad(id, vec![0.6]);
    adam.step(&mut store).unwrap();
    let expected = scalar_adam(0.25, &[0.6, 0.6], 0.05, 0.8, 0.99, 1e-8);
    assert!((store.get(id).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn adam_requires_gradients() {
    let (mut store, _) = single_param_store(1.0, None);
    let mut adam = Adam::new(AdamConfig::default());
    assert!(matches!(adam.step(&mut store), Err(Error::Usage(_))));
}

#[test]
fn snapshot_header_and_round_trip() {
    let mut store = ParamStore::new();
    store.add("w", Tensor::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.0]).unwrap());
    store.add("scale", Tensor::scalar(0.125));
    let bytes = snapshot::encode(store.named());
    assert_eq!(&bytes[0..4], b"GRLF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    // first record: name length 1, 'w', rank 2
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    assert_eq!(bytes[12], b'w');
    assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 2);

    let records = snapshot::decode(&bytes).unwrap();
    let mut other = store.clone();
    other.get_mut(ParamId(0)).data_mut()[0] = 99.0;
    other.load_named(&records).unwrap();
    assert_eq!(other.get(ParamId(0)), store.get(ParamId(0)));
    assert_eq!(other.get(ParamId(1)).shape(), &[] as &[usize]);

    assert!(snapshot::decode(b"NOPE\x01\0\0\0").is_err());
    assert!(snapshot::decode(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn param_leaves_accumulate_into_store() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::vector(vec![2.0, 3.0]));
    let grads = {
        let mut g = Graph::with_params(&store);
        let wv = g.param(w);
        let again = g.param(w);
        assert_eq!(wv, again);
        let sq = g.mul(wv, wv).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap()
    };
    store.accumulate(&grads);
    store.accumulate(&grads);
    assert_eq!(store.grad(w).unwrap(), &[8.0, 12.0]);
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_normalised(
        xs in proptest::collection::vec(-30.0f64..30.0, 1..40)
    ) {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(xs));
        let p = g.softmax(x);
        let v = g.value(p);
        prop_assert!(v.iter().all(|p| *p > 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}
