use disent_tensor::{
    finite_difference_check, Axis, Graph, NodeId, ParamStore, Tensor, TensorError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-5;
const H: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Values bounded away from zero so relu/leaky-relu kinks are not probed.
fn randn_off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            v.signum() * (v.abs() + 0.1)
        })
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(0.5..2.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

type Builder = fn(&mut Graph, &ParamStore) -> Result<NodeId, TensorError>;

fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId, TensorError> {
    // A fixed random weighting makes every output coordinate matter.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.input(randn(&mut rng, shape[0], shape[1]))?;
    let y = g.mul(x, w)?;
    g.sum(y, None)
}

fn op_cases() -> Vec<(&'static str, Builder, fn(&mut ChaCha8Rng) -> ParamStore)> {
    fn ab(rng: &mut ChaCha8Rng) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a", randn_off_kink(rng, 3, 4));
        p.insert("b", randn_off_kink(rng, 3, 4));
        p.insert("w", randn(rng, 4, 2));
        p.insert("row", randn(rng, 1, 4));
        p.insert("col", randn(rng, 3, 1));
        p.insert("pos", positive(rng, 3, 4));
        p
    }
    vec![
        ("matmul", |g, p| {
            let a = g.param(p, "a")?;
            let w = g.param(p, "w")?;
            let y = g.matmul(a, w)?;
            weighted_sum(g, y, 1)
        }, ab),
        ("add", |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let y = g.add(a, b)?;
            weighted_sum(g, y, 2)
        }, ab),
        ("broadcast_add_row", |g, p| {
            let a = g.param(p, "a")?;
            let r = g.param(p, "row")?;
            let y = g.broadcast_add(a, r)?;
            let y = g.square(y)?;
            weighted_sum(g, y, 3)
        }, ab),
        ("broadcast_add_col", |g, p| {
            let a = g.param(p, "a")?;
            let c = g.param(p, "col")?;
            let y = g.broadcast_add(a, c)?;
            let y = g.square(y)?;
            weighted_sum(g, y, 4)
        }, ab),
        ("mul", |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let y = g.mul(a, b)?;
            weighted_sum(g, y, 5)
        }, ab),
        ("mul_broadcast", |g, p| {
            let a = g.param(p, "a")?;
            let r = g.param(p, "row")?;
            let y = g.mul(a, r)?;
            weighted_sum(g, y, 6)
        }, ab),
        ("relu", |g, p| {
            let a = g.param(p, "a")?;
            let y = g.relu(a)?;
            weighted_sum(g, y, 7)
        }, ab),
        ("leaky_relu", |g, p| {
            let a = g.param(p, "a")?;
            let y = g.leaky_relu(a, 0.2)?;
            weighted_sum(g, y, 8)
        }, ab),
        ("sigmoid", |g, p| {
            let a = g.param(p, "a")?;
            let y = g.sigmoid(a)?;
            weighted_sum(g, y, 9)
        }, ab),
        ("tanh", |g, p| {
            let a = g.param(p, "a")?;
            let y = g.tanh(a)?;
            weighted_sum(g, y, 10)
        }, ab),
        ("exp", |g, p| {
            let a = g.param(p, "a")?;
            let y = g.exp(a)?;
            weighted_sum(g, y, 11)
        }, ab),
        ("log", |g, p| {
            let a = g.param(p, "pos")?;
            let y = g.log(a)?;
            weighted_sum(g, y, 12)
        }, ab),
        ("square", |g, p| {
            let a = g.param(p, "a")?;
            let y = g.square(a)?;
            weighted_sum(g, y, 13)
        }, ab),
        ("mean_all", |g, p| {
            let a = g.param(p, "a")?;
            let a2 = g.square(a)?;
            g.mean(a2, None)
        }, ab),
        ("mean_rows", |g, p| {
            let a = g.param(p, "a")?;
            let y = g.mean(a, Some(Axis::Rows))?;
            let y = g.square(y)?;
            weighted_sum(g, y, 14)
        }, ab),
        ("sum_cols", |g, p| {
            let a = g.param(p, "a")?;
            let y = g.sum(a, Some(Axis::Cols))?;
            let y = g.square(y)?;
            weighted_sum(g, y, 15)
        }, ab),
        ("concat_rows", |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let y = g.concat(&[a, b], Axis::Rows)?;
            let y = g.square(y)?;
            weighted_sum(g, y, 16)
        }, ab),
        ("concat_cols", |g, p| {
            let a = g.param(p, "a")?;
            let c = g.param(p, "col")?;
            let y = g.concat(&[c, a, c], Axis::Cols)?;
            let y = g.square(y)?;
            weighted_sum(g, y, 17)
        }, ab),
        ("slice", |g, p| {
            let a = g.param(p, "a")?;
            let y = g.slice(a, Axis::Cols, 1, 3)?;
            let y = g.slice(y, Axis::Rows, 1, 3)?;
            let y = g.square(y)?;
            weighted_sum(g, y, 18)
        }, ab),
        ("softmax_cross_entropy", |g, p| {
            let a = g.param(p, "a")?;
            g.softmax_cross_entropy(a, &[0, 3, 1])
        }, ab),
        ("binary_cross_entropy", |g, p| {
            let a = g.param(p, "a")?;
            let t = Tensor::matrix(3, 4, vec![1., 0., 1., 1., 0., 0., 1., 0., 0.3, 1., 0., 0.5]).unwrap();
            g.binary_cross_entropy(a, &t)
        }, ab),
        ("squared_error", |g, p| {
            let a = g.param(p, "a")?;
            let t = Tensor::full(&[3, 4], 0.25);
            g.squared_error(a, &t)
        }, ab),
    ]
}

#[test]
fn every_op_matches_finite_differences_at_ten_points() {
    for (name, build, init) in op_cases() {
        let mut worst: f64 = 0.0;
        for point in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
            let params = init(&mut rng);
            let report = finite_difference_check(build, &params, H).unwrap();
            worst = worst.max(report.max_rel_error);
        }
        assert!(worst <= TOL, "{name}: max relative error {worst:e}");
    }
}

fn mlp_params(rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w1", randn(rng, 5, 7));
    p.insert("b1", randn(rng, 1, 7));
    p.insert("w2", randn(rng, 7, 3));
    p.insert("b2", randn(rng, 1, 3));
    p
}

fn mlp_loss(
    g: &mut Graph,
    p: &ParamStore,
    x: &Tensor,
    labels: &[usize],
) -> Result<NodeId, TensorError> {
    let x = g.input(x.clone())?;
    let w1 = g.param(p, "w1")?;
    let b1 = g.param(p, "b1")?;
    let w2 = g.param(p, "w2")?;
    let b2 = g.param(p, "b2")?;
    let h = g.matmul(x, w1)?;
    let h = g.broadcast_add(h, b1)?;
    let h = g.tanh(h)?;
    let z = g.matmul(h, w2)?;
    let z = g.broadcast_add(z, b2)?;
    g.softmax_cross_entropy(z, labels)
}

#[test]
fn two_layer_mlp_softmax_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = mlp_params(&mut rng);
    let x = randn(&mut rng, 6, 5);
    let labels = [0, 1, 2, 2, 1, 0];
    let r = finite_difference_check(|g, p| mlp_loss(g, p, &x, &labels), &params, H).unwrap();
    assert!(r.max_rel_error <= TOL, "{r:?}");
}

#[test]
fn batch_mean_gradient_is_mean_of_example_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = mlp_params(&mut rng);
    let x = randn(&mut rng, 8, 5);
    let labels = [0, 1, 2, 2, 1, 0, 1, 2];

    let mut g = Graph::new();
    let out = mlp_loss(&mut g, &params, &x, &labels).unwrap();
    let batch = g.backward(out).unwrap();

    for (name, total) in batch.iter() {
        let mut acc = vec![0.0; total.numel()];
        for i in 0..labels.len() {
            let xi = Tensor::row(x.row_slice(i)).unwrap();
            let mut gi = Graph::new();
            let oi = mlp_loss(&mut gi, &params, &xi, &labels[i..=i]).unwrap();
            let grads = gi.backward(oi).unwrap();
            for (a, v) in acc.iter_mut().zip(grads.get(name).unwrap().data()) {
                *a += v / labels.len() as f64;
            }
        }
        for (a, b) in acc.iter().zip(total.data()) {
            assert!((a - b).abs() <= 1e-10, "{name}: {a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_and_backward_are_bit_identical(seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = mlp_params(&mut rng);
            let x = randn(&mut rng, 4, 5);
            let mut g = Graph::new();
            let out = mlp_loss(&mut g, &params, &x, &[0, 1, 2, 0]).unwrap();
            let v = g.scalar(out).unwrap();
            let grads: Vec<u64> = g
                .backward(out)
                .unwrap()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect();
            (v.to_bits(), grads)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip(data in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
        let mut p = ParamStore::new();
        p.insert("t", Tensor::row(&data).unwrap());
        let back = ParamStore::from_json(&p.to_json()).unwrap();
        prop_assert_eq!(back, p);
    }
}
