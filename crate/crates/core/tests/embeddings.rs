use disent_core::embeddings::{TwoBranchConfig, TwoBranchNet};
use disent_core::metric_losses::{tuple_clusters_graph, CenterMode};
use disent_core::embeddings::MahalanobisMetric;
use disent_core::nn::Mode;
use disent_tensor::{Axis, Gradients, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn all_zero(grads: &Gradients, prefix: &str) -> bool {
    grads
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
}

fn any_nonzero(grads: &Gradients, prefix: &str) -> bool {
    grads
        .iter()
        .filter(|(name, _)| name.starts_with(prefix))
        .any(|(_, t)| t.data().iter().any(|&v| v != 0.0))
}

#[test]
fn softmax_and_metric_gradients_follow_their_branches() {
    let net = TwoBranchNet::new(TwoBranchConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = net.init(&mut rng);
    let rows = 7;
    let data = (0..rows * 16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let x = Tensor::matrix(rows, 16, data).unwrap();
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..4)).collect();

    // Softmax loss alone.
    let mut g = Graph::new();
    let xin = g.input(x.clone()).unwrap();
    let out = net.forward(&mut g, &params, xin, Mode::Train).unwrap();
    let ce = g.softmax_cross_entropy(out.logits, &labels).unwrap();
    let grads = g.backward(ce).unwrap();
    for prefix in TwoBranchNet::metric_only_prefixes() {
        assert!(all_zero(&grads, prefix), "softmax loss reached {prefix}");
    }
    assert!(any_nonzero(&grads, "head."));
    assert!(any_nonzero(&grads, "trunk."));

    // Metric loss alone.
    let mut g = Graph::new();
    let xin = g.input(x).unwrap();
    let out = net.forward(&mut g, &params, xin, Mode::Train).unwrap();
    let pos = g.slice(out.embedding, Axis::Rows, 0, 3).unwrap();
    let neg = g.slice(out.embedding, Axis::Rows, 3, rows).unwrap();
    let t = g.constant_scalar(0.5).unwrap();
    let loss = tuple_clusters_graph(&mut g, pos, neg, &[true; 3], t, 0.5, &MahalanobisMetric::identity(8), CenterMode::Mined)
        .unwrap();
    assert!(g.scalar(loss).unwrap() > 0.0);
    let grads = g.backward(loss).unwrap();
    assert!(all_zero(&grads, "head."), "metric loss reached the logit head");
    assert!(any_nonzero(&grads, "fc5."));
    assert!(any_nonzero(&grads, "fc2."), "the metric branch reads FC2 through the connecting layer");
}

#[test]
fn embedding_is_bit_stable_across_calls() {
    let net = TwoBranchNet::new(TwoBranchConfig::default());
    let params = net.init(&mut ChaCha8Rng::seed_from_u64(1));
    let rows = vec![vec![0.3; 16], vec![-1.2; 16]];
    assert_eq!(net.embed(&params, &rows).unwrap(), net.embed(&params, &rows).unwrap());
    assert_eq!(net.embed(&params, &rows).unwrap()[0].len(), 8);
}
