use disent_core::probe::{probe_codes, train_logistic_probe, DEFAULT_L2, DEFAULT_PROBE_ITERS};
use disent_core::synthdata::{gen_factor_dataset, random_split, FactorSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn shuffled_labels_stay_near_chance() {
    let spec = FactorSpec::default();
    let ds = gen_factor_dataset(&spec, 2000, 4).unwrap();
    let (train, test) = random_split(ds.len(), 0.5, 4);
    let x = |idx: &[usize]| ds.features(idx);
    let chance = 1.0 / spec.num_classes as f64;
    for shuffle in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        let mut labels: Vec<usize> = ds.samples.iter().map(|s| s.class_y).collect();
        labels.shuffle(&mut rng);
        let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let acc = train_logistic_probe(&x(&train), &ytr, DEFAULT_L2, DEFAULT_PROBE_ITERS)
            .unwrap()
            .accuracy(&x(&test), &yte);
        assert!((acc - chance).abs() <= 0.05, "shuffle {shuffle}: {acc}");
    }
}

#[test]
fn oracle_class_encoder_is_perfect_for_y_and_blind_to_s() {
    let spec = FactorSpec::default();
    let ds = gen_factor_dataset(&spec, 2000, 8).unwrap();
    let (train, test) = random_split(ds.len(), 0.25, 8);
    let onehot = |idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| (0..spec.num_classes).map(|k| f64::from(u8::from(ds.samples[i].class_y == k))).collect())
            .collect()
    };
    // l carries noise only.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut noise = |idx: &[usize]| -> Vec<Vec<f64>> { idx.iter().map(|_| vec![rng.random::<f64>()]).collect() };
    let (ntr, nte) = (noise(&train), noise(&test));
    let r = probe_codes(&ds, &train, &test, (&onehot(&train), &onehot(&test)), (&ntr, &nte)).unwrap();
    assert_eq!(r.acc_y_given_d, 1.0);
    assert!((r.acc_s_given_d - r.chance_s).abs() <= 0.05, "{r:?}");
    for v in [r.acc_y_given_d, r.acc_s_given_d, r.acc_y_given_l, r.acc_s_given_l, r.chance_s, r.chance_y] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(probe_codes(&ds, &train, &train, (&onehot(&train), &onehot(&train)), (&ntr, &ntr)).is_err());
}
