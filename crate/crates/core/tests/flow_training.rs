use ndarray::{s, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use vcmi::flow::{train_marginal_flow, FlowConfig, FlowModel, Normalization};
use vcmi::ranks::{compute_vector_ranks, empirical_rank, RankSource};

fn normal(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

fn ks_to_normal(col: ArrayView1<f64>) -> f64 {
    let phi = Normal::standard();
    let mut v = col.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0f64, |m, (i, &x)| {
        let c = phi.cdf(x);
        m.max((c - i as f64 / n).abs()).max(((i + 1) as f64 / n - c).abs())
    })
}

#[test]
fn standard_normal_data_stays_normal_and_round_trips() {
    let data = normal(12_000, 2, 1);
    let (train, held_out) = (data.slice(s![..10_000, ..]), data.slice(s![10_000.., ..]));
    let flow = train_marginal_flow(train, &FlowConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let z = flow.encode(train).unwrap();
    // 1% critical value of the one-sample KS statistic.
    let critical = 1.628 / (10_000f64).sqrt();
    for col in z.columns() {
        let ks = ks_to_normal(col);
        assert!(ks < critical, "KS {ks}");
    }
    let back = flow.decode(flow.encode(held_out).unwrap().view()).unwrap();
    let err = (&back - &held_out).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-2, "round trip {err}");
    let summary = flow.summary.as_ref().unwrap();
    assert!(summary.best_val_loss <= summary.initial_val_loss, "{summary:?}");
}

#[test]
fn exponential_marginal_loses_its_skew() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = Array2::from_shape_simple_fn((10_000, 1), || rng.sample::<f64, _>(Exp1));
    let flow = train_marginal_flow(data.view(), &FlowConfig::default(), &mut rng).unwrap();
    let z = flow.encode(data.view()).unwrap();
    let col = z.column(0);
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let m2 = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = col.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    let skew = m3 / m2.powf(1.5);
    assert!(skew.abs() < 0.2, "skewness {skew}");
}

#[test]
fn trained_flow_ranks_sit_on_the_lattice() {
    let n = 10_000;
    let data = normal(n, 4, 4);
    let cfg = FlowConfig { max_epochs: 40, ..FlowConfig::default() };
    let flow = train_marginal_flow(data.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let ranks = compute_vector_ranks(&flow, data.view()).unwrap();
    for col in ranks.values().columns() {
        let mut v = col.to_vec();
        v.sort_by(f64::total_cmp);
        let ks = v.iter().enumerate().fold(0.0f64, |m, (i, &u)| m.max(((i + 1) as f64 / n as f64 - u).abs()));
        assert!(ks <= 1.0 / (n + 1) as f64 + 1e-15, "{ks}");
    }
}

#[test]
fn increasing_flow_leaves_ranks_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let data = Array2::from_shape_simple_fn((2_000, 3), || rng.random::<f64>().powi(3) * 10.0 - 2.0);
    let identity = FlowModel::zero(Normalization::identity(3), 4).unwrap();
    let quantile = Normalization::fit(data.view(), vcmi::flow::NormalizationKind::Quantile, 128).unwrap();
    let monotone = FlowModel::zero(quantile, 4).unwrap();
    let a = compute_vector_ranks(&identity, data.view()).unwrap();
    let b = compute_vector_ranks(&monotone, data.view()).unwrap();
    assert_eq!(a.values(), b.values());
    assert_eq!(a.values(), empirical_rank(data.view(), RankSource::RawData).unwrap().values());
}

#[test]
fn training_is_deterministic() {
    let data = normal(2_000, 2, 7);
    let cfg = FlowConfig { max_epochs: 5, ..FlowConfig::default() };
    let a = train_marginal_flow(data.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let b = train_marginal_flow(data.view(), &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
}
