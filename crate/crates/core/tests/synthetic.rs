use pk_timellm::baselines::seasonal_naive;
use pk_timellm::series::ScalerParams;
use pk_timellm::synth::{gen_world, oracle_forecast, WorldConfig};

#[test]
fn oracle_error_matches_noise_level() {
    let world = gen_world(&WorldConfig {
        n_days: 12_000,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let n = world.ct.len();
    let split = n / 2;
    let scaler = ScalerParams::fit(&world.ct.values()[..split]).unwrap();
    let pred = oracle_forecast(&world, split - 1, n - split - 1).unwrap();
    let mse: f64 = pred
        .iter()
        .zip(&world.ct.values()[split..])
        .map(|(p, y)| (scaler.apply_one(*p) - scaler.apply_one(*y)).powi(2))
        .sum::<f64>()
        / pred.len() as f64;
    // Rounding the count adds a uniform(-0.5, 0.5) error on top of the noise.
    let sigma = world.config.noise_std;
    let want = (sigma * sigma + 1.0 / 12.0) / (scaler.std * scaler.std);
    assert!((mse / want - 1.0).abs() < 0.05, "oracle {mse} vs {want}");
}

#[test]
fn oracle_beats_seasonal_naive() {
    let world = gen_world(&WorldConfig::default()).unwrap();
    let y = world.ct.values();
    let (mut oracle, mut naive) = (0.0, 0.0);
    for t in 30..y.len() - 8 {
        let o = oracle_forecast(&world, t, 7).unwrap();
        let s = seasonal_naive(&y[t - 27..=t], 7).unwrap();
        for h in 0..7 {
            oracle += (o[h] - y[t + 1 + h]).powi(2);
            naive += (s[h] - y[t + 1 + h]).powi(2);
        }
    }
    assert!(oracle < 0.1 * naive, "oracle {oracle} vs naive {naive}");
}
