use r2n2::problems::{gen_linear_dataset, BuiltinMatrix, LinearDatasetParams};
use r2n2::training::{train, LossSpec, TrainOptions, WeightRule};
use r2n2::R2N2Config;

fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    xs.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[test]
fn single_step_linear_loss_trends_down() {
    let params = LinearDatasetParams {
        matrices: vec![BuiltinMatrix::new(1).unwrap()],
        samples: 60,
        ..Default::default()
    };
    let ds = gen_linear_dataset(&params, 4).unwrap();
    let opts = TrainOptions {
        epochs: 1500,
        seed: 4,
        threads: Some(1),
        ..Default::default()
    };
    let run = train(&ds, &R2N2Config::direct(4), &LossSpec::residual(1, WeightRule::Uniform), &opts).unwrap();
    assert!(!run.diverged);
    let losses: Vec<f64> = run.history.iter().map(|r| r.train_loss).collect();
    let avg = moving_average(&losses, 100);
    for w in avg.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
    }
    assert!(avg.last().unwrap() < &(0.5 * avg[0]));

    let again = train(&ds, &R2N2Config::direct(4), &LossSpec::residual(1, WeightRule::Uniform), &opts).unwrap();
    assert_eq!(again.params.to_flat(), run.params.to_flat());
    assert_eq!(again.history, run.history);
}
