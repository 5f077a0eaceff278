use csl::data::{generate, DataConfig, Regime};
use csl::trainer::{train, TrainConfig};

#[test]
fn loss_falls_over_the_first_fifty_steps() {
    let (train_set, _) = generate(&DataConfig::for_regime(Regime::Vi)).unwrap();
    let (_, log) = train(&TrainConfig::default(), &train_set, Some(50), None).unwrap();
    assert_eq!(log.len(), 50);
    let mean = |s: &[csl::trainer::StepLog]| s.iter().map(|r| r.l_total).sum::<f64>() / s.len() as f64;
    let (early, late) = (mean(&log[..10]), mean(&log[40..]));
    assert!(late < early, "steps 1-10 {early:.4}, steps 41-50 {late:.4}");
}
