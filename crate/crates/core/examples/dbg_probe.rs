use conceptfuse::probe::{train_probe, ProbeTrainConfig};
use conceptfuse::scene::{ConceptRegistry, SceneDomain};
use std::time::Instant;

fn main() {
    let domain = SceneDomain::new(ConceptRegistry::standard());
    let t0 = Instant::now();
    let probe = train_probe(&domain, &ProbeTrainConfig::default(), 1234).unwrap();
    println!("holdout accuracy: {:.4} in {:.1}s", probe.holdout_accuracy, t0.elapsed().as_secs_f64());
    println!("thresholds: {:?}", probe.thresholds.iter().map(|t| (t * 100.0).round() / 100.0).collect::<Vec<_>>());
}
