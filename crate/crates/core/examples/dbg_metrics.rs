use conceptfuse::dataset::DatasetKind;
use conceptfuse::metrics::prompt_elements;
use conceptfuse::probe::{crop_window, train_probe, ProbeClass, ProbeTrainConfig};
use conceptfuse::scene::{ConceptRegistry, SceneDomain};

fn main() {
    let domain = SceneDomain::new(ConceptRegistry::standard());
    let cfg = ProbeTrainConfig { crops_per_class: 140, steps: 700, ..Default::default() };
    let probe = train_probe(&domain, &cfg, 77).unwrap();
    println!("probe acc {:.3}", probe.holdout_accuracy);
    let scenes = domain.make_dataset(DatasetKind::Base, None, 12, 31).unwrap();
    for (si, scene) in scenes.iter().enumerate() {
        let (shapes, bg) = prompt_elements(&scene.prompt);
        let mut claims: Vec<(usize, usize, usize, f64)> = Vec::new(); // y0,x0,class,prob
        let size = 16; let stride = 4;
        let mut y0 = 0;
        while y0 + size <= 32 {
            let mut x0 = 0;
            while x0 + size <= 32 {
                let crop = crop_window(&scene.image, y0, x0, size);
                let (arg, probs) = probe.classify(&crop);
                if probs[arg] >= probe.thresholds[arg] {
                    claims.push((y0, x0, arg, probs[arg]));
                }
                x0 += stride;
            }
            y0 += stride;
        }
        let det: Vec<String> = claims.iter().map(|(y,x,c,p)| format!("({y},{x}) {:?} {p:.2}", probe.classes[*c])).collect();
        println!("scene {si}: prompt={} shapes={shapes:?} bg={bg:?}", scene.prompt.describe());
        println!("  claims: {}", det.join("; "));
    }
}
