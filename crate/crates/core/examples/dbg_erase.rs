use conceptfuse::probe::{crop_window, train_probe, ProbeTrainConfig};
use conceptfuse::scene::*;

fn main() {
    let domain = SceneDomain::new(ConceptRegistry::standard());
    let cfg = ProbeTrainConfig { crops_per_class: 200, steps: 1200, min_holdout_accuracy: 0.92, ..Default::default() };
    let probe = train_probe(&domain, &cfg, 77).unwrap();
    let spec = SceneSpec {
        objects: vec![
            ObjectSpec { shape: ShapeClass::Circle, style: StyleId::Generic, center: (0.27, 0.3), radius: 0.18 },
            ObjectSpec { shape: ShapeClass::Triangle, style: StyleId::Generic, center: (0.72, 0.7), radius: 0.18 },
        ],
        background: BgSpec { class: BgClass::Plain, style: StyleId::Generic },
    };
    let scene = domain.render_scene(&spec, 4242).unwrap();
    let mut erased = scene.image.clone();
    for y in 0..32 { for x in 0..32 {
        if scene.gt_masks[1][[y, x]] != 0 {
            for c in 0..3 { erased[[c, y, x]] = erased[[c, 0, 0]]; }
        }
    }}
    for size in [12usize, 16, 20, 24] {
        let mut y0 = 0;
        while y0 + size <= 32 {
            let mut x0 = 0;
            while x0 + size <= 32 {
                let crop = crop_window(&erased, y0, x0, size);
                let (arg, probs) = probe.classify(&crop);
                let name = format!("{:?}", probe.classes[arg]);
                if name.contains("Triangle") && probs[arg] >= probe.thresholds[arg] {
                    println!("size {size} window ({y0},{x0}) -> {name} p={:.3} thr={:.3}", probs[arg], probe.thresholds[arg]);
                }
                x0 += 4;
            }
            y0 += 4;
        }
    }
    println!("done");
}
