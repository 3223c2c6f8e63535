use conceptfuse::dataset::DatasetKind;
use conceptfuse::masks::{segment_concepts, SegmentResult};
use conceptfuse::scene::{ConceptRegistry, SceneDomain, ShapeClass};

fn main() {
    let domain = SceneDomain::new(ConceptRegistry::standard());
    let scenes = domain.make_dataset(DatasetKind::Base, None, 100, 2024).unwrap();
    let mut by_count = std::collections::BTreeMap::<usize, Vec<f64>>::new();
    let mut nf = 0;
    for scene in &scenes {
        let words: Vec<ShapeClass> = scene.spec.objects.iter().map(|o| o.shape).collect();
        let segs = segment_concepts(&scene.image, &words, None).unwrap();
        // check geometric overlap in the scene
        let n = scene.spec.objects.len();
        let mut overlap = false;
        for i in 0..n { for j in i+1..n {
            let a = &scene.spec.objects[i]; let b = &scene.spec.objects[j];
            let d = ((a.center.0-b.center.0).powi(2)+(a.center.1-b.center.1).powi(2)).sqrt();
            if d < a.radius + b.radius { overlap = true; }
        }}
        for (i, seg) in segs.iter().enumerate() {
            let iou = match seg.mask() {
                Some(m) => {
                    let mut inter = 0usize; let mut union = 0usize;
                    for (a, b) in m.iter().zip(scene.gt_masks[i].iter()) {
                        inter += (*a != 0 && *b != 0) as usize;
                        union += (*a != 0 || *b != 0) as usize;
                    }
                    inter as f64 / union.max(1) as f64
                }
                None => { nf += 1; 0.0 }
            };
            let key = if overlap { 100 + n } else { n };
            by_count.entry(key).or_default().push(iou);
        }
    }
    for (k, v) in &by_count {
        let mut v = v.clone();
        v.sort_by(|a,b| a.partial_cmp(b).unwrap());
        let med = v[v.len()/2];
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        println!("group {k} (100+n = overlapping): n={} median={med:.3} mean={mean:.3}", v.len());
    }
    println!("not found: {nf}");
}
