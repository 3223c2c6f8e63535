use conceptfuse::rng::{randn3, seed_rng};
use conceptfuse::unet::{ForwardHooks, UNetConfig, UNetParams};
use conceptfuse::vocab::{filler_token, shape_token, PromptTokens};
use std::time::Instant;

fn main() {
    let cfg = UNetConfig::default();
    let params = UNetParams::new(cfg, 1).unwrap();
    let mut n_params = 0usize;
    params.for_each_param(&mut |_, s| n_params += s.len());
    println!("params: {n_params}");
    let z = randn3(&mut seed_rng(2), (3, 32, 32));
    let prompt = PromptTokens::new(vec![filler_token("a"), shape_token(0)]).unwrap();
    let hooks = ForwardHooks::default();
    // warmup
    for _ in 0..3 { params.eps_predict(&z, 500, &prompt, &hooks).unwrap(); }
    let n = 20;
    let t0 = Instant::now();
    for _ in 0..n { params.eps_predict(&z, 500, &prompt, &hooks).unwrap(); }
    let fwd = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward: {:.1} ms", fwd * 1e3);
    let t0 = Instant::now();
    for _ in 0..n {
        let (eps, trace) = params.forward_traced(&z, 500, &prompt, &hooks).unwrap();
        let d = eps.mapv(|v| v * 2.0);
        let _ = params.backward(&trace, &d);
    }
    let bwd = t0.elapsed().as_secs_f64() / n as f64;
    println!("forward+backward: {:.1} ms", bwd * 1e3);
}
