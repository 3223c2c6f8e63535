//! Denoiser training: the score-matching objective with uniformly sampled
//! timesteps and one Adam update per call.

use crate::error::{CoreError, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::split_rng;
use crate::schedule::NoiseSchedule;
use crate::unet::{ForwardHooks, UNetParams};
use crate::vocab::PromptTokens;
use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;

/// One optimizer step on a batch of (image, prompt) pairs.
///
/// Samples t uniformly in [1, T] and eps from a unit Gaussian per sample,
/// forms x_t through the schedule, and minimizes the batch mean squared
/// error between predicted and sampled noise. `mask` restricts which
/// parameters receive updates (all when it returns true).
///
/// Returns the loss; `params` and `opt` are updated in place.
pub fn train_step(
    params: &mut UNetParams,
    batch: &[(Array3<f64>, PromptTokens)],
    schedule: &NoiseSchedule,
    opt: &mut AdamState,
    adam: &AdamConfig,
    mask: &dyn Fn(&str) -> bool,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::Validation("train_step requires a nonempty batch".into()));
    }
    let mut rng = split_rng(seed, "train-step", 0);
    let mut total_loss = 0.0;
    let mut grads = params.zeros_like();
    let n = batch.len();
    let hooks = ForwardHooks::default();
    for (image, prompt) in batch {
        let t = rng.gen_range(1..=schedule.t_train);
        let eps: Array3<f64> =
            Array3::from_shape_simple_fn(image.dim(), || {
                rng.sample(StandardNormal)
            });
        let x_t = schedule.add_noise(image, &eps, t);
        let (pred, trace) = params.forward_traced(&x_t, t, prompt, &hooks)?;
        let diff = &pred - &eps;
        let numel = diff.len() as f64;
        let loss = diff.mapv(|v| v * v).sum() / numel;
        if !loss.is_finite() {
            return Err(CoreError::Numerical(format!(
                "non-finite loss at t={t}: |x_t|={:.3e}, |pred|={:.3e}",
                x_t.mapv(f64::abs).sum(),
                pred.mapv(f64::abs).sum()
            )));
        }
        total_loss += loss;
        // d(loss)/d(pred) for the batch-mean MSE
        let d_eps = diff.mapv(|v| 2.0 * v / (numel * n as f64));
        let g = params.backward(&trace, &d_eps);
        add_params(&mut grads, &g);
    }
    opt.update(params, &grads, adam, mask);
    Ok(total_loss / n as f64)
}

pub(crate) fn add_params(acc: &mut UNetParams, g: &UNetParams) {
    let gm = g.to_map();
    acc.for_each_param_mut(&mut |name, s| {
        let (_, src) = &gm[name];
        for (a, b) in s.iter_mut().zip(src.iter()) {
            *a += b;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetKind;
    use crate::scene::{ConceptRegistry, SceneDomain};
    use crate::schedule::ScheduleConfig;
    use crate::unet::UNetConfig;
    use crate::vocab::{filler_token, shape_token};

    #[test]
    fn empty_batch_rejected() {
        let mut p = UNetParams::new(UNetConfig::tiny(), 0).unwrap();
        let schedule = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let mut opt = AdamState::new();
        let err = train_step(
            &mut p,
            &[],
            &schedule,
            &mut opt,
            &AdamConfig::default(),
            &|_| true,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::Validation(_)));
    }

    /// Forcing the model output to equal the sampled noise gives loss 0 and
    /// zero gradient: checked via the quadratic structure of the MSE instead
    /// of rigging the network: loss and gradient both vanish as pred -> eps.
    #[test]
    fn perfect_prediction_zero_loss_zero_grad() {
        // a model that is the identity on eps is simulated by feeding the
        // loss path directly: diff = 0 -> loss = 0, d_eps = 0 -> grads = 0
        let p = UNetParams::new(UNetConfig::tiny(), 3).unwrap();
        let z = crate::rng::randn3(&mut crate::rng::seed_rng(4), (3, 8, 8));
        let prompt = PromptTokens::new(vec![filler_token("a"), shape_token(1)]).unwrap();
        let (pred, trace) = p.forward_traced(&z, 100, &prompt, &ForwardHooks::default()).unwrap();
        let eps = pred.clone(); // as if the sampled noise equaled the prediction
        let diff = &pred - &eps;
        assert_eq!(diff.mapv(|v| v * v).sum(), 0.0);
        let grads = p.backward(&trace, &diff);
        let mut all_zero = true;
        grads.for_each_param(&mut |_, s| {
            if s.iter().any(|&v| v != 0.0) {
                all_zero = false;
            }
        });
        assert!(all_zero);
    }

    /// 200 steps on a single scene: the 10-step moving average of the loss
    /// strictly decreases from the first window to the last.
    #[test]
    fn smoke_training_reduces_loss() {
        let domain = SceneDomain::new(ConceptRegistry::default());
        let scenes = domain.make_dataset(DatasetKind::Base, None, 1, 500).unwrap();
        let batch: Vec<_> = scenes.iter().map(|s| (s.image.clone(), s.prompt.clone())).collect();
        // train at the scene's native 32x32 with the tiny channel plan
        let cfg = UNetConfig { img_size: 32, ..UNetConfig::tiny() };
        let mut p = UNetParams::new(cfg, 7).unwrap();
        let schedule = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let mut opt = AdamState::new();
        let adam = AdamConfig::with_lr(2e-3);
        let mut losses = Vec::new();
        for step in 0..200 {
            let loss = train_step(
                &mut p,
                &batch,
                &schedule,
                &mut opt,
                &adam,
                &|_| true,
                1000 + step as u64,
            )
            .unwrap();
            losses.push(loss);
        }
        let avg = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
        let first = avg(&losses[0..10]);
        let last = avg(&losses[190..200]);
        assert!(
            last < first,
            "loss did not decrease: first window {first:.4}, last window {last:.4}"
        );
    }
}
