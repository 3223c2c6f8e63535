//! Standard guided DDIM sampling with a negative prompt in place of the
//! unconditional branch.

use crate::error::{CoreError, Result};
use crate::rng::{randn3, split_rng};
use crate::schedule::NoiseSchedule;
use crate::tensor::clip_unit;
use crate::unet::{ForwardHooks, UNetParams};
use crate::vocab::PromptTokens;
use ndarray::Array3;

/// eps = omega * eps_cond + (1 - omega) * eps_neg, exactly affine.
pub fn combine_guidance(
    eps_cond: &Array3<f64>,
    eps_neg: &Array3<f64>,
    omega: f64,
) -> Array3<f64> {
    eps_cond * omega + eps_neg * (1.0 - omega)
}

/// Deterministic guided sampling from seeded Gaussian noise.
///
/// With omega = 1 the negative branch is skipped entirely, so the result is
/// bit-identical to unguided conditional sampling. The final image is
/// clipped to [-1, 1].
pub fn sample(
    params: &UNetParams,
    prompt: &PromptTokens,
    negative: &PromptTokens,
    schedule: &NoiseSchedule,
    omega: f64,
    seed: u64,
    hooks: &ForwardHooks,
) -> Result<Array3<f64>> {
    if omega < 0.0 {
        return Err(CoreError::Validation(format!("guidance scale {omega} must be >= 0")));
    }
    let c = params.cfg.img_channels;
    let hw = params.cfg.img_size;
    let mut rng = split_rng(seed, "sample-init", 0);
    let mut z = randn3(&mut rng, (c, hw, hw));
    for (t, t_prev) in schedule.reverse_pairs() {
        let (eps_c, _) = params.eps_predict(&z, t, prompt, hooks)?;
        let eps = if omega == 1.0 {
            eps_c
        } else {
            let (eps_n, _) = params.eps_predict(&z, t, negative, hooks)?;
            combine_guidance(&eps_c, &eps_n, omega)
        };
        z = schedule.ddim_reverse_step(&z, &eps, t, t_prev)?;
        if !crate::tensor::all_finite3(&z) {
            return Err(CoreError::Numerical(format!(
                "non-finite latent after reverse step t={t}"
            )));
        }
    }
    clip_unit(&mut z);
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use crate::unet::UNetConfig;
    use crate::vocab::{filler_token, negative_token, shape_token};
    use ndarray::Array3;

    fn setup() -> (UNetParams, NoiseSchedule, PromptTokens, PromptTokens) {
        let mut params = UNetParams::new(UNetConfig::tiny(), 21).unwrap();
        params.randomize_all(22, 0.1);
        let schedule = NoiseSchedule::new(ScheduleConfig {
            ddim_steps: 10,
            ..ScheduleConfig::default()
        })
        .unwrap();
        let prompt = PromptTokens::new(vec![filler_token("a"), shape_token(2)]).unwrap();
        let neg = PromptTokens::new(vec![negative_token(0)]).unwrap();
        (params, schedule, prompt, neg)
    }

    #[test]
    fn guidance_combination_arithmetic() {
        let c = Array3::from_elem((1, 2, 2), 1.0);
        let n = Array3::from_elem((1, 2, 2), 0.0);
        let out = combine_guidance(&c, &n, 7.5);
        assert!(out.iter().all(|&v| v == 7.5));
        // affine in both arguments with coefficients (omega, 1 - omega)
        let c2 = Array3::from_elem((1, 2, 2), 2.0);
        let n2 = Array3::from_elem((1, 2, 2), -1.0);
        let out = combine_guidance(&c2, &n2, 3.0);
        assert!(out.iter().all(|&v| v == 3.0 * 2.0 + (1.0 - 3.0) * (-1.0)));
    }

    #[test]
    fn omega_one_equals_unguided() {
        let (params, schedule, prompt, neg) = setup();
        let hooks = ForwardHooks::default();
        let guided = sample(&params, &prompt, &neg, &schedule, 1.0, 9, &hooks).unwrap();
        // sampling with the prompt as its own negative at any omega collapses
        // to the unguided path; compare against omega=1 with a junk negative
        let unguided = sample(&params, &prompt, &prompt, &schedule, 1.0, 9, &hooks).unwrap();
        assert_eq!(guided, unguided);
    }

    #[test]
    fn same_seed_bit_identical() {
        let (params, schedule, prompt, neg) = setup();
        let hooks = ForwardHooks::default();
        let a = sample(&params, &prompt, &neg, &schedule, 4.0, 77, &hooks).unwrap();
        let b = sample(&params, &prompt, &neg, &schedule, 4.0, 77, &hooks).unwrap();
        assert_eq!(a, b);
        let c = sample(&params, &prompt, &neg, &schedule, 4.0, 78, &hooks).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn output_clipped() {
        let (params, schedule, prompt, neg) = setup();
        let img = sample(&params, &prompt, &neg, &schedule, 7.5, 3, &ForwardHooks::default())
            .unwrap();
        assert!(img.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn negative_omega_rejected() {
        let (params, schedule, prompt, neg) = setup();
        assert!(sample(&params, &prompt, &neg, &schedule, -0.1, 3, &ForwardHooks::default())
            .is_err());
    }
}
