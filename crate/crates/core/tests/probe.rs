// Temporary measurement probe; deleted before release.
use adl_core::design::{apportion, d_optimal_emax};
use adl_core::estimation::{fit_mle, simulate_stage_means, stage1_bias_theta2};
use adl_core::model::{DoseInterval, Emax, ModelParams, DEFAULT_THETA2_BOUNDS};
use adl_core::rng::derive_rng;
use rayon::prelude::*;

#[test]
#[ignore]
fn probe_bias() {
    let iv = DoseInterval::new(0.0, 150.0).unwrap();
    let th = ModelParams::new(2.0, 0.467, 25.0).unwrap();
    for sigma in [0.1, 0.25] {
        let n1 = 27;
        let design = apportion(&d_optimal_emax(25.0, &iv).unwrap(), n1);
        let predicted = stage1_bias_theta2(&th, 25.0, &iv, sigma, n1).unwrap();
        let reps: usize = 100_000;
        let results: Vec<(f64, bool)> = (0..reps as u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = derive_rng(555, &[r]);
                let s = simulate_stage_means(&design, &th, sigma, &mut rng, &Emax).unwrap();
                let fit = fit_mle(&s.pooled(), &DEFAULT_THETA2_BOUNDS, false).unwrap();
                (fit.theta_hat.theta2, fit.boundary)
            })
            .collect();
        let boundary = results.iter().filter(|(_, b)| *b).count();
        let all: Vec<f64> = results.iter().map(|(t, _)| *t).collect();
        let interior: Vec<f64> = results
            .iter()
            .filter(|(_, b)| !*b)
            .map(|(t, _)| *t)
            .collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
        };
        let m_all = mean(&all);
        let se_all = sd(&all) / (all.len() as f64).sqrt();
        let m_int = mean(&interior);
        let se_int = sd(&interior) / (interior.len() as f64).sqrt();
        println!(
            "sigma={sigma}: predicted bias {predicted:.4}; all: {:.4} +- {:.4} (z={:.2}); \
             interior: {:.4} +- {:.4} (z={:.2}); boundary rate {:.5}",
            m_all - 25.0,
            se_all,
            (m_all - 25.0 - predicted) / se_all,
            m_int - 25.0,
            se_int,
            (m_int - 25.0 - predicted) / se_int,
            boundary as f64 / reps as f64
        );
    }
}
