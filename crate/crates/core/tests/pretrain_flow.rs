//! Pretraining oracles: closed-form rectified-flow targets for point-mass
//! and Gaussian data, plus loss-curve behavior.

use flowalign_core::flow::{
    integrate, pretrain_rectified_flow, SamplerConfig, ToyDistribution, Velocity,
};
use flowalign_core::nets::{Activation, FinalInit, MlpSpec};
use flowalign_core::numcore::{vecmath, Rng};

fn field_spec(d: usize) -> MlpSpec {
    MlpSpec {
        input_dim: d,
        time_embed_dim: 8,
        hidden: vec![64, 64],
        activation: Activation::Silu,
        output_dim: d,
        final_init: FinalInit::Standard,
    }
}

#[test]
fn point_mass_target_transports_all_samples() {
    // Point mass at μ: the optimal conditional field is μ − x₀, and the
    // trained sampler should put everything near μ.
    let mu = [1.5, -0.75];
    let data = ToyDistribution::Gaussian {
        mean: mu.to_vec(),
        cov_diag: vec![0.0, 0.0],
    };
    let mut rng = Rng::new(501);
    let (net, losses) =
        pretrain_rectified_flow(&data, &field_spec(2), 2000, 128, 2e-3, &mut rng).unwrap();
    assert_eq!(losses.len(), 2000);
    let cfg = SamplerConfig::default();
    let n = 256;
    let mut sq = 0.0;
    for _ in 0..n {
        let x0 = rng.normal_vec(2);
        let traj = integrate(&net, &x0, &cfg).unwrap();
        sq += vecmath::dist2(traj.terminal(), &mu);
    }
    let rms = libm::sqrt(sq / n as f64);
    assert!(rms < 0.1, "rms distance to point mass {rms}");
}

#[test]
fn gaussian_target_matches_affine_velocity_field() {
    // For data N(m, s²) the marginal rectified velocity is affine:
    // v*(x, t) = m + (t·s² − (1−t)) / σ_t² · (x − t·m),
    // σ_t² = (1−t)² + t²s². Probe along the path marginals.
    let (m, s) = (0.8, 0.6);
    let data = ToyDistribution::Gaussian {
        mean: vec![m],
        cov_diag: vec![s * s],
    };
    let mut rng = Rng::new(777);
    let (net, _) =
        pretrain_rectified_flow(&data, &field_spec(1), 8000, 512, 1e-3, &mut rng).unwrap();
    let mut sq = 0.0;
    let mut count = 0;
    for ti in 1..=9 {
        let t = ti as f64 / 10.0;
        let sigma_t2 = (1.0 - t) * (1.0 - t) + t * t * s * s;
        let sigma_t = libm::sqrt(sigma_t2);
        let slope = (t * s * s - (1.0 - t)) / sigma_t2;
        for ui in -6..=6 {
            let u = ui as f64 / 4.0; // within ±1.5 sd of the path marginal
            let x = t * m + sigma_t * u;
            let expect = m + slope * (x - t * m);
            let got = net.eval(&[x], t)[0];
            sq += (got - expect) * (got - expect);
            count += 1;
        }
    }
    let rms = libm::sqrt(sq / count as f64);
    assert!(rms < 0.05, "rms field error {rms}");
}

#[test]
fn loss_moving_average_is_non_increasing() {
    let data = ToyDistribution::GaussianMixture {
        means: vec![vec![-1.2, 0.0], vec![1.2, 0.0]],
        variance: 0.05,
        weights: vec![0.5, 0.5],
    };
    let mut rng = Rng::new(31);
    let (_, losses) =
        pretrain_rectified_flow(&data, &field_spec(2), 1200, 128, 1e-3, &mut rng).unwrap();
    let window = 200;
    let means: Vec<f64> = losses
        .chunks(window)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in means.windows(2) {
        assert!(
            w[1] <= w[0],
            "moving average increased: {:?}",
            means
        );
    }
}

#[test]
fn mixture_pretraining_reproduces_modes() {
    let data = ToyDistribution::GaussianMixture {
        means: vec![vec![-1.5], vec![1.5]],
        variance: 0.04,
        weights: vec![0.5, 0.5],
    };
    let mut rng = Rng::new(99);
    let (net, _) =
        pretrain_rectified_flow(&data, &field_spec(1), 3000, 128, 2e-3, &mut rng).unwrap();
    let cfg = SamplerConfig::default();
    let mut near_modes = 0;
    let mut left = 0;
    let n = 400;
    for _ in 0..n {
        let x0 = rng.normal_vec(1);
        let x1 = integrate(&net, &x0, &cfg).unwrap().terminal()[0];
        if (x1.abs() - 1.5).abs() < 0.6 {
            near_modes += 1;
        }
        if x1 < 0.0 {
            left += 1;
        }
    }
    assert!(near_modes as f64 > 0.9 * n as f64, "{near_modes}/{n} near modes");
    let frac_left = left as f64 / n as f64;
    assert!((frac_left - 0.5).abs() < 0.12, "left fraction {frac_left}");
}
