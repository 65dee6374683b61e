use flowalign_core::align::{EtaSchedule, FinetuneConfig, GradField, ValueGradientField, VggFlowTrainer};
use flowalign_core::flow::collect_trajectories;
use flowalign_core::flow::{integrate, ResidualVelocity, SamplerConfig, Velocity};
use flowalign_core::numcore::Rng;
use flowalign_core::verify::{bundled_instance, riccati_solve};

fn mean_reward(v: &dyn Velocity, reward: &flowalign_core::rewards::RewardSpec, n: usize, seed: u64) -> f64 {
    let cfg = SamplerConfig::default();
    let mut rng = Rng::new(seed).split("eval");
    let mut total = 0.0;
    for _ in 0..n {
        let x0 = rng.normal_vec(2);
        total += reward.eval(integrate(v, &x0, &cfg).unwrap().terminal()).unwrap();
    }
    total / n as f64
}

fn main() {
    let prob = bundled_instance();
    let sol = riccati_solve(&prob, 1000).unwrap();
    let reward = prob.reward();
    let opt_reward = mean_reward(&sol.optimal_velocity(&prob), &reward, 2048, 11);
    let base_reward = mean_reward(&prob.base_velocity(), &reward, 2048, 11);
    println!("oracle optimum {opt_reward:.4}, base {base_reward:.4}");

    let args: Vec<String> = std::env::args().collect();
    let lr_phi: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let lr_theta: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let rounds: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(800);
    let wd: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-2);
    let clip_p: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(80.0);
    let fd_eps: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1e-3);

    let cfg = FinetuneConfig {
        beta: prob.beta(),
        lr_phi,
        lr_theta,
        weight_decay: wd,
        clip_percentile: clip_p,
        fd_eps,
        seed: args.get(7).map(|s| s.parse().unwrap()).unwrap_or(42),
        n_rounds: rounds,
        ..FinetuneConfig::default()
    };
    let mut trainer = VggFlowTrainer::new(cfg, Box::new(prob.base_velocity()), reward.clone()).unwrap();
    let t0 = std::time::Instant::now();
    for chunk in 0..(rounds / 100) {
        trainer.run(100).unwrap();
        let v = ResidualVelocity::new(trainer.base(), trainer.residual());
        let r = mean_reward(&v, &reward, 1024, 11);
        let rec = trainer.log().last().unwrap().clone();
        // g_phi vs g* and vtilde vs vtilde* on current on-policy states
        let mut rng2 = Rng::new(999).split("diag");
        let x0s: Vec<Vec<f64>> = (0..16).map(|_| rng2.normal_vec(2)).collect();
        let trajs = collect_trajectories(&v, &x0s, &SamplerConfig::default()).unwrap();
        let vg = ValueGradientField {
            eta: EtaSchedule::Quadratic,
            correction: trainer.correction(),
            reward: trainer.reward(),
            predictor: &v,
            clip_percentile: 100.0,
        };
        let mut pts = Vec::new();
        for traj in &trajs {
            for (x, &t) in traj.states.iter().zip(&traj.times) {
                pts.push((x.clone(), t));
            }
        }
        let g_net = vg.eval_batch(&pts);
        let (mut g_err, mut v_err, mut g_norm) = (0.0, 0.0, 0.0);
        for ((x, t), gn) in pts.iter().zip(&g_net) {
            let gstar = sol.value_gradient(x, *t).unwrap();
            g_err += flowalign_core::numcore::vecmath::dist2(gn, &gstar);
            g_norm += flowalign_core::numcore::vecmath::norm2(&gstar);
            let vt = trainer.residual().forward(x, *t).unwrap();
            let vstar = flowalign_core::numcore::vecmath::scale(&gstar, -prob.beta());
            v_err += flowalign_core::numcore::vecmath::dist2(&vt, &vstar);
        }
        let n = pts.len() as f64;
        println!(
            "round {:4}: eval {:+.4} (gap {:+.4}) Lm {:.2e} Lc {:.2e} Lb {:.2e} | g_rms {:.3} (rel {:.2}) vt_rms {:.3} | {:.1?}",
            (chunk + 1) * 100, r, opt_reward - r, rec.loss_matching, rec.loss_consistency, rec.loss_boundary,
            libm::sqrt(g_err / n), libm::sqrt(g_err / g_norm), libm::sqrt(v_err / n), t0.elapsed()
        );
    }
}
