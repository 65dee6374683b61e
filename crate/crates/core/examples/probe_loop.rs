use flowalign_core::align::{
    boundary_loss_tape, consistency_loss_tape, matching_loss_tape, ConsistencyMode, EtaSchedule,
    GradField, TransitionBatch, ValueGradientField,
};
use flowalign_core::flow::{collect_trajectories, integrate, ResidualVelocity, SamplerConfig, Velocity};
use flowalign_core::nets::{Activation, FinalInit, Mlp, MlpSpec};
use flowalign_core::numcore::{adamw_step, clip_global_norm, vecmath, AdamWConfig, OptState, Rng, Tape};
use flowalign_core::verify::{bundled_instance, riccati_solve};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr_phi: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let eps: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let rounds: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let use_base_predictor: bool = args.get(4).map(|s| s == "base").unwrap_or(false);

    let prob = bundled_instance();
    let sol = riccati_solve(&prob, 1000).unwrap();
    let base = prob.base_velocity();
    let reward = prob.reward();
    let beta = prob.beta();
    let cfg = SamplerConfig::default();

    let spec = MlpSpec { input_dim: 2, time_embed_dim: 8, hidden: vec![64, 64], activation: Activation::Silu, output_dim: 2, final_init: FinalInit::Tiny };
    let mut residual = Mlp::init(spec.clone(), &mut Rng::new(42).split("ir")).unwrap();
    let mut correction = Mlp::init(spec, &mut Rng::new(42).split("ic")).unwrap();
    let mut opt_th = OptState::new(AdamWConfig { lr: 1e-3, weight_decay: 1e-2, ..Default::default() });
    let mut opt_ph = OptState::new(AdamWConfig { lr: lr_phi, weight_decay: 1e-2, ..Default::default() });
    let mut rng = Rng::new(42).split("train");
    let t0 = std::time::Instant::now();
    let eval_reward = |residual: &Mlp| {
        let v = ResidualVelocity::new(&base, residual);
        let mut r = Rng::new(11).split("eval");
        let mut tot = 0.0;
        for _ in 0..1024 {
            let x0 = r.normal_vec(2);
            tot += reward.eval(integrate(&v, &x0, &cfg).unwrap().terminal()).unwrap();
        }
        tot / 1024.0
    };
    for round in 0..rounds {
        let x0s: Vec<Vec<f64>> = (0..32).map(|_| rng.normal_vec(2)).collect();
        let v_theta = ResidualVelocity::new(&base, &residual);
        let trajs = collect_trajectories(&v_theta, &x0s, &cfg).unwrap();
        let batch = TransitionBatch::from_trajectories(&trajs, 5, &mut rng).unwrap();
        let (lc, grads_phi) = {
            let predictor: &dyn Velocity = if use_base_predictor { &base } else { &v_theta };
            let vg = ValueGradientField { eta: EtaSchedule::Quadratic, correction: &correction, reward: &reward, predictor, clip_percentile: 80.0 };
            let mut tape = Tape::new();
            let mut targets = Vec::new();
            let mut pts_here = Vec::new();
            let h_step: f64 = 1.0 / 20.0;
            for tr in &batch.transitions {
                let h = h_step.min(1.0 - tr.t);
                let t1 = tr.t + h;
                let g0 = vg.eval(&tr.x, tr.t);
                let g1 = vg.eval(&tr.x, t1);
                let spatial_at = |g_at: &Vec<f64>, s: f64| {
                    let e = eps;
                    let w = vecmath::axpy(&base.eval(&tr.x, s), -beta, g_at);
                    let t2 = vecmath::scale(&vecmath::sub(
                        &vg.eval(&vecmath::axpy(&tr.x, e, &w), s),
                        &vg.eval(&vecmath::axpy(&tr.x, -e, &w), s)), 1.0 / (2.0 * e));
                    let t3 = vecmath::scale(&vecmath::sub(
                        &base.eval(&vecmath::axpy(&tr.x, e, g_at), s),
                        &base.eval(&vecmath::axpy(&tr.x, -e, g_at), s)), 1.0 / (2.0 * e));
                    vecmath::add(&t2, &t3)
                };
                let s0 = spatial_at(&g0, tr.t);
                let s1 = spatial_at(&g1, t1);
                let target = vecmath::add(&g1, &vecmath::scale(&vecmath::add(&s0, &s1), 0.5 * h));
                targets.push(target);
                pts_here.push((tr.x.clone(), tr.t));
            }
            let g_here_var = vg.eval_tape_batch(&mut tape, &pts_here, Some("phi.")).unwrap();
            let tv = tape.constant_rows(&targets).unwrap();
            let r = tape.sub(g_here_var, tv).unwrap();
            let sq = tape.square(r).unwrap();
            let tot = tape.sum(sq).unwrap();
            let lc = tape.scale(tot, 1.0 / pts_here.len() as f64).unwrap();
            let lb = boundary_loss_tape(&mut tape, &vg, &batch.terminals, Some("phi.")).unwrap();
            let sb = tape.scale(lb, 1e4).unwrap();
            let total = tape.add(lc, sb).unwrap();
            let g = tape.backward(total).unwrap();
            (tape.value(lc).scalar_value().unwrap(), g)
        };
        let mut local = correction.grads_for(&grads_phi, "phi.");
        clip_global_norm(&mut local, 1.0);
        adamw_step(correction.params_mut(), &local, &mut opt_ph).unwrap();
        let grads_th = {
            let predictor: &dyn Velocity = if use_base_predictor { &base } else { &v_theta };
            let vg = ValueGradientField { eta: EtaSchedule::Quadratic, correction: &correction, reward: &reward, predictor, clip_percentile: 80.0 };
            let mut tape = Tape::new();
            let lm = matching_loss_tape(&mut tape, &residual, &vg, &batch.transitions, beta, Some("th.")).unwrap();
            tape.backward(lm).unwrap()
        };
        let mut local = residual.grads_for(&grads_th, "th.");
        clip_global_norm(&mut local, 1.0);
        adamw_step(residual.params_mut(), &local, &mut opt_th).unwrap();
        if (round + 1) % 400 == 0 {
            let v = ResidualVelocity::new(&base, &residual);
            let predictor: &dyn Velocity = if use_base_predictor { &base } else { &v };
            let vg = ValueGradientField { eta: EtaSchedule::Quadratic, correction: &correction, reward: &reward, predictor, clip_percentile: 80.0 };
            let mut rd = Rng::new(999).split("diag");
            let xs: Vec<Vec<f64>> = (0..16).map(|_| rd.normal_vec(2)).collect();
            let dt = collect_trajectories(&v, &xs, &cfg).unwrap();
            let (mut ge, mut gn) = (0.0, 0.0);
            for traj in &dt {
                for (x, &t) in traj.states.iter().zip(&traj.times) {
                    let a = vg.eval(x, t);
                    let b = sol.value_gradient(x, t).unwrap();
                    ge += vecmath::dist2(&a, &b);
                    gn += vecmath::norm2(&b);
                }
            }
            println!("round {:4}: eval {:+.4} Lc {:.3e} g_rel {:.3} | {:.0?}", round + 1, eval_reward(&residual), lc, libm::sqrt(ge / gn), t0.elapsed());
        }
    }
}
