use flowalign_core::align::{
    boundary_loss_tape, consistency_loss_tape, ConsistencyMode, EtaSchedule, GradField,
    Transition, ValueGradientField,
};
use flowalign_core::flow::{collect_trajectories, SamplerConfig, Velocity};
use flowalign_core::nets::{Activation, FinalInit, Mlp, MlpSpec};
use flowalign_core::numcore::{adamw_step, clip_global_norm, vecmath, AdamWConfig, OptState, Rng, Tape};
use flowalign_core::verify::{bundled_instance, riccati_solve};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let eps: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4000);
    let embed: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);

    let prob = bundled_instance();
    let sol = riccati_solve(&prob, 1000).unwrap();
    let base = prob.base_velocity();
    let reward = prob.reward();
    let v_opt = sol.optimal_velocity(&prob);
    // Frozen data: states of the optimal flow.
    let mut rng = Rng::new(5).split("data");
    let x0s: Vec<Vec<f64>> = (0..64).map(|_| rng.normal_vec(2)).collect();
    let trajs = collect_trajectories(&v_opt, &x0s, &SamplerConfig::default()).unwrap();
    let mut transitions = Vec::new();
    let mut terminals = Vec::new();
    for traj in &trajs {
        for (i, (x, &t)) in traj.states.iter().zip(&traj.times).enumerate() {
            if i < traj.n_steps() {
                transitions.push(Transition { x: x.clone(), t, v: traj.velocities[i].clone() });
            }
        }
        terminals.push(traj.terminal().to_vec());
    }
    println!("{} transitions", transitions.len());

    let mut correction = Mlp::init(
        MlpSpec { input_dim: 2, time_embed_dim: embed, hidden: vec![64, 64], activation: Activation::Silu, output_dim: 2, final_init: FinalInit::Tiny },
        &mut Rng::new(7).split("init"),
    ).unwrap();
    let mut opt = OptState::new(AdamWConfig { lr, weight_decay: 1e-2, ..Default::default() });
    let mode: String = std::env::args().nth(4).unwrap_or_else(|| "res".into());
    let td_mode = mode == "td";
    let cn_mode = mode == "cn";
    let cntd_mode = mode == "cntd";
    let mut train_rng = Rng::new(9).split("batch");
    for step in 0..steps {
        // minibatch of 160 transitions
        let batch: Vec<Transition> = (0..160).map(|_| transitions[train_rng.below(transitions.len())].clone()).collect();
        let (lc, lb, grads) = {
            let vg = ValueGradientField { eta: EtaSchedule::Quadratic, correction: &correction, reward: &reward, predictor: &v_opt, clip_percentile: 100.0 };
            let mut tape = Tape::new();
            let lc = if cntd_mode {
                // CN-centered backup with frozen targets:
                // g(x,t) <- g(x,t+e) + e*0.5*[(T2+T3)(t) + (T2+T3)(t+e)]
                let mut targets = Vec::new();
                let mut pts_here = Vec::new();
                for tr in &batch {
                    let e = eps.min(1.0 - tr.t);
                    let t1 = tr.t + e;
                    let g0 = vg.eval(&tr.x, tr.t);
                    let g1 = vg.eval(&tr.x, t1);
                    let spatial_at = |g_at: &Vec<f64>, s: f64| {
                        let w = vecmath::axpy(&base.eval(&tr.x, s), -prob.beta(), g_at);
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
                    let target = vecmath::add(&g1, &vecmath::scale(&vecmath::add(&s0, &s1), 0.5 * e));
                    targets.push(target);
                    pts_here.push((tr.x.clone(), tr.t));
                }
                let g_here_var = vg.eval_tape_batch(&mut tape, &pts_here, Some("phi.")).unwrap();
                let tv = tape.constant_rows(&targets).unwrap();
                let r = tape.sub(g_here_var, tv).unwrap();
                let sq = tape.square(r).unwrap();
                let tot = tape.sum(sq).unwrap();
                tape.scale(tot, 1.0 / pts_here.len() as f64).unwrap()
            } else if cn_mode {
                // Trapezoid-centered residual: (g(t+e) - g(t))/e
                // + 0.5*[(T2+T3)(t) + (T2+T3)(t+e)], full gradient.
                let b_len = batch.len();
                let mut pts_here = Vec::new();
                let mut pts_ahead = Vec::new();
                let mut spatial = Vec::new(); // constant 0.5*(T2+T3)(t)+... rows? no: T2 needs tape.
                // T2 must stay differentiable; build both-end T2 on tape, T3 constant.
                let mut pts_p0 = Vec::new();
                let mut pts_m0 = Vec::new();
                let mut pts_p1 = Vec::new();
                let mut pts_m1 = Vec::new();
                let mut t3_rows = Vec::new();
                let mut inv_eps_rows = Vec::new();
                let mut inv_4eps_rows = Vec::new();
                for tr in &batch {
                    let e = eps.min(1.0 - tr.t);
                    let t1 = tr.t + e;
                    let vg_ref = &vg;
                    let g0 = vg_ref.eval(&tr.x, tr.t);
                    let g1 = vg_ref.eval(&tr.x, t1);
                    let w0 = vecmath::axpy(&base.eval(&tr.x, tr.t), -prob.beta(), &g0);
                    let w1 = vecmath::axpy(&base.eval(&tr.x, t1), -prob.beta(), &g1);
                    pts_here.push((tr.x.clone(), tr.t));
                    pts_ahead.push((tr.x.clone(), t1));
                    pts_p0.push((vecmath::axpy(&tr.x, e, &w0), tr.t));
                    pts_m0.push((vecmath::axpy(&tr.x, -e, &w0), tr.t));
                    pts_p1.push((vecmath::axpy(&tr.x, e, &w1), t1));
                    pts_m1.push((vecmath::axpy(&tr.x, -e, &w1), t1));
                    let t3_0 = vecmath::scale(&vecmath::sub(
                        &base.eval(&vecmath::axpy(&tr.x, e, &g0), tr.t),
                        &base.eval(&vecmath::axpy(&tr.x, -e, &g0), tr.t)), 1.0 / (2.0 * e));
                    let t3_1 = vecmath::scale(&vecmath::sub(
                        &base.eval(&vecmath::axpy(&tr.x, e, &g1), t1),
                        &base.eval(&vecmath::axpy(&tr.x, -e, &g1), t1)), 1.0 / (2.0 * e));
                    t3_rows.push(vecmath::scale(&vecmath::add(&t3_0, &t3_1), 0.5));
                    inv_eps_rows.push(vec![1.0 / e; 2]);
                    inv_4eps_rows.push(vec![1.0 / (4.0 * e); 2]);
                    spatial.push(());
                }
                let g_here = vg.eval_tape_batch(&mut tape, &pts_here, Some("phi.")).unwrap();
                let g_ahead = vg.eval_tape_batch(&mut tape, &pts_ahead, Some("phi.")).unwrap();
                let g_p0 = vg.eval_tape_batch(&mut tape, &pts_p0, Some("phi.")).unwrap();
                let g_m0 = vg.eval_tape_batch(&mut tape, &pts_m0, Some("phi.")).unwrap();
                let g_p1 = vg.eval_tape_batch(&mut tape, &pts_p1, Some("phi.")).unwrap();
                let g_m1 = vg.eval_tape_batch(&mut tape, &pts_m1, Some("phi.")).unwrap();
                let inv_eps = tape.constant_rows(&inv_eps_rows).unwrap();
                let inv_4eps = tape.constant_rows(&inv_4eps_rows).unwrap();
                let dt_diff = tape.sub(g_ahead, g_here).unwrap();
                let t1v = tape.mul(dt_diff, inv_eps).unwrap();
                let dx0 = tape.sub(g_p0, g_m0).unwrap();
                let dx1 = tape.sub(g_p1, g_m1).unwrap();
                let dx = tape.add(dx0, dx1).unwrap();
                let t2v = tape.mul(dx, inv_4eps).unwrap();
                let t3v = tape.constant_rows(&t3_rows).unwrap();
                let r = tape.add(t1v, t2v).unwrap();
                let r = tape.add(r, t3v).unwrap();
                let sq = tape.square(r).unwrap();
                let tot = tape.sum(sq).unwrap();
                tape.scale(tot, 1.0 / b_len as f64).unwrap()
            } else if td_mode {
                // TD/backup form: g(x,t) regressed onto the frozen one-step
                // backup target g(x,t+e) + e*(T2+T3), same fixed point.
                let mut targets = Vec::new();
                let mut pts_here = Vec::new();
                for tr in &batch {
                    let e = eps.min(1.0 - tr.t);
                    let g_here = vg.eval(&tr.x, tr.t);
                    let g_ahead = vg.eval(&tr.x, tr.t + e);
                    let w = vecmath::axpy(&base.eval(&tr.x, tr.t), -prob.beta(), &g_here);
                    let t2 = vecmath::scale(&vecmath::sub(
                        &vg.eval(&vecmath::axpy(&tr.x, e, &w), tr.t),
                        &vg.eval(&vecmath::axpy(&tr.x, -e, &w), tr.t)), 1.0 / (2.0 * e));
                    let t3 = vecmath::scale(&vecmath::sub(
                        &base.eval(&vecmath::axpy(&tr.x, e, &g_here), tr.t),
                        &base.eval(&vecmath::axpy(&tr.x, -e, &g_here), tr.t)), 1.0 / (2.0 * e));
                    // R = (g_ahead - g_here)/e + T2 + T3 = 0  =>  target for g_here:
                    let target = vecmath::add(&g_ahead, &vecmath::scale(&vecmath::add(&t2, &t3), e));
                    targets.push(target);
                    pts_here.push((tr.x.clone(), tr.t));
                }
                let g_here_var = vg.eval_tape_batch(&mut tape, &pts_here, Some("phi.")).unwrap();
                let tv = tape.constant_rows(&targets).unwrap();
                let r = tape.sub(g_here_var, tv).unwrap();
                let sq = tape.square(r).unwrap();
                let tot = tape.sum(sq).unwrap();
                tape.scale(tot, 1.0 / pts_here.len() as f64).unwrap()
            } else {
                consistency_loss_tape(&mut tape, &vg, &base, &batch, eps, prob.beta(), ConsistencyMode::Partial, Some("phi.")).unwrap()
            };
            let lb = boundary_loss_tape(&mut tape, &vg, &terminals, Some("phi.")).unwrap();
            let sb = tape.scale(lb, 1e4).unwrap();
            let total = tape.add(lc, sb).unwrap();
            let g = tape.backward(total).unwrap();
            (tape.value(lc).scalar_value().unwrap(), tape.value(lb).scalar_value().unwrap(), g)
        };
        let mut local = correction.grads_for(&grads, "phi.");
        let pre = clip_global_norm(&mut local, 1.0);
        adamw_step(correction.params_mut(), &local, &mut opt).unwrap();
        if (step + 1) % 500 == 0 {
            let vg = ValueGradientField { eta: EtaSchedule::Quadratic, correction: &correction, reward: &reward, predictor: &v_opt, clip_percentile: 100.0 };
            let mut g_err = 0.0; let mut g_norm = 0.0;
            for tr in transitions.iter().step_by(7) {
                let gn = vg.eval(&tr.x, tr.t);
                let gs = sol.value_gradient(&tr.x, tr.t).unwrap();
                g_err += vecmath::dist2(&gn, &gs);
                g_norm += vecmath::norm2(&gs);
            }
            println!("step {:5}: Lc {:.3e} Lb {:.2e} preclip {:.1} g_rel {:.3}", step + 1, lc, lb, pre, libm::sqrt(g_err / g_norm));
        }
    }
}
