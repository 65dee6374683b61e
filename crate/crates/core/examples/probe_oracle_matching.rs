use flowalign_core::align::{subsample_indices};
use flowalign_core::flow::{collect_trajectories, integrate, ResidualVelocity, SamplerConfig, Velocity};
use flowalign_core::nets::{Activation, FinalInit, Mlp, MlpSpec};
use flowalign_core::numcore::{adamw_step, clip_global_norm, vecmath, AdamWConfig, OptState, Rng, Tape};
use flowalign_core::verify::{bundled_instance, riccati_solve};

fn main() {
    let prob = bundled_instance();
    let sol = riccati_solve(&prob, 1000).unwrap();
    let reward = prob.reward();
    let base = prob.base_velocity();
    let beta = prob.beta();
    let cfg = SamplerConfig::default();
    let eval_reward = |v: &dyn Velocity| {
        let mut rng = Rng::new(11).split("eval");
        let mut total = 0.0;
        for _ in 0..1024 {
            let x0 = rng.normal_vec(2);
            total += reward.eval(integrate(v, &x0, &cfg).unwrap().terminal()).unwrap();
        }
        total / 1024.0
    };
    println!("optimum {:.4}", eval_reward(&sol.optimal_velocity(&prob)));

    let mut rng = Rng::new(42).split("train");
    let mut residual = Mlp::init(MlpSpec {
        input_dim: 2, time_embed_dim: 8, hidden: vec![64, 64],
        activation: Activation::Silu, output_dim: 2, final_init: FinalInit::Tiny,
    }, &mut Rng::new(42).split("init")).unwrap();
    let mut opt = OptState::new(AdamWConfig { lr: 1e-3, weight_decay: 1e-2, ..Default::default() });
    let t0 = std::time::Instant::now();
    for round in 0..1200 {
        let x0s: Vec<Vec<f64>> = (0..32).map(|_| rng.normal_vec(2)).collect();
        let v_theta = ResidualVelocity::new(&base, &residual);
        let trajs = collect_trajectories(&v_theta, &x0s, &cfg).unwrap();
        let mut xs = Vec::new();
        let mut ts = Vec::new();
        let mut targets = Vec::new();
        for traj in &trajs {
            for idx in subsample_indices(traj.n_steps(), 5, &mut rng).unwrap() {
                let x = traj.states[idx].clone();
                let t = traj.times[idx];
                targets.push(vecmath::scale(&sol.value_gradient(&x, t).unwrap(), beta));
                xs.push(x);
                ts.push(t);
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant_rows(&xs).unwrap();
        let vt = residual.forward_tape(&mut tape, xv, &ts, Some("th.")).unwrap();
        let tv = tape.constant_rows(&targets).unwrap();
        let r = tape.add(vt, tv).unwrap();
        let sq = tape.square(r).unwrap();
        let tot = tape.sum(sq).unwrap();
        let loss = tape.scale(tot, 1.0 / xs.len() as f64).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut local = residual.grads_for(&grads, "th.");
        clip_global_norm(&mut local, 1.0);
        adamw_step(residual.params_mut(), &local, &mut opt).unwrap();
        if (round + 1) % 200 == 0 {
            let v = ResidualVelocity::new(&base, &residual);
            println!("round {:4}: eval {:+.4} loss {:.2e} | {:.1?}", round + 1, eval_reward(&v), tape.value(loss).scalar_value().unwrap(), t0.elapsed());
        }
    }
}
