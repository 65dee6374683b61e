use flowalign_core::align::{consistency_residual, ConsistencyMode, FnGradField};
use flowalign_core::flow::{collect_trajectories, SamplerConfig};
use flowalign_core::numcore::{vecmath, Rng};
use flowalign_core::verify::{bundled_instance, riccati_solve};

fn main() {
    let prob = bundled_instance();
    let sol = riccati_solve(&prob, 2000).unwrap();
    let base = prob.base_velocity();
    let oracle = FnGradField { dim: 2, f: |x: &[f64], t: f64| sol.value_gradient(x, t).unwrap() };
    let v_opt = sol.optimal_velocity(&prob);
    let mut rng = Rng::new(5).split("d");
    let x0s: Vec<Vec<f64>> = (0..32).map(|_| rng.normal_vec(2)).collect();
    for (name, trajs) in [
        ("base flow", collect_trajectories(&base, &x0s, &SamplerConfig::default()).unwrap()),
        ("optimal flow", collect_trajectories(&v_opt, &x0s, &SamplerConfig::default()).unwrap()),
    ] {
        for eps in [1e-3, 0.01, 0.05] {
            let mut total = 0.0;
            let mut n = 0;
            for traj in &trajs {
                for (x, &t) in traj.states.iter().zip(&traj.times) {
                    if t + eps > 1.0 { continue; }
                    let r = consistency_residual(&oracle, &base, &v_opt, x, t, eps, prob.beta(), ConsistencyMode::Partial).unwrap();
                    total += vecmath::norm2(&r);
                    n += 1;
                }
            }
            println!("{name}, eps={eps}: mean ||R||^2 = {:.4e} over {n} states", total / n as f64);
        }
    }
}
