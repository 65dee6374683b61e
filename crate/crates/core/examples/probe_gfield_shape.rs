use flowalign_core::align::{EtaSchedule, FinetuneConfig, GradField, ValueGradientField, VggFlowTrainer};
use flowalign_core::flow::ResidualVelocity;
use flowalign_core::verify::{bundled_instance, riccati_solve};

fn main() {
    let prob = bundled_instance();
    let sol = riccati_solve(&prob, 1000).unwrap();
    let cfg = FinetuneConfig {
        beta: prob.beta(),
        seed: 42,
        clip_percentile: 100.0,
        ..FinetuneConfig::default()
    };
    let mut trainer = VggFlowTrainer::new(cfg, Box::new(prob.base_velocity()), prob.reward()).unwrap();
    trainer.run(600).unwrap();
    let v = ResidualVelocity::new(trainer.base(), trainer.residual());
    let vg = ValueGradientField {
        eta: EtaSchedule::Quadratic,
        correction: trainer.correction(),
        reward: trainer.reward(),
        predictor: &v,
        clip_percentile: 100.0,
    };
    for &t in &[0.05, 0.3, 0.6, 0.95] {
        println!("--- t = {t}");
        for &x in &[[-1.0f64, 0.0], [0.0, 0.0], [1.0, 0.5], [0.5, -1.0]] {
            let gn = vg.eval(&x, t);
            let gs = sol.value_gradient(&x, t).unwrap();
            println!("  x={x:?}: net [{:+.3}, {:+.3}]  oracle [{:+.3}, {:+.3}]", gn[0], gn[1], gs[0], gs[1]);
        }
    }
}
