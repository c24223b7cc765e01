//! Synthetic data through calibration, planning and evaluation in one process.
//!
//!     cargo run --release -p deltashare --example pipeline

use deltashare::calibration::{calibrate, generate_synth, CalibConfig, SynthTaskSpec};
use deltashare::evaluate::evaluate;
use deltashare::planner::{plan_from_densities, report_costs};
use deltashare::reuse::{measure_densities, Runtime};

fn main() -> deltashare::Result<()> {
    let mut data = generate_synth(&SynthTaskSpec { seed: 1, tasks: 3, ..Default::default() })?;
    let cfg = CalibConfig { lambda_w: 5e-5, lambda_a1: 1e-3, lambda_a2: 1e-3, ..Default::default() };
    let outcome = calibrate(&data, &cfg)?;
    for s in &outcome.report.sub_tasks {
        println!("{}: {} of {} delta weights kept, dense loss {:.4}", s.task, s.delta_nnz, s.delta_total, s.dense_loss);
    }

    // plan on the first clip, evaluate on the rest
    let rt = Runtime::new(&outcome.bundle)?;
    let densities = measure_densities(&rt, &data.clips[0].frames)?;
    let mut plan = plan_from_densities(&densities, 5)?;
    for (sub, name) in plan.sub_tasks.iter_mut().zip(outcome.bundle.task_names().into_iter().skip(1)) {
        sub.task = name;
    }
    let estimate = report_costs(&plan, &densities, &outcome.bundle.config)?;
    data.clips.remove(0);
    let report = evaluate(&rt, &plan, &data, serde_json::Value::Null)?;

    for s in &plan.sub_tasks {
        println!("{} switches to temporal reuse at layer {}", s.task, s.boundary);
    }
    // Planning densities come from exact forwards. Executed temporal deltas run
    // denser because changes below the threshold build up until they fire.
    println!("planned: {:.1}% of dense multiplies", estimate.percent_of_dense);
    println!("measured: {:.1}% of dense multiplies", report.multiplies_vs_dense.percent);
    for t in &report.tasks {
        println!("  {:<6} {:>6.1}%  mean loss {:.4}", t.task, t.multiplies_vs_dense.percent, t.mean_loss);
    }
    println!("parameters: {:.1}% of separate models", report.storage.params_vs_separate.percent);
    Ok(())
}
