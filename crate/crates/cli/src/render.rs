//! Plain-text and CSV views of reports and plans.

use std::fmt::Write;

use deltashare::evaluate::{Ratio, Report};
use deltashare::tensor::OpCounter;
use deltashare::Error;

use crate::PlanFile;

/// Percentage recomputed from the raw counts, never taken from the file.
fn pct(r: &Ratio) -> String {
    if r.denominator == 0 {
        "n/a".into()
    } else {
        format!("{:.2}%", 100.0 * r.numerator as f64 / r.denominator as f64)
    }
}

fn mismatch(what: String) -> Error {
    Error::Corrupt(format!("report inconsistent: {what}"))
}

fn check_ratio(name: &str, r: &Ratio, numerator: u64, denominator: u64) -> Result<(), Error> {
    if r.numerator != numerator || r.denominator != denominator {
        return Err(mismatch(format!(
            "{name} is {}/{}, counts give {numerator}/{denominator}",
            r.numerator, r.denominator
        )));
    }
    let expect = Ratio::new(numerator, denominator).percent;
    if (r.percent - expect).abs() > 1e-9 * expect.abs().max(1.0) {
        return Err(mismatch(format!("{name} percent {} differs from {expect}", r.percent)));
    }
    Ok(())
}

/// Verifies that every total equals the sum of its parts and every
/// percentage matches its numerator and denominator.
pub fn check_consistency(report: &Report) -> Result<(), Error> {
    let mut total = 0u64;
    let mut dense = 0u64;
    for t in &report.tasks {
        let projection = t
            .layers
            .iter()
            .fold(OpCounter::new(), |acc, l| acc + l.dense + l.task + l.temporal);
        if projection != t.projection {
            return Err(mismatch(format!("`{}` projection is not the sum of its layers", t.task)));
        }
        if t.projection + t.attention != t.total {
            return Err(mismatch(format!("`{}` total is not projection + attention", t.task)));
        }
        check_ratio(&t.task, &t.multiplies_vs_dense, t.total.multiplies, t.dense_multiplies)?;
        total += t.total.multiplies;
        dense += t.dense_multiplies;
    }
    if total != report.total_multiplies || dense != report.total_dense_multiplies {
        return Err(mismatch("run totals are not the sum over tasks".into()));
    }
    check_ratio("run", &report.multiplies_vs_dense, total, dense)?;
    let offset_total: u64 = report.offsets.iter().map(|o| o.multiplies).sum();
    let offset_dense: u64 = report.offsets.iter().map(|o| o.dense_multiplies).sum();
    if offset_total != total || offset_dense != dense {
        return Err(mismatch("offsets do not sum to the run totals".into()));
    }
    for o in &report.offsets {
        check_ratio(&format!("offset {}", o.offset), &o.multiplies_vs_dense, o.multiplies, o.dense_multiplies)?;
    }
    if !report.offsets.is_empty() {
        let mean = report.offsets.iter().map(|o| o.multiplies_vs_dense.percent).sum::<f64>()
            / report.offsets.len() as f64;
        if (mean - report.offset_average_percent).abs() > 1e-9 * mean.abs().max(1.0) {
            return Err(mismatch(format!(
                "offset average {} differs from {mean}",
                report.offset_average_percent
            )));
        }
    }
    let s = &report.storage;
    check_ratio(
        "params",
        &s.params_vs_separate,
        s.params.iter().map(|a| a.value).sum(),
        s.params_vs_separate.denominator,
    )?;
    check_ratio(
        "memory",
        &s.memory_vs_separate,
        s.memory_bytes.iter().map(|a| a.value).sum(),
        s.memory_vs_separate.denominator,
    )?;
    Ok(())
}

pub fn render_text(r: &Report) -> String {
    let mut o = String::new();
    let plan = &r.plan;
    let _ = writeln!(
        o,
        "strategy {}, keyframe period {}, {} clips x {} frames",
        plan.strategy.as_str(),
        plan.keyframe_period,
        r.clips,
        r.frames_per_clip
    );
    for b in &r.boundaries {
        let _ = writeln!(o, "boundary {}: {}", b.task, b.boundary);
    }

    let _ = writeln!(o, "\n{:<10} {:>7} {:>12} {:>10} {:>14} {:>14} {:>9} {:>9}",
        "task", "frames", "mean_loss", "max_dev", "multiplies", "dense", "% dense", "fallback");
    for t in &r.tasks {
        let _ = writeln!(
            o,
            "{:<10} {:>7} {:>12.6e} {:>10.2e} {:>14} {:>14} {:>9} {:>9}",
            t.task,
            t.frames,
            t.mean_loss,
            t.max_dense_deviation,
            t.total.multiplies,
            t.dense_multiplies,
            pct(&t.multiplies_vs_dense),
            t.fallbacks
        );
    }
    let _ = writeln!(
        o,
        "{:<10} {:>7} {:>12} {:>10} {:>14} {:>14} {:>9}",
        "all", "", "", "", r.total_multiplies, r.total_dense_multiplies, pct(&r.multiplies_vs_dense)
    );
    let _ = writeln!(o, "embedding multiplies (shared): {}", r.embedding.multiplies);

    let _ = writeln!(o, "\nprojection multiplies by layer and mode");
    let _ = writeln!(o, "{:<10} {:>5} {:>12} {:>12} {:>12} {:>12}", "task", "layer", "dense", "task", "temporal", "additions");
    for t in &r.tasks {
        for l in &t.layers {
            let _ = writeln!(
                o,
                "{:<10} {:>5} {:>12} {:>12} {:>12} {:>12}",
                t.task,
                l.layer,
                l.dense.multiplies,
                l.task.multiplies,
                l.temporal.multiplies,
                l.dense.additions + l.task.additions + l.temporal.additions
            );
        }
        let _ = writeln!(o, "{:<10} {:>5} {:>12} (attention)", t.task, "", t.attention.multiplies);
    }

    let _ = writeln!(o, "\nkeyframe offsets");
    let _ = writeln!(o, "{:>6} {:>11} {:>14} {:>14} {:>9} {:>12}", "offset", "task_frames", "multiplies", "dense", "% dense", "mean_loss");
    for f in &r.offsets {
        let _ = writeln!(
            o,
            "{:>6} {:>11} {:>14} {:>14} {:>9} {:>12.6e}",
            f.offset,
            f.task_frames,
            f.multiplies,
            f.dense_multiplies,
            pct(&f.multiplies_vs_dense),
            f.mean_loss
        );
    }
    let _ = writeln!(o, "mean over offsets: {:.2}%", r.offset_average_percent);

    let _ = writeln!(o, "\nexecuted densities");
    let _ = writeln!(o, "{:<10} {:>5} {:>8} {:>8} {:>8}", "task", "layer", "s_w", "s_a1", "s_a2");
    for t in &r.tasks {
        let d = &t.densities;
        for l in 0..d.layers() {
            let _ = writeln!(o, "{:<10} {:>5} {:>8.4} {:>8.4} {:>8.4}", d.task, l, d.s_w[l], d.s_a1[l], d.s_a2[l]);
        }
    }

    let s = &r.storage;
    let _ = writeln!(o, "\nstorage");
    let _ = writeln!(o, "{:<10} {:>10} {:>12}", "task", "params", "bytes");
    for (p, m) in s.params.iter().zip(&s.memory_bytes) {
        let _ = writeln!(o, "{:<10} {:>10} {:>12}", p.task, p.value, m.value);
    }
    let _ = writeln!(
        o,
        "{:<10} {:>10} {:>12}",
        "all", s.params_vs_separate.numerator, s.memory_vs_separate.numerator
    );
    let _ = writeln!(
        o,
        "{:<10} {:>10} {:>12}",
        "separate", s.params_vs_separate.denominator, s.memory_vs_separate.denominator
    );
    let _ = writeln!(
        o,
        "{:<10} {:>10} {:>12}",
        "% separate",
        pct(&s.params_vs_separate),
        pct(&s.memory_vs_separate)
    );
    o
}

/// One row per task, layer and mode, for external plotting.
pub fn render_csv(r: &Report) -> String {
    let mut o = String::from("task,layer,mode,multiplies,additions,s_w,s_a1,s_a2\n");
    for t in &r.tasks {
        let d = &t.densities;
        for l in &t.layers {
            for (mode, c) in [("dense", l.dense), ("task", l.task), ("temporal", l.temporal)] {
                let _ = writeln!(
                    o,
                    "{},{},{},{},{},{},{},{}",
                    t.task, l.layer, mode, c.multiplies, c.additions, d.s_w[l.layer], d.s_a1[l.layer], d.s_a2[l.layer]
                );
            }
        }
    }
    o
}

pub fn render_plan(p: &PlanFile) -> String {
    let mut o = String::new();
    let _ = writeln!(o, "keyframe period {}", p.plan.keyframe_period);
    for b in &p.plan.sub_tasks {
        let _ = writeln!(o, "boundary {}: {}", b.task, b.boundary);
    }
    let _ = writeln!(o, "\n{:<10} {:>5} {:>8} {:>8} {:>8} {:>12} {:>12} {:>12}",
        "task", "layer", "s_w", "s_a1", "s_a2", "dense", "task", "temporal");
    for (d, c) in p.densities.iter().zip(&p.costs.tasks) {
        for (l, e) in c.layers.iter().enumerate() {
            let _ = writeln!(
                o,
                "{:<10} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>12.1} {:>12.1} {:>12.1}",
                d.task, l, d.s_w[l], d.s_a1[l], d.s_a2[l], e.dense, e.task, e.temporal
            );
        }
    }
    let _ = writeln!(o, "\n{:<10} {:>14} {:>14} {:>14} {:>14} {:>9}", "task", "keyframe", "non-keyframe", "per frame", "dense", "% dense");
    for c in &p.costs.tasks {
        let _ = writeln!(
            o,
            "{:<10} {:>14.1} {:>14.1} {:>14.1} {:>14.1} {:>8.2}%",
            c.task,
            c.keyframe_projection + c.attention,
            c.non_keyframe_projection + c.attention,
            c.per_frame,
            c.dense_baseline,
            100.0 * c.per_frame / c.dense_baseline
        );
    }
    let _ = writeln!(
        o,
        "{:<10} {:>14} {:>14} {:>14.1} {:>14.1} {:>8.2}%",
        "all",
        "",
        "",
        p.costs.per_frame,
        p.costs.dense_baseline,
        100.0 * p.costs.per_frame / p.costs.dense_baseline
    );
    o
}
