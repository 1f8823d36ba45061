use std::io::Write;

use super::{CampaignResult, SimError, StepOutcome, TrajectoryLog};

/// Writes one row per step.
///
/// Columns: `step`, `x_i`, `s0_i`, `u_j`, `w_i`, `stage_cost`,
/// `eta_lower_i`, `eta_upper_i`, `outcome`, `objective`, `relaxation`.
/// The offsets of the robust tube are left empty.
/// Wall-clock times are left out so reruns produce identical files.
pub fn write_trajectory_csv<W: Write>(log: &TrajectoryLog, out: W) -> Result<(), SimError> {
    let n = log.final_state.len();
    let m = log.steps.first().map_or(0, |s| s.input.len());
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    for (prefix, len) in [("x", n), ("s0", n), ("u", m), ("w", n)] {
        header.extend((0..len).map(|i| format!("{prefix}_{i}")));
    }
    header.push("stage_cost".into());
    for prefix in ["eta_lower", "eta_upper"] {
        header.extend((0..n).map(|i| format!("{prefix}_{i}")));
    }
    header.push("outcome".into());
    header.push("objective".into());
    header.push("relaxation".into());
    wtr.write_record(&header)?;

    let padded = |v: &[f64], len: usize| -> Vec<String> {
        if v.is_empty() {
            vec![String::new(); len]
        } else {
            v.iter().map(|x| format!("{x:e}")).collect()
        }
    };
    for s in &log.steps {
        let mut row = vec![s.step.to_string()];
        row.extend(padded(&s.state, n));
        row.extend(padded(&s.nominal, n));
        row.extend(padded(&s.input, m));
        row.extend(padded(&s.disturbance, n));
        row.push(format!("{:e}", s.stage_cost));
        row.extend(padded(&s.eta_lower, n));
        row.extend(padded(&s.eta_upper, n));
        row.push(
            match s.outcome {
                StepOutcome::Optimal => "optimal",
                StepOutcome::Fallback => "fallback",
            }
            .into(),
        );
        row.push(format!("{:e}", s.objective));
        row.push(format!("{:e}", s.relaxation));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Columns: `controller`, `runs`, `mean_cost`, `median_cost`, `std_cost`,
/// `violation_rate`, `fallbacks`, `aborted_runs`.
pub fn write_summary_csv<W: Write>(result: &CampaignResult, out: W) -> Result<(), SimError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "controller",
        "runs",
        "mean_cost",
        "median_cost",
        "std_cost",
        "violation_rate",
        "fallbacks",
        "aborted_runs",
    ])?;
    for s in &result.summaries {
        wtr.write_record([
            s.controller.clone(),
            s.runs.to_string(),
            format!("{:e}", s.mean_cost),
            format!("{:e}", s.median_cost),
            format!("{:e}", s.std_cost),
            format!("{:e}", s.violation_rate),
            s.fallbacks.to_string(),
            s.aborted_runs.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Columns: `controller`, `mean_solve_seconds`. Kept apart from the other
/// files because it changes between reruns.
pub fn write_timing_csv<W: Write>(result: &CampaignResult, out: W) -> Result<(), SimError> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["controller", "mean_solve_seconds"])?;
    for s in &result.summaries {
        wtr.write_record([s.controller.clone(), format!("{:e}", s.mean_solve_seconds)])?;
    }
    wtr.flush()?;
    Ok(())
}
