use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mogp_drmpc::config::ExperimentConfig;
use mogp_drmpc::drcvar::{oracle_check as run_oracle_check, DEFAULT_GRID};
use mogp_drmpc::mogp::{Dataset, MoGPModel};
use mogp_drmpc::mpc::{setup_controller, MpcError, TighteningMode};
use mogp_drmpc::sim::{
    collect_training_data, run_campaign, write_summary_csv, write_timing_csv, write_trajectory_csv,
    CampaignResult, Controller, SimError, CONTROLLER_NAMES, GP_DR, MOGP_DR, ROBUST_TUBE,
};

use crate::plot::{Chart, Series};
use crate::{CampaignArgs, Common};

/// Largest accepted relative gap between the cone program and the oracle.
pub const ORACLE_GAP_LIMIT: f64 = 1e-3;

pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::Config(_) => 2,
            SimError::Mogp(_) => 3,
            SimError::Mpc(MpcError::Solver(_) | MpcError::Drcvar(_) | MpcError::Contract(_)) => 4,
            SimError::Mpc(_) => 2,
            SimError::Output(_) => 1,
        };
        Self::new(code, e.to_string())
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(1, format!("{}: {e}", path.display()))
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    fs::create_dir_all(&out).map_err(|e| io_error(&out, e))?;
    Ok((cfg, out))
}

fn model_path(out: &Path, controller: &str) -> PathBuf {
    out.join(format!("{controller}.model.json"))
}

fn expert_cap(controller: &str) -> Option<usize> {
    (controller == GP_DR).then_some(1)
}

fn training_data(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let sys = cfg.build_system()?;
    Ok(collect_training_data(&sys, &cfg.disturbance, cfg.training.n_points, cfg.training.seed)?)
}

pub fn train(common: &Common) -> Result<(), CliError> {
    let (mut cfg, out) = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.training.seed = seed;
    }
    let data = training_data(&cfg)?;
    for name in [MOGP_DR, GP_DR] {
        let model = cfg.training.train(&data, expert_cap(name))?;
        let path = model_path(&out, name);
        model.save(&path).map_err(|e| CliError::new(1, e.to_string()))?;
        let counts: Vec<String> = model.expert_counts().iter().map(usize::to_string).collect();
        println!("{name}: experts per dimension [{}] -> {}", counts.join(", "), path.display());
        for w in model.warnings() {
            log::warn!("{name}: {w}");
        }
    }
    Ok(())
}

/// Disturbance model for a DR controller: the saved model when one exists
/// in the output directory, otherwise freshly trained.
fn disturbance_model(
    cfg: &ExperimentConfig,
    out: &Path,
    controller: &str,
    data: &mut Option<Dataset>,
) -> Result<MoGPModel, CliError> {
    let path = model_path(out, controller);
    if path.exists() {
        let model = MoGPModel::load(&path).map_err(|e| CliError::new(3, e.to_string()))?;
        let n = cfg.system.a.len();
        if model.output_dim() != n || model.data().input_dim() != n {
            return Err(CliError::new(2, format!("{} does not match the configured system", path.display())));
        }
        log::info!("loaded {}", path.display());
        return Ok(model);
    }
    if data.is_none() {
        *data = Some(training_data(cfg)?);
    }
    let data = data.as_ref().expect("collected above");
    Ok(cfg.training.train(data, expert_cap(controller))?)
}

fn campaign_config(args: &CampaignArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let (mut cfg, out) = load_config(&args.common)?;
    if let Some(runs) = args.runs {
        cfg.campaign.runs = runs;
    }
    if let Some(steps) = args.steps {
        cfg.campaign.steps = steps;
    }
    if let Some(seed) = args.common.seed {
        cfg.campaign.base_seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, out))
}

fn controllers(cfg: &ExperimentConfig, out: &Path, names: &[&str]) -> Result<Vec<Controller>, CliError> {
    let base = setup_controller(cfg.build_system()?, cfg.build_mpc_config()?, TighteningMode::RobustTube)
        .map_err(SimError::from)?;
    let mut data = None;
    names
        .iter()
        .map(|&name| {
            let mode = if name == ROBUST_TUBE {
                TighteningMode::RobustTube
            } else {
                TighteningMode::Distributional(Arc::new(disturbance_model(cfg, out, name, &mut data)?))
            };
            Ok(Controller { name: name.to_string(), state: base.with_mode(mode) })
        })
        .collect()
}

fn write_file(path: &Path, body: impl FnOnce(&mut Vec<u8>) -> Result<(), SimError>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    fs::write(path, buf).map_err(|e| io_error(path, e))
}

fn write_run_logs(result: &CampaignResult, out: &Path) -> Result<(), CliError> {
    for (summary, logs) in result.summaries.iter().zip(&result.logs) {
        let dir = out.join(&summary.controller);
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        for (r, log) in logs.iter().enumerate() {
            write_file(&dir.join(format!("run_{r:03}.csv")), |b| write_trajectory_csv(log, b))?;
        }
    }
    Ok(())
}

/// Exit status of a finished campaign: infeasible steps and solver
/// breakdowns both count as solver failures.
fn campaign_status(result: &CampaignResult) -> Result<(), CliError> {
    let aborted: usize = result.summaries.iter().map(|s| s.aborted_runs).sum();
    let fallbacks: usize = result.summaries.iter().map(|s| s.fallbacks).sum();
    if aborted > 0 {
        return Err(CliError::new(4, format!("{aborted} run(s) stopped on a solver failure")));
    }
    if fallbacks > 0 {
        return Err(CliError::new(
            4,
            format!("{fallbacks} infeasible step(s) were handled by the relaxed problem"),
        ));
    }
    Ok(())
}

pub fn simulate(args: &CampaignArgs, controller: &str) -> Result<(), CliError> {
    if !CONTROLLER_NAMES.contains(&controller) {
        return Err(CliError::new(
            2,
            format!("unknown controller `{controller}`; valid names: {}", CONTROLLER_NAMES.join(", ")),
        ));
    }
    let (cfg, out) = campaign_config(args)?;
    let ctrls = controllers(&cfg, &out, &[controller])?;
    let c = &cfg.campaign;
    let result = run_campaign(&ctrls, &cfg.disturbance, &cfg.x0(), c.steps, c.runs, c.base_seed)?;
    write_run_logs(&result, &out)?;
    let dir = out.join(controller);
    write_file(&dir.join("summary.csv"), |b| write_summary_csv(&result, b))?;
    write_file(&dir.join("timing.csv"), |b| write_timing_csv(&result, b))?;
    let s = &result.summaries[0];
    println!(
        "{}: {} runs, mean cost {:.4}, violation rate {:.4}, infeasible steps {}, aborted runs {}",
        s.controller, s.runs, s.mean_cost, s.violation_rate, s.fallbacks, s.aborted_runs
    );
    campaign_status(&result)
}

pub fn compare(args: &CampaignArgs) -> Result<(), CliError> {
    let (cfg, out) = campaign_config(args)?;
    let ctrls = controllers(&cfg, &out, &CONTROLLER_NAMES)?;
    let c = &cfg.campaign;
    let result = run_campaign(&ctrls, &cfg.disturbance, &cfg.x0(), c.steps, c.runs, c.base_seed)?;
    write_run_logs(&result, &out)?;
    write_file(&out.join("summary.csv"), |b| write_summary_csv(&result, b))?;
    write_file(&out.join("timing.csv"), |b| write_timing_csv(&result, b))?;
    write_file(&out.join("run_costs.csv"), |b| write_run_costs(&result, b))?;
    let costs = cost_chart(&result);
    fs::write(out.join("costs.svg"), costs.to_svg()).map_err(|e| io_error(&out, e))?;
    let traj = trajectory_chart(&cfg, &result);
    fs::write(out.join("trajectories.svg"), traj.to_svg()).map_err(|e| io_error(&out, e))?;
    print!("{}", summary_table(&result));
    println!("outputs written to {}", out.display());
    campaign_status(&result)
}

/// Columns: `run`, `seed`, then one total cost per controller.
fn write_run_costs(result: &CampaignResult, out: &mut Vec<u8>) -> Result<(), SimError> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["run".to_string(), "seed".to_string()];
    header.extend(result.summaries.iter().map(|s| s.controller.clone()));
    wtr.write_record(&header)?;
    let runs = result.logs.first().map_or(0, Vec::len);
    for r in 0..runs {
        let mut row = vec![r.to_string(), result.logs[0][r].seed.to_string()];
        row.extend(result.logs.iter().map(|l| format!("{:e}", l[r].total_cost)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn summary_table(result: &CampaignResult) -> String {
    let mogp = result.summary(MOGP_DR);
    let mut text = format!(
        "{:<12} {:>12} {:>12} {:>10} {:>14} {:>10} {:>8}\n",
        "controller", "mean cost", "std", "violation", "MoGP-DR gain", "infeasible", "aborted"
    );
    for s in &result.summaries {
        let gain = match mogp {
            Some(m) if m.controller != s.controller => format!("{:.2}%", 100.0 * m.reduction_against(s)),
            _ => "-".into(),
        };
        text += &format!(
            "{:<12} {:>12.4} {:>12.4} {:>9.2}% {:>14} {:>10} {:>8}\n",
            s.controller,
            s.mean_cost,
            s.std_cost,
            100.0 * s.violation_rate,
            gain,
            s.fallbacks,
            s.aborted_runs
        );
    }
    text
}

fn cost_chart(result: &CampaignResult) -> Chart {
    Chart {
        title: "Closed-loop cost per disturbance realization".into(),
        x_label: "run".into(),
        y_label: "closed-loop cost".into(),
        series: result
            .summaries
            .iter()
            .zip(&result.logs)
            .map(|(s, logs)| Series {
                label: s.controller.clone(),
                points: logs.iter().enumerate().map(|(r, l)| (r as f64, l.total_cost)).collect(),
                markers: true,
            })
            .collect(),
        region: None,
    }
}

/// Plane of the plot: the disturbance gating axes when defined, otherwise
/// the first two state coordinates.
fn plane(cfg: &ExperimentConfig) -> (usize, usize) {
    let n = cfg.system.a.len();
    cfg.disturbance.gating_axes().unwrap_or((0, 1.min(n - 1)))
}

fn trajectory_chart(cfg: &ExperimentConfig, result: &CampaignResult) -> Chart {
    let (i, j) = plane(cfg);
    let s = &cfg.system;
    Chart {
        title: "Closed-loop trajectories, first realization".into(),
        x_label: format!("x{}", i + 1),
        y_label: format!("x{}", j + 1),
        series: result
            .summaries
            .iter()
            .zip(&result.logs)
            .map(|(sum, logs)| Series {
                label: sum.controller.clone(),
                points: logs
                    .first()
                    .map(|l| l.states().iter().map(|x| (x[i], x[j])).collect())
                    .unwrap_or_default(),
                markers: false,
            })
            .collect(),
        region: Some(((s.state_lower[i], s.state_lower[j]), (s.state_upper[i], s.state_upper[j]))),
    }
}

pub fn oracle_check(common: &Common, instances: usize) -> Result<(), CliError> {
    if instances == 0 {
        return Err(CliError::new(2, "oracle check needs at least one instance"));
    }
    let cfg = ExperimentConfig::load(&common.config)?;
    let eps = cfg.mpc.risk_level;
    let seed = common.seed.unwrap_or(0);
    let report = run_oracle_check(instances, seed, eps, DEFAULT_GRID)
        .map_err(|e| CliError::new(5, format!("oracle check failed: {e}")))?;
    println!(
        "{} instances, eps {eps}, seed {seed}: max relative gap {:.3e} (limit {ORACLE_GAP_LIMIT:e})",
        report.instances, report.max_gap
    );
    if report.max_gap > ORACLE_GAP_LIMIT {
        let detail = report
            .worst
            .as_ref()
            .map(|(set, socp, oracle)| {
                format!(
                    "worst instance: cone program {socp}, oracle {oracle}, set {}",
                    serde_json::to_string(set).unwrap_or_default()
                )
            })
            .unwrap_or_default();
        return Err(CliError::new(5, format!("gap above limit; {detail}")));
    }
    Ok(())
}
