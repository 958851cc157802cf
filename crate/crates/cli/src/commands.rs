//! One function per subcommand. Each returns the checks it ran and the
//! artifacts it produced; writing them out is left to the caller.

use gbdsde::bdsde::{solve_gbdsde_picard, Ensemble};
use gbdsde::gbm::{build_family, integral_diagnostics, sample_driver, GbmPaths, TimeGrid};
use gbdsde::hunt::{empirical_bracket, simulate_hunt};
use gbdsde::pde::solve_gspde_picard;
use gbdsde::verify::{
    check_comparison, check_linear_transport, representation_study, CheckRow, RepresentationSettings, SharedRandomness,
};
use serde_json::{json, Value};
use std::io::Write;

use crate::config::Setup;
use crate::error::CliError;
use crate::report::Outcome;

type Result<T> = std::result::Result<T, CliError>;

/// Names accepted by [`run_command`], in suite order.
pub const SUITE: [&str; 7] = [
    "simulate-gbm",
    "simulate-hunt",
    "solve-gspde",
    "solve-gbdsde",
    "verify-representation",
    "verify-comparison",
    "verify-transport",
];

pub fn run_command(name: &str, s: &Setup) -> Result<Outcome> {
    match name {
        "simulate-gbm" => simulate_gbm(s),
        "simulate-hunt" => simulate_hunt_cmd(s),
        "solve-gspde" => solve_gspde(s),
        "solve-gbdsde" => solve_gbdsde(s),
        "verify-representation" => verify_representation(s),
        "verify-comparison" => verify_comparison(s),
        "verify-transport" => verify_transport(s),
        "run-suite" => run_suite(s),
        other => Err(CliError::Config(format!("unknown command {other}"))),
    }
}

/// G-Brownian bundles on the main grid, one per schedule.
pub fn main_family(s: &Setup) -> Result<Vec<GbmPaths>> {
    let time = s.time();
    let driver = sample_driver(time, s.scenarios.l(), s.config.gbm.paths, s.config.seed)?;
    Ok(build_family(&driver, &s.schedules(time.steps)?, &s.scenarios)?)
}

fn z_score(mean: f64, se: f64) -> f64 {
    if se > 0.0 {
        mean.abs() / se
    } else if mean == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn simulate_gbm(s: &Setup) -> Result<Outcome> {
    let cfg = &s.config;
    let mut out = Outcome::new("simulate-gbm");
    for (k, b) in main_family(s)?.iter().enumerate() {
        out.csv(&format!("gbm_paths_schedule{k}.csv"), |w| b.write_csv(w))?;
    }
    let d = &cfg.gbm.diagnostics;
    let grid = TimeGrid::new(cfg.time.horizon, d.steps)?;
    let schedules = s.schedules(d.steps)?;
    let driver = sample_driver(grid, s.scenarios.l(), d.paths, cfg.seed)?;
    let family = build_family(&driver, &schedules, &s.scenarios)?;
    let mut reports = Vec::new();
    for (j, integrand) in d.integrands.iter().enumerate() {
        let r = integral_diagnostics(&family, |p| integrand.build(p))?;
        for (k, st) in r.per_schedule.iter().enumerate() {
            let z = z_score(st.mean_i0.mean, st.mean_i0.std_error);
            out.checks.push(CheckRow::new(
                "gbm-mean-zero",
                schedules[k].constant_scenario(),
                format!("mean_z:integrand{j}:schedule{k}"),
                z,
                d.n_se,
                z <= d.n_se,
            ));
        }
        let e2 = r.second_moment.attained();
        let tol = r.isometry_bound * (1.0 + d.n_se * e2.rel_se());
        out.checks.push(CheckRow::new(
            "gbm-isometry",
            None,
            format!("second_moment:integrand{j}"),
            e2.mean,
            tol,
            r.isometry_holds(d.n_se),
        ));
        let sup = r.sup_stat.attained();
        let tol = r.doob_bound * (1.0 + d.n_se * sup.rel_se());
        out.checks.push(CheckRow::new(
            "gbm-doob",
            None,
            format!("sup_second_moment:integrand{j}"),
            sup.mean,
            tol,
            r.doob_holds(d.n_se),
        ));
        if s.scenarios.len() == 1 && r.isometry_bound > 0.0 {
            let gap = (e2.mean / r.isometry_bound - 1.0).abs();
            out.checks.push(CheckRow::new(
                "gbm-isometry-equality",
                Some(0),
                format!("relative_gap:integrand{j}"),
                gap,
                d.equality_tolerance,
                gap <= d.equality_tolerance,
            ));
        }
        reports.push(r);
    }
    out.detail("integrals", &reports);
    out.detail(
        "schedules",
        schedules.iter().map(|c| c.steps().to_vec()).collect::<Vec<_>>(),
    );
    Ok(out)
}

pub fn simulate_hunt_cmd(s: &Setup) -> Result<Outcome> {
    let cfg = &s.config;
    let mut out = Outcome::new("simulate-hunt");
    let x = simulate_hunt(&s.field, &cfg.hunt.init, s.time(), cfg.hunt.paths, cfg.seed)?;
    out.csv("hunt_paths.csv", |w| x.write_csv(w))?;
    let b = &cfg.hunt.bracket;
    let grid = TimeGrid::new(cfg.time.horizon, b.steps)?;
    let bx = simulate_hunt(&s.field, &cfg.hunt.init, grid, b.paths, cfg.seed)?;
    let r = empirical_bracket(&bx, &s.field)?;
    out.checks.push(CheckRow::new(
        "hunt-bracket",
        None,
        "max_relative_deviation",
        r.max_relative_deviation,
        b.tolerance,
        r.max_relative_deviation <= b.tolerance,
    ));
    out.detail("bracket", &r);
    Ok(out)
}

fn ratio_rows(check: &str, ratios: &[f64], kappa: f64, slack: f64) -> Vec<CheckRow> {
    ratios
        .iter()
        .enumerate()
        .map(|(i, r)| CheckRow::new(check, None, format!("ratio{}", i + 1), *r, kappa + slack, *r <= kappa + slack))
        .collect()
}

pub fn solve_gspde(s: &Setup) -> Result<Outcome> {
    let cfg = &s.config;
    let mut out = Outcome::new("solve-gspde");
    let family = main_family(s)?;
    let (u, rep) = solve_gspde_picard(&s.gspde, &cfg.pde, &family)?;
    for (k, f) in u.iter().enumerate() {
        out.csv(&format!("gspde_field_schedule{k}.csv"), |w| f.write_csv(w))?;
    }
    out.checks.extend(ratio_rows(
        "gspde-contraction",
        &rep.ratios,
        rep.constants.kappa,
        cfg.verify.contraction_slack,
    ));
    out.detail("solver", &rep);
    Ok(out)
}

pub fn solve_gbdsde(s: &Setup) -> Result<Outcome> {
    let cfg = &s.config;
    let mut out = Outcome::new("solve-gbdsde");
    let family = main_family(s)?;
    let x = simulate_hunt(&s.field, &cfg.hunt.init, s.time(), cfg.hunt.paths, cfg.seed)?;
    let sol = solve_gbdsde_picard(
        &s.bdsde,
        Ensemble {
            bundles: &family,
            x: &x,
        },
        &cfg.bdsde,
    )?;
    out.csv("gbdsde_solution.csv", |w| sol.write_csv(w))?;
    let rep = sol.report().expect("Picard solutions carry a report");
    out.checks.extend(ratio_rows(
        "gbdsde-contraction",
        &rep.ratios,
        rep.constants.kappa,
        cfg.verify.contraction_slack,
    ));
    out.detail("solver", rep);
    Ok(out)
}

pub fn verify_representation(s: &Setup) -> Result<Outcome> {
    let cfg = &s.config;
    let mut out = Outcome::new("verify-representation");
    let time = s.time();
    let rand = SharedRandomness::new(
        time,
        cfg.verify.levels,
        s.scenarios.clone(),
        SharedRandomness::constant_schedules(&s.scenarios, time.steps)?,
        cfg.hunt.init.clone(),
        s.field.dim(),
        cfg.gbm.paths,
        cfg.hunt.paths,
        cfg.seed,
    )?;
    let r = representation_study(
        &s.bdsde,
        &rand,
        RepresentationSettings {
            grid: cfg.space,
            pde: &cfg.pde,
            bdsde: &cfg.bdsde,
            checkpoints: &cfg.verify.checkpoints,
            tolerance: cfg.verify.tolerance,
        },
    )?;
    out.checks.extend(r.rows());
    out.csv("representation.csv", |w| {
        writeln!(w, "steps,scenario_id,t,y_rel_rms,z_rel_rms,z_sigma_rel_rms")?;
        for level in &r.levels {
            for e in &level.per_scenario {
                for (c, t) in r.checkpoints.iter().enumerate() {
                    writeln!(
                        w,
                        "{},{},{t},{},{},{}",
                        level.steps, e.scenario_id, e.y_rel_rms[c], e.z_rel_rms[c], e.z_sigma_rel_rms[c]
                    )?;
                }
            }
        }
        Ok(())
    })?;
    out.detail("representation", &r);
    Ok(out)
}

pub fn verify_comparison(s: &Setup) -> Result<Outcome> {
    let cfg = &s.config;
    let c = &cfg.verify.comparison;
    let mut out = Outcome::new("verify-comparison");
    let time = s.time();
    let rand = SharedRandomness::new(
        time,
        2,
        s.scenarios.clone(),
        SharedRandomness::constant_schedules(&s.scenarios, time.steps)?,
        cfg.hunt.init.clone(),
        s.field.dim(),
        c.paths,
        1,
        cfg.seed,
    )?;
    let [base, shifted, raised] = &s.comparison;
    let shift = check_comparison(base, shifted, &rand, &cfg.pde, c.collar, c.shift)?;
    let raise = check_comparison(base, raised, &rand, &cfg.pde, c.collar, 0.0)?;
    out.checks.extend(shift.rows("comparison-shift"));
    out.checks.extend(raise.rows("comparison-raise"));
    out.detail("shift", &shift);
    out.detail("raise", &raise);
    Ok(out)
}

pub fn verify_transport(s: &Setup) -> Result<Outcome> {
    let cfg = &s.config;
    let t = &cfg.verify.transport;
    let mut out = Outcome::new("verify-transport");
    let time = TimeGrid::new(cfg.time.horizon, t.steps)?;
    let rand = SharedRandomness::new(
        time,
        t.levels,
        s.scenarios.clone(),
        SharedRandomness::constant_schedules(&s.scenarios, time.steps)?,
        cfg.hunt.init.clone(),
        s.field.dim(),
        t.paths,
        t.x_paths,
        cfg.seed,
    )?;
    let r = check_linear_transport(&t.g, &s.field, cfg.space, &rand, &cfg.pde, t.tolerance)?;
    out.checks.extend(r.rows());
    out.detail("transport", &r);
    Ok(out)
}

pub fn run_suite(s: &Setup) -> Result<Outcome> {
    let mut out = Outcome::new("run-suite");
    for name in SUITE {
        out.absorb(run_command(name, s)?);
    }
    Ok(out)
}

/// Contraction margins and proof constants of both fixed-point problems.
pub fn validation(s: &Setup) -> Result<Value> {
    let cfg = &s.config;
    let sb = s.scenarios.sigma_bar();
    let gk = s.gspde.constants();
    let gc = s.gspde.contraction(cfg.pde.epsilon)?;
    let bk = s.bdsde.constants();
    let bc = s.bdsde.contraction(cfg.bdsde.epsilon)?;
    Ok(json!({
        "config_hash": s.hash,
        "seed": cfg.seed,
        "sigma_bar": sb,
        "lambda": s.field.lambda(),
        "Lambda": s.field.Lambda(),
        "gspde": {
            "c_bar": gk.c,
            "alpha_bar": gk.alpha,
            "margin": s.gspde.contraction_margin(),
            "kappa": gc.kappa,
            "epsilon": gc.epsilon,
            "gamma": gc.rate,
            "delta": gc.delta,
        },
        "bdsde": {
            "K": bk.c,
            "alpha": bk.alpha,
            "margin": s.bdsde.contraction_margin(),
            "kappa": bc.kappa,
            "epsilon": bc.epsilon,
            "beta": bc.rate,
            "delta": bc.delta,
        },
    }))
}
