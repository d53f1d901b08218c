//! `jbsde`: runs scenario pipelines and writes CSV reports.
//!
//! Exit status is 0 on success, 1 when the configuration is invalid or a
//! check fails, 2 on a numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use jbsde_core::bsde::{bsde_residual, ladder_study, solve_backward, LadderConfig, MeshSolution};
use jbsde_core::coefficients::validate_assumptions;
use jbsde_core::ipde::{terminal_consistency, viscosity_report, FdSteps};
use jbsde_core::report::{fmt_f64, Csv, DiagnosticsReport};
use jbsde_core::scenario::{load_scenario, ScenarioConfig};
use jbsde_core::sde::{moment_diagnostics, simulate_forward, simulate_with_streams, Streams};
use jbsde_core::Error;

#[derive(Parser)]
#[command(name = "jbsde", version, about = "Jump-diffusion BSDE solver and verification runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the forward process and report moment estimates.
    SimulateForward(Common),
    /// Solve the truncated BSDE and save the mesh solution.
    Solve(Common),
    /// Solve along a ladder of truncation levels and report the gaps.
    Ladder(Common),
    /// Evaluate the viscosity residual of the solution at probe points.
    VerifyViscosity(Common),
    /// Run the assumption validators on the scenario coefficients.
    VerifyAssumptions(Common),
    /// Out-of-sample BSDE residual on a fresh ensemble.
    Residual(Common),
    /// Time the main pipeline stages.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the scenario's.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<u32>,
    /// Comma-separated truncation levels, e.g. `2,4,8,16`.
    #[arg(long, value_delimiter = ',')]
    ladder: Option<Vec<u32>>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Skip the assumption gate.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    quiet: bool,
}

/// Outcome of a subcommand that ran to completion.
struct Outcome {
    passed: bool,
    summary: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::SimulateForward(c) => ("simulate-forward", c),
        Command::Solve(c) => ("solve", c),
        Command::Ladder(c) => ("ladder", c),
        Command::VerifyViscosity(c) => ("verify-viscosity", c),
        Command::VerifyAssumptions(c) => ("verify-assumptions", c),
        Command::Residual(c) => ("residual", c),
        Command::Bench(c) => ("bench", c),
    };
    let result = Run::new(name, common).and_then(|run| match &cli.command {
        Command::SimulateForward(_) => run.simulate_forward(),
        Command::Solve(_) => run.solve(),
        Command::Ladder(_) => run.ladder(),
        Command::VerifyViscosity(_) => run.verify_viscosity(),
        Command::VerifyAssumptions(_) => run.verify_assumptions(),
        Command::Residual(_) => run.residual(),
        Command::Bench(_) => run.bench(),
    });
    match result {
        Ok(o) => {
            if !common.quiet {
                println!("{name}: {} {}", if o.passed { "ok" } else { "FAILED" }, o.summary);
            }
            if o.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{name}: error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

struct Run {
    command: &'static str,
    cfg: ScenarioConfig,
    out: PathBuf,
    force: bool,
    quiet: bool,
}

impl Run {
    fn new(command: &'static str, args: &Common) -> jbsde_core::Result<Self> {
        let mut cfg = load_scenario(&args.config)?;
        let n = &mut cfg.numerics;
        if let Some(s) = args.seed {
            n.seed = s;
        }
        if let Some(k) = args.k {
            n.k = k;
        }
        if let Some(l) = &args.ladder {
            n.ladder = l.clone();
        }
        if let Some(p) = args.paths {
            n.n_paths = p;
        }
        if let Some(s) = args.steps {
            n.n_steps = s;
        }
        let issues = cfg.validate();
        if !issues.is_empty() {
            return Err(Error::Validation(issues));
        }
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
        Ok(Self {
            command,
            cfg,
            out,
            force: args.force,
            quiet: args.quiet,
        })
    }

    fn stamp(&self) -> String {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        format!(
            "jbsde {} scenario={} seed={} unix={secs}",
            self.command, self.cfg.name, self.cfg.numerics.seed
        )
    }

    fn write(&self, file: &str, csv: &Csv) -> jbsde_core::Result<()> {
        if self.cfg.output.formats.iter().any(|f| f == "csv") {
            csv.write(&self.out.join(file), &self.stamp())?;
        }
        Ok(())
    }

    fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn assumptions(&self) -> jbsde_core::Result<DiagnosticsReport> {
        Ok(validate_assumptions(&self.cfg.model()?, &self.cfg.measure()?, &self.cfg.sample_plan()))
    }

    /// Refuses to go on when the validators fail, unless `--force`.
    fn gate(&self) -> jbsde_core::Result<()> {
        if self.force {
            return Ok(());
        }
        let report = self.assumptions()?;
        if report.all_passed() {
            return Ok(());
        }
        let failed: Vec<_> = report.failures().map(|e| e.name.clone()).collect();
        Err(Error::config(format!(
            "assumption checks failed ({}); rerun with --force to solve anyway",
            failed.join(", ")
        )))
    }

    fn solve_fresh(&self) -> jbsde_core::Result<MeshSolution> {
        self.gate()?;
        let cfg = &self.cfg;
        let model = cfg.model()?;
        let measure = cfg.measure()?;
        let k = cfg.truncation()?;
        let grid = cfg.grid()?;
        let ens = simulate_forward(&model, &measure, k, &grid, &cfg.initial_state()?, cfg.numerics.n_paths, cfg.numerics.seed)?;
        solve_backward(&model, &measure, k, &grid, &ens, &cfg.solver_options())
    }

    /// The saved solution when it matches the scenario, otherwise a new
    /// solve.
    fn solution(&self) -> jbsde_core::Result<MeshSolution> {
        let path = self.out.join("solution.json");
        if path.exists() {
            let sol = MeshSolution::load(&path)?;
            let cfg = &self.cfg;
            if sol.k.get() == cfg.numerics.k
                && sol.grid == cfg.grid()?
                && sol.seed == cfg.numerics.seed
                && sol.n_paths == cfg.numerics.n_paths
                && sol.options == cfg.solver_options()
            {
                self.note(&format!("using saved solution {}", path.display()));
                return Ok(sol);
            }
        }
        let sol = self.solve_fresh()?;
        self.save(&sol)?;
        Ok(sol)
    }

    fn save(&self, sol: &MeshSolution) -> jbsde_core::Result<()> {
        if self.cfg.output.formats.iter().any(|f| f == "json") {
            sol.save(&self.out.join("solution.json"))?;
        }
        Ok(())
    }

    fn simulate_forward(&self) -> jbsde_core::Result<Outcome> {
        let cfg = &self.cfg;
        let grid = cfg.grid()?;
        let ens = simulate_forward(
            &cfg.model()?,
            &cfg.measure()?,
            cfg.truncation()?,
            &grid,
            &cfg.initial_state()?,
            cfg.numerics.n_paths,
            cfg.numerics.seed,
        )?;
        let mut csv = Csv::new(&["step", "t", "coordinate", "mean", "variance"]);
        let n = ens.n_paths as f64;
        let mut terminal = (0.0, 0.0);
        for j in 0..=grid.n_steps {
            for c in 0..ens.dim {
                let (mut s, mut s2) = (0.0, 0.0);
                for p in 0..ens.n_paths {
                    let v = ens.state(p, j)[c];
                    s += v;
                    s2 += v * v;
                }
                let mean = s / n;
                let var = (s2 / n - mean * mean) * n / (n - 1.0).max(1.0);
                if j == grid.n_steps && c == 0 {
                    terminal = (mean, var);
                }
                csv.row(&[j.to_string(), fmt_f64(grid.node(j)), c.to_string(), fmt_f64(mean), fmt_f64(var)]);
            }
        }
        self.write("forward.csv", &csv)?;
        let moments = moment_diagnostics(&ens, 2.0, None);
        self.write("moments.csv", &moments.to_csv())?;
        let m2 = moments.entry("M_p").map_or(f64::NAN, |e| e.value);
        Ok(Outcome {
            passed: true,
            summary: format!(
                "{} paths, mean X_T {:.6}, var X_T {:.6}, M_2 {:.4}",
                ens.n_paths, terminal.0, terminal.1, m2
            ),
        })
    }

    fn solve(&self) -> jbsde_core::Result<Outcome> {
        let sol = self.solve_fresh()?;
        self.save(&sol)?;
        let mut csv = Csv::new(&["x", "equation", "u", "std_error"]);
        let mut first = None;
        for x in self.start_points() {
            let cell = x.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";");
            for i in 0..sol.equations {
                let est = sol.value_at_start(i, &x);
                first.get_or_insert((x.clone(), est));
                csv.row(&[cell.clone(), i.to_string(), fmt_f64(est.mean), fmt_f64(est.std_error)]);
            }
        }
        self.write("solution.csv", &csv)?;
        let (x, est) = first.expect("at least one start point");
        Ok(Outcome {
            passed: true,
            summary: format!(
                "k={}, {} steps, u(t0, {:?}) = {:.6} ± {:.2e}, terminal fit residual {:.2e}",
                sol.k,
                sol.grid.n_steps,
                x,
                est.mean,
                est.std_error,
                sol.terminal_fit_residual.iter().copied().fold(0.0, f64::max)
            ),
        })
    }

    /// `x0`, or the center of the start box followed by the probe points.
    fn start_points(&self) -> Vec<Vec<f64>> {
        let (lo, hi) = self.cfg.start_box();
        let center: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        if self.cfg.start.x0.is_some() {
            return vec![center];
        }
        let mut pts = vec![center];
        pts.extend(self.cfg.probe_points());
        pts
    }

    fn ladder(&self) -> jbsde_core::Result<Outcome> {
        self.gate()?;
        let cfg = &self.cfg;
        let ks = cfg.ladder()?;
        if ks.is_empty() {
            return Err(Error::config("no ladder given; set numerics.ladder or --ladder"));
        }
        let lc = LadderConfig {
            grid: cfg.grid()?,
            init: cfg.initial_state()?,
            n_paths: cfg.numerics.n_paths,
            seed: cfg.numerics.seed,
            solver: cfg.solver_options(),
            probes: cfg.probe_points(),
            replicates: cfg.numerics.replicates,
        };
        let report = ladder_study(&cfg.model()?, &cfg.measure()?, &ks, &lc)?;
        self.write("ladder.csv", &report.to_csv())?;
        let forward = report.decreasing(|g| g.forward, 3.0);
        let solution = report.decreasing(|g| g.solution, 3.0);
        let field = report.decreasing(|g| g.jump_field, 3.0);
        let yn = |b: bool| if b { "yes" } else { "no" };
        Ok(Outcome {
            passed: report.all_rungs_solved() && forward && solution && field,
            summary: format!(
                "ks {:?}, decreasing at 3 sigma: forward {}, solution {}, jump field {}",
                ks.iter().map(|k| k.get()).collect::<Vec<_>>(),
                yn(forward),
                yn(solution),
                yn(field)
            ),
        })
    }

    fn verify_viscosity(&self) -> jbsde_core::Result<Outcome> {
        let cfg = &self.cfg;
        let sol = self.solution()?;
        let model = cfg.model()?;
        let probes: Vec<(f64, Vec<f64>)> = cfg
            .probe_times()
            .into_iter()
            .flat_map(|t| cfg.probe_points().into_iter().map(move |x| (t, x)))
            .collect();
        let report = viscosity_report(&sol, &model, &cfg.measure()?, sol.k, &probes, FdSteps::for_solution(&sol))?;
        self.write("viscosity.csv", &report.to_csv())?;
        let terminal = terminal_consistency(&sol, &model, &cfg.probe_points(), cfg.numerics.tolerances.terminal_fit)?;
        self.write("terminal.csv", &terminal.to_csv())?;
        let max = report.max_interior();
        let tol = cfg.numerics.tolerances.viscosity;
        Ok(Outcome {
            passed: max <= tol && terminal.all_passed(),
            summary: format!(
                "{} (tolerance {tol:.1e}); terminal consistency {}",
                report.summary_line(),
                if terminal.all_passed() { "pass" } else { "fail" }
            ),
        })
    }

    fn verify_assumptions(&self) -> jbsde_core::Result<Outcome> {
        let report = self.assumptions()?;
        self.write("assumptions.csv", &report.to_csv())?;
        if !self.quiet {
            eprint!("{report}");
        }
        let failed = report.failures().count();
        Ok(Outcome {
            passed: failed == 0,
            summary: format!("{} checks, {failed} failed", report.entries.len()),
        })
    }

    fn residual(&self) -> jbsde_core::Result<Outcome> {
        let cfg = &self.cfg;
        let sol = self.solution()?;
        let model = cfg.model()?;
        let measure = cfg.measure()?;
        let fresh = simulate_with_streams(
            &model,
            &measure,
            sol.k,
            &sol.grid,
            &cfg.initial_state()?,
            cfg.numerics.n_paths,
            cfg.numerics.seed,
            Streams::FRESH,
        )?;
        let stat = bsde_residual(&sol, &model, &measure, &fresh)?;
        self.write("residual.csv", &stat.to_csv())?;
        let tol = cfg.numerics.tolerances.residual_rms;
        Ok(Outcome {
            passed: stat.max_rms() <= tol,
            summary: format!("residual RMS {:.4e} on {} fresh paths (threshold {tol:.1e})", stat.max_rms(), stat.n_paths),
        })
    }

    fn bench(&self) -> jbsde_core::Result<Outcome> {
        let cfg = &self.cfg;
        let model = cfg.model()?;
        let measure = cfg.measure()?;
        let k = cfg.truncation()?;
        let grid = cfg.grid()?;
        let init = cfg.initial_state()?;
        let n = cfg.numerics.n_paths;
        let seed = cfg.numerics.seed;

        let timed = |f: &mut dyn FnMut() -> jbsde_core::Result<()>| -> jbsde_core::Result<f64> {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_secs_f64())
        };
        let mut ens = None;
        let t_sim = timed(&mut || {
            ens = Some(simulate_forward(&model, &measure, k, &grid, &init, n, seed)?);
            Ok(())
        })?;
        let ens = ens.expect("simulated");
        let mut sol = None;
        let t_solve = timed(&mut || {
            sol = Some(solve_backward(&model, &measure, k, &grid, &ens, &cfg.solver_options())?);
            Ok(())
        })?;
        let sol = sol.expect("solved");
        let t_res = timed(&mut || {
            let fresh = simulate_with_streams(&model, &measure, k, &grid, &init, n, seed, Streams::FRESH)?;
            bsde_residual(&sol, &model, &measure, &fresh)?;
            Ok(())
        })?;
        let mut csv = Csv::new(&["stage", "seconds", "n_paths", "n_steps", "k"]);
        for (stage, s) in [("simulate", t_sim), ("solve", t_solve), ("residual", t_res)] {
            csv.row(&[stage.into(), format!("{s:.3}"), n.to_string(), grid.n_steps.to_string(), k.to_string()]);
        }
        self.write("bench.csv", &csv)?;
        Ok(Outcome {
            passed: true,
            summary: format!("simulate {t_sim:.2}s, solve {t_solve:.2}s, residual {t_res:.2}s ({n} paths)"),
        })
    }
}
