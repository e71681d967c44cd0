//! File-based front end for chain documents: `validate`, `evaluate`,
//! `simulate`, `compare` and `optimize`.
//!
//! Exit codes: 0 success, 1 parse or validation error, 2 instability,
//! 3 I/O error, 4 search-space cap exceeded.

pub mod document;
pub mod report;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use qchain_core::{
    all_task_times, compare, composition_gap, optimize_exhaustive, selfish_baseline, simulate,
    stability_check, AnalyticError, BranchMode, ComposeError, CompositionResult, EvalOptions,
    IterationTimeConvention, SimConfig, SimError, DEFAULT_SEARCH_CAP,
};

pub use document::{parse_chain_document, ChainDocument, DocumentError, Workload};
pub use report::RunReport;

use document::{assignment_to_doc, IterationArg, ModeArg};
use report::{
    sig6, stability_table, table, CommandEcho, ObjectiveArg, OptimizationReport, Plan, TaskTime,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Invalid = 1,
    Unstable = 2,
    Io = 3,
    CapExceeded = 4,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Document(#[from] DocumentError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn status(&self) -> Status {
        match self {
            CliError::Io { .. } | CliError::Csv(_) => Status::Io,
            CliError::Document(_) => Status::Invalid,
            CliError::Analytic(AnalyticError::Unstable { .. }) => Status::Unstable,
            CliError::Analytic(_) => Status::Invalid,
            CliError::Sim(SimError::UnstableModel { .. }) => Status::Unstable,
            CliError::Sim(_) => Status::Invalid,
            CliError::Compose(ComposeError::SearchSpaceTooLarge { .. }) => Status::CapExceeded,
            CliError::Compose(ComposeError::NoStableAssignment { .. }) => Status::Unstable,
            CliError::Compose(ComposeError::Model(_)) => Status::Invalid,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "qchain",
    version,
    about = "Response times of queued service chains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate a chain document.
    Validate { file: PathBuf },
    /// Analytic per-task response times and station utilizations.
    Evaluate {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Discrete-event simulation of the document's assignment.
    Simulate {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Analytic times next to simulated means and confidence intervals.
    Compare {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Exhaustive search for the best assignment.
    Optimize {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
        /// Also report the selfish baseline and the gap to the optimum.
        #[arg(long)]
        selfish: bool,
        /// Largest number of assignments to enumerate.
        #[arg(long, default_value_t = DEFAULT_SEARCH_CAP)]
        cap: u64,
    },
}

#[derive(Debug, Args)]
struct IoArgs {
    file: PathBuf,
    /// Write the full machine report as JSON.
    #[arg(long, value_name = "FILE.json")]
    out: Option<PathBuf>,
    /// Write per-task rows as CSV.
    #[arg(long, value_name = "FILE.csv")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    iteration: Option<IterationArg>,
}

#[derive(Debug, Args)]
struct SimArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = SimConfig::default().jobs_per_task)]
    jobs_per_task: u64,
    #[arg(long, default_value_t = SimConfig::default().replications)]
    replications: usize,
    /// Fraction of each task's jobs discarded as warm-up.
    #[arg(long, default_value_t = SimConfig::default().warmup_fraction)]
    warmup: f64,
    /// Threads running replications; the report does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl SimArgs {
    fn config(&self) -> SimConfig {
        SimConfig {
            seed: self.seed,
            jobs_per_task: self.jobs_per_task,
            replications: self.replications,
            warmup_fraction: self.warmup,
            workers: self.jobs.max(1),
            ..SimConfig::default()
        }
    }
}

/// Flag, then document option, then the command's own default.
fn resolve_options(
    flags: &EvalArgs,
    doc: &document::OptionsDoc,
    default_mode: ModeArg,
) -> (ModeArg, IterationArg) {
    (
        flags.mode.or(doc.branch_mode).unwrap_or(default_mode),
        flags
            .iteration
            .or(doc.iteration)
            .unwrap_or(IterationArg::Total),
    )
}

fn eval_options(mode: ModeArg, iteration: IterationArg) -> EvalOptions {
    EvalOptions::new(
        BranchMode::from(mode),
        IterationTimeConvention::from(iteration),
    )
}

fn load(path: &Path) -> Result<(ChainDocument, Workload), CliError> {
    let bytes = std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| DocumentError::Parse {
        line: 0,
        column: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let doc = parse_chain_document(&text)?;
    let workload = doc.to_workload()?;
    Ok((doc, workload))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Rows of `task_id, analytic, simulated_mean, ci_halfwidth, rel_error`.
type CsvRow = (String, Option<f64>, Option<f64>, Option<f64>, Option<f64>);

fn write_task_csv(path: &Path, rows: &[CsvRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "task_id",
        "analytic",
        "simulated_mean",
        "ci_halfwidth",
        "rel_error",
    ])?;
    for row in rows {
        w.serialize(row)?;
    }
    write_file(
        path,
        &w.into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?,
    )
}

fn write_replication_csv(path: &Path, rows: &[(usize, String, f64)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["replication", "task_id", "mean"])?;
    for row in rows {
        w.serialize(row)?;
    }
    write_file(
        path,
        &w.into_inner()
            .map_err(|e| csv::Error::from(e.into_error()))?,
    )
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

struct Run<'a> {
    out: &'a mut dyn Write,
    report: RunReport,
    json: Option<PathBuf>,
}

impl Run<'_> {
    fn print(&mut self, text: &str) {
        let _ = self.out.write_all(text.as_bytes());
    }

    /// Records the outcome and writes the machine report if requested.
    fn finish(mut self, result: Result<(), CliError>, err: &mut dyn Write) -> Status {
        let mut status = match &result {
            Ok(()) => Status::Ok,
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                self.report.status.error = Some(e.to_string());
                e.status()
            }
        };
        self.report.status.exit_code = status as i32;
        if let Some(path) = &self.json {
            if let Err(e) = write_file(path, self.report.to_json().as_bytes()) {
                let _ = writeln!(err, "error: {e}");
                if status == Status::Ok {
                    status = Status::Io;
                }
            }
        }
        status
    }
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn run_command<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(rendered.as_bytes());
                    Status::Ok as i32
                }
                _ => {
                    let _ = err.write_all(rendered.as_bytes());
                    Status::Invalid as i32
                }
            };
        }
    };
    dispatch(cli.command, out, err) as i32
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Status {
    match command {
        Command::Validate { file } => match load(&file) {
            Ok((_, w)) => {
                let _ = writeln!(
                    out,
                    "{}: valid ({} steps, {} tasks)",
                    file_label(&file),
                    w.model.steps().len(),
                    w.model.tasks().len()
                );
                Status::Ok
            }
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                e.status()
            }
        },
        Command::Evaluate { io, eval } => with_document(
            &io,
            out,
            err,
            |doc_opts| {
                let (mode, iteration) = resolve_options(&eval, doc_opts, ModeArg::Paper);
                CommandEcho {
                    branch_mode: Some(mode),
                    iteration: Some(iteration),
                    ..echo("evaluate", &io.file)
                }
            },
            |run, w| {
                let opts = echo_options(&run.report.command);
                run_evaluate(run, w, opts, io.csv.as_deref())
            },
        ),
        Command::Simulate { io, sim } => with_document(
            &io,
            out,
            err,
            |_| CommandEcho {
                seed: Some(sim.seed),
                ..echo("simulate", &io.file)
            },
            |run, w| run_simulate(run, w, sim.config(), io.csv.as_deref()),
        ),
        Command::Compare { io, eval, sim } => with_document(
            &io,
            out,
            err,
            |doc_opts| {
                let (mode, iteration) = resolve_options(&eval, doc_opts, ModeArg::Expected);
                CommandEcho {
                    branch_mode: Some(mode),
                    iteration: Some(iteration),
                    seed: Some(sim.seed),
                    ..echo("compare", &io.file)
                }
            },
            |run, w| {
                let opts = echo_options(&run.report.command);
                run_compare(run, w, opts, sim.config(), io.csv.as_deref())
            },
        ),
        Command::Optimize {
            io,
            eval,
            objective,
            selfish,
            cap,
        } => with_document(
            &io,
            out,
            err,
            |doc_opts| {
                let (mode, iteration) = resolve_options(&eval, doc_opts, ModeArg::Paper);
                CommandEcho {
                    branch_mode: Some(mode),
                    iteration: Some(iteration),
                    objective: Some(objective),
                    selfish: Some(selfish),
                    cap: Some(cap),
                    ..echo("optimize", &io.file)
                }
            },
            |run, w| {
                let opts = echo_options(&run.report.command);
                run_optimize(run, w, opts, objective, selfish, cap, io.csv.as_deref())
            },
        ),
    }
}

fn echo(name: &str, file: &Path) -> CommandEcho {
    CommandEcho {
        name: name.into(),
        file: file_label(file),
        branch_mode: None,
        iteration: None,
        seed: None,
        objective: None,
        selfish: None,
        cap: None,
    }
}

fn echo_options(echo: &CommandEcho) -> EvalOptions {
    eval_options(
        echo.branch_mode.unwrap_or(ModeArg::Paper),
        echo.iteration.unwrap_or(IterationArg::Total),
    )
}

fn with_document(
    io: &IoArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
    make_echo: impl FnOnce(&document::OptionsDoc) -> CommandEcho,
    body: impl FnOnce(&mut Run<'_>, &Workload) -> Result<(), CliError>,
) -> Status {
    let (_, workload) = match load(&io.file) {
        Ok(loaded) => loaded,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return e.status();
        }
    };
    let mut run = Run {
        out,
        report: RunReport::new(make_echo(&workload.options)),
        json: io.out.clone(),
    };
    let result = body(&mut run, &workload);
    run.finish(result, err)
}

fn options_line(echo: &CommandEcho) -> String {
    let mut parts = vec![echo.name.clone(), echo.file.clone()];
    if let Some(m) = echo.branch_mode {
        parts.push(format!("branch mode {}", enum_name(&m)));
    }
    if let Some(i) = echo.iteration {
        parts.push(format!("iteration {}", enum_name(&i)));
    }
    if let Some(s) = echo.seed {
        parts.push(format!("seed {s}"));
    }
    if let Some(o) = echo.objective {
        parts.push(format!("objective {}", enum_name(&o)));
    }
    parts.join(", ") + "\n"
}

fn enum_name<T: clap::ValueEnum>(v: &T) -> String {
    v.to_possible_value()
        .map(|p| p.get_name().to_string())
        .unwrap_or_default()
}

/// Fills in the stability table and prints it; instability is an error.
fn check_stability(run: &mut Run<'_>, w: &Workload) -> Result<(), CliError> {
    let stability = stability_check(&w.model, &w.assignment)?;
    run.print(&format!("\n{}", stability_table(&stability)));
    let unstable = stability
        .first_unstable()
        .map(|s| (s.label.clone(), s.lambda_eff, s.mu, s.rho));
    run.report.stability = Some(stability);
    match unstable {
        Some((station, lambda_eff, mu, rho)) => Err(AnalyticError::Unstable {
            station,
            lambda_eff,
            mu,
            rho,
        }
        .into()),
        None => Ok(()),
    }
}

fn analytic_times(
    run: &mut Run<'_>,
    w: &Workload,
    opts: EvalOptions,
) -> Result<Vec<(String, qchain_core::ResponseTime)>, CliError> {
    let times = all_task_times(&w.model, &w.assignment, opts)?;
    run.report.tasks = times
        .iter()
        .map(|(id, t)| TaskTime {
            task_id: id.clone(),
            time: t.value(),
        })
        .collect();
    Ok(times)
}

fn run_evaluate(
    run: &mut Run<'_>,
    w: &Workload,
    opts: EvalOptions,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let header = options_line(&run.report.command);
    run.print(&header);
    check_stability(run, w)?;
    let times = analytic_times(run, w, opts)?;
    let rows: Vec<Vec<String>> = times
        .iter()
        .map(|(id, t)| vec![id.clone(), sig6(t.value())])
        .collect();
    run.print(&format!("\n{}", table(&["task", "T"], &rows)));
    if let Some(path) = csv {
        let rows: Vec<CsvRow> = times
            .iter()
            .map(|(id, t)| (id.clone(), Some(t.value()), None, None, None))
            .collect();
        write_task_csv(path, &rows)?;
    }
    Ok(())
}

fn run_simulate(
    run: &mut Run<'_>,
    w: &Workload,
    config: SimConfig,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let header = options_line(&run.report.command);
    run.print(&header);
    check_stability(run, w)?;
    let sim = simulate(&w.model, &w.assignment, &config)?;
    let rows: Vec<Vec<String>> = sim
        .tasks
        .iter()
        .map(|t| {
            vec![
                t.task_id.clone(),
                sig6(t.mean),
                sig6(t.half_width),
                t.completed.to_string(),
            ]
        })
        .collect();
    run.print(&format!(
        "\n{}",
        table(&["task", "mean", "ci_halfwidth", "completed"], &rows)
    ));
    let rows: Vec<Vec<String>> = sim
        .stations
        .iter()
        .map(|s| {
            vec![
                s.station.clone(),
                sig6(s.utilization),
                sig6(s.mean_queue_length),
                s.mean_sojourn.map(sig6).unwrap_or_else(|| "-".into()),
                sig6(s.throughput),
            ]
        })
        .collect();
    run.print(&format!(
        "\n{}",
        table(
            &[
                "station",
                "utilization",
                "mean_in_system",
                "sojourn",
                "throughput"
            ],
            &rows
        )
    ));
    if let Some(path) = csv {
        write_replication_csv(path, &sim.replication_rows())?;
    }
    run.report.simulation = Some(sim);
    Ok(())
}

fn run_compare(
    run: &mut Run<'_>,
    w: &Workload,
    opts: EvalOptions,
    config: SimConfig,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let header = options_line(&run.report.command);
    run.print(&header);
    check_stability(run, w)?;
    let times = analytic_times(run, w, opts)?;
    let sim = simulate(&w.model, &w.assignment, &config)?;
    let cmp = compare(&times, &sim)?;
    let rows: Vec<Vec<String>> = cmp
        .tasks
        .iter()
        .map(|t| {
            vec![
                t.task_id.clone(),
                sig6(t.analytic),
                sig6(t.simulated_mean),
                sig6(t.ci_half_width),
                sig6(t.rel_error),
                if t.within_ci { "yes" } else { "NO" }.into(),
            ]
        })
        .collect();
    run.print(&format!(
        "\n{}",
        table(
            &[
                "task",
                "analytic",
                "simulated",
                "ci_halfwidth",
                "rel_error",
                "within_ci"
            ],
            &rows
        )
    ));
    if !cmp.all_within_ci() {
        run.print("\nanalytic value outside the simulated confidence interval for some task\n");
    }
    if let Some(path) = csv {
        let rows: Vec<CsvRow> = cmp
            .tasks
            .iter()
            .map(|t| {
                (
                    t.task_id.clone(),
                    Some(t.analytic),
                    Some(t.simulated_mean),
                    Some(t.ci_half_width),
                    Some(t.rel_error),
                )
            })
            .collect();
        write_task_csv(path, &rows)?;
    }
    run.report.simulation = Some(sim);
    run.report.comparison = Some(cmp);
    Ok(())
}

fn plan(w: &Workload, r: &CompositionResult) -> Plan {
    Plan {
        assignment: assignment_to_doc(&w.model, &r.assignment),
        task_times: r.task_times.clone(),
        objective: r.objective,
        evaluated: r.evaluated,
    }
}

fn plan_table(title: &str, p: &Plan) -> String {
    let mut rows = Vec::new();
    for (task, outcome) in &p.task_times {
        let steps = p.assignment.get(task).map(|row| {
            row.iter()
                .map(|(s, c)| format!("{s}={c}"))
                .collect::<Vec<_>>()
                .join(" ")
        });
        let time = match outcome {
            qchain_core::TaskOutcome::Stable { time } => sig6(time.value()),
            qchain_core::TaskOutcome::Unstable { station, .. } => format!("unstable at {station}"),
        };
        rows.push(vec![task.clone(), time, steps.unwrap_or_default()]);
    }
    let objective = p.objective.map(sig6).unwrap_or_else(|| "unstable".into());
    format!(
        "\n{title}: objective {objective} ({} assignments evaluated)\n{}",
        p.evaluated,
        table(&["task", "T", "assignment"], &rows)
    )
}

fn run_optimize(
    run: &mut Run<'_>,
    w: &Workload,
    opts: EvalOptions,
    objective: ObjectiveArg,
    selfish: bool,
    cap: u64,
    csv: Option<&Path>,
) -> Result<(), CliError> {
    let header = options_line(&run.report.command);
    run.print(&header);
    let best = optimize_exhaustive(&w.model, objective.into(), opts, cap)?;
    let optimum = plan(w, &best);
    run.print(&plan_table("optimum", &optimum));
    let mut report = OptimizationReport {
        optimum,
        selfish: None,
        gap: None,
    };
    if selfish {
        let base = selfish_baseline(&w.model, objective.into(), opts, cap)?;
        let gap = composition_gap(&base, &best);
        let p = plan(w, &base);
        run.print(&plan_table("selfish", &p));
        run.print(&match gap {
            qchain_core::CompositionGap::NoGap => "\ngap: none\n".to_string(),
            qchain_core::CompositionGap::Gap { absolute, relative } => {
                format!("\ngap: {} ({}%)\n", sig6(absolute), sig6(100.0 * relative))
            }
            qchain_core::CompositionGap::SelfishUnstable => {
                "\ngap: selfish composition is unstable\n".into()
            }
        });
        report.selfish = Some(p);
        report.gap = Some(gap);
    }
    run.report.tasks = best
        .task_times
        .iter()
        .filter_map(|(id, o)| {
            o.time().map(|time| TaskTime {
                task_id: id.clone(),
                time,
            })
        })
        .collect();
    if let Some(path) = csv {
        let rows: Vec<CsvRow> = run
            .report
            .tasks
            .iter()
            .map(|t| (t.task_id.clone(), Some(t.time), None, None, None))
            .collect();
        write_task_csv(path, &rows)?;
    }
    run.report.optimization = Some(report);
    Ok(())
}
