use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use second_core::backends::Backend;
use second_core::harness::{
    emit_csv, emit_heatmap_pgm, open_backend, run_dataset_parallel, BackendSpec, CdMode, DatasetRun, PlanSpec,
    RunConfig, RunConfigFile,
};
use second_core::selector::{SelectionConfig, SelectionMode};
use second_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "second", version, about = "Multi-stage selective decoding harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration over a dataset.
    Run {
        #[command(flatten)]
        opts: RunOpts,
        /// Write one PGM attention heatmap per case.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Sweep stage lists, selection modes and CD modes.
    Ablate {
        #[command(flatten)]
        opts: RunOpts,
    },
}

#[derive(Args)]
struct RunOpts {
    /// Run-config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `synthetic` or `dump:<dir>`.
    #[arg(long)]
    backend: Option<String>,
    /// Comma-separated stage resolutions, coarsest first.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<usize>>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// none, single or multi.
    #[arg(long)]
    cd: Option<String>,
    /// dynamic, fixed:F, reversed or all.
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

impl RunOpts {
    fn config_file(&self) -> Result<RunConfigFile, Error> {
        let mut file = match &self.config {
            Some(path) => RunConfigFile::load(path)?,
            None => RunConfigFile::default(),
        };
        if let Some(b) = &self.backend {
            let spec: BackendSpec = b.parse()?;
            // keep fixture settings from the file when only the kind is named
            if !(matches!(spec, BackendSpec::Synthetic { .. }) && matches!(file.backend, BackendSpec::Synthetic { .. }))
            {
                file.backend = spec;
            }
        }
        if let Some(stages) = &self.stages {
            file.plan = PlanSpec {
                stages: Some(stages.clone()),
                base_resolution: None,
                stage_count: None,
                patch_px: file.plan.patch_px,
            };
        }
        if let Some(l) = self.lambda {
            file.selection.lambda = l;
        }
        if let Some(a) = self.alpha {
            file.cd.alpha = a;
        }
        if let Some(b) = self.beta {
            file.cd.beta = b;
        }
        if let Some(g) = self.gamma {
            file.cd.gamma = g;
        }
        if let Some(cd) = &self.cd {
            file.cd_mode = cd.parse()?;
        }
        if let Some(sel) = &self.selection {
            file.selection.mode = sel.parse()?;
        }
        if let Some(seed) = self.seed {
            file.seed = seed;
        }
        if let Some(out) = &self.out {
            file.out = Some(out.clone());
        }
        Ok(file)
    }
}

#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Data(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Data(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_report(path: &Path, cfg: &RunConfigFile, run: &DatasetRun) -> anyhow::Result<()> {
    let report = serde_json::json!({
        "config": cfg,
        "cases": run.results.len(),
        "scores": run.report,
    });
    fs::write(path, serde_json::to_string_pretty(&report)? + "\n").with_context(|| path.display().to_string())
}

fn run(opts: &RunOpts, heatmaps: bool) -> Result<(), Failure> {
    let file = opts.config_file()?;
    let cfg = file.resolve()?;
    let backend = open_backend(&cfg.backend, cfg.seed)?;
    let run = run_dataset_parallel(backend.as_ref(), backend.cases(), &cfg, opts.threads)?;

    fs::create_dir_all(&cfg.out_dir).with_context(|| cfg.out_dir.display().to_string())?;
    emit_csv(&run.results, cfg.out_dir.join("results.csv"))?;
    write_report(&cfg.out_dir.join("report.json"), &file, &run)?;
    if heatmaps {
        let dir = cfg.out_dir.join("heatmaps");
        fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
        for r in &run.results {
            emit_heatmap_pgm(&r.attention, dir.join(format!("{}.pgm", file_stem(&r.case_id))))?;
        }
    }
    let s = &run.report;
    println!(
        "{} cases  accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        run.results.len(),
        s.accuracy,
        s.precision,
        s.recall,
        s.f1
    );
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

struct AblationRow {
    label: String,
    cfg: RunConfig,
}

fn ablation_grid(base: &RunConfig, patch_px: usize) -> Result<Vec<AblationRow>, Error> {
    let mut rows = Vec::new();
    let plans: [&[usize]; 4] = [
        &[42, 84, 168, 336, 672],
        &[84, 168, 336, 672],
        &[168, 336, 672],
        &[336, 672],
    ];
    for stages in plans {
        let plan = PlanSpec {
            stages: Some(stages.to_vec()),
            base_resolution: None,
            stage_count: None,
            patch_px,
        }
        .build(base.selection.lambda, base.cd)?;
        let label = stages.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("-");
        rows.push(AblationRow {
            label: format!("stages={label}"),
            cfg: base.with_plan(plan)?,
        });
    }
    for mode in [
        SelectionMode::Dynamic,
        SelectionMode::Fixed(0.25),
        SelectionMode::Fixed(0.5),
        SelectionMode::Fixed(0.75),
        SelectionMode::Reversed,
        SelectionMode::All,
    ] {
        let selection = SelectionConfig { mode, ..base.selection };
        rows.push(AblationRow {
            label: format!("selection={mode}"),
            cfg: base.with_selection(selection)?,
        });
    }
    for mode in [CdMode::None, CdMode::Single, CdMode::Multi] {
        rows.push(AblationRow {
            label: format!("cd={mode}"),
            cfg: base.with_cd_mode(mode)?,
        });
    }
    Ok(rows)
}

fn ablate(opts: &RunOpts) -> Result<(), Failure> {
    let file = opts.config_file()?;
    let base = file.resolve()?;
    let grid = ablation_grid(&base, file.plan.patch_px)?;
    let backend: Box<dyn Backend> = open_backend(&base.backend, base.seed)?;

    fs::create_dir_all(&base.out_dir).with_context(|| base.out_dir.display().to_string())?;
    let mut out = String::from("config,stages,selection,cd,accuracy,precision,recall,f1,wall_ms\n");
    for row in &grid {
        let start = Instant::now();
        let run = run_dataset_parallel(backend.as_ref(), backend.cases(), &row.cfg, opts.threads)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        let stages = row
            .cfg
            .plan
            .resolutions()
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join("-");
        let s = &run.report;
        let line = format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.1}\n",
            row.label,
            stages,
            row.cfg.selection.mode,
            row.cfg.cd_mode,
            s.accuracy,
            s.precision,
            s.recall,
            s.f1,
            wall_ms
        );
        print!("{line}");
        out.push_str(&line);
    }
    let path = base.out_dir.join("ablation.csv");
    fs::write(&path, out).with_context(|| path.display().to_string())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { opts, heatmaps } => run(opts, *heatmaps),
        Command::Ablate { opts } => ablate(opts),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_DATA)
        }
    }
}
