use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use vulnset::pipeline::{
    analyze_records, load_taxonomy, run_table_stage, BuildSummary, ConfigOverrides, Pipeline, PipelineConfig,
    PipelineError, Stage, StageOutput,
};

const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "vulnset",
    version,
    about = "Build a CWE-labeled vulnerability dataset from smart contract audit reports"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Token budget per chunk and per reduce group [default: 4096]
    #[arg(long, global = true)]
    chunk_length: Option<usize>,

    /// CWE candidates selected per level [default: 1]
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Sampling temperature [default: 0.8]
    #[arg(long, global = true)]
    temperature: Option<f64>,

    /// Chat-completions endpoint URL
    #[arg(long, global = true)]
    provider: Option<String>,

    #[arg(long, global = true)]
    model: Option<String>,

    /// Replay canned responses from a JSON array instead of calling a provider
    #[arg(long, global = true)]
    mock_script: Option<PathBuf>,

    /// CWE view as taxonomy JSON
    #[arg(long, global = true)]
    taxonomy: Option<PathBuf>,

    /// JSON array of CWE ids to prune from the taxonomy
    #[arg(long, global = true)]
    hardware_list: Option<PathBuf>,

    /// JSON object of CWE id -> mapping-allowed overrides
    #[arg(long, global = true)]
    mapping_notes: Option<PathBuf>,

    /// Dataset output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Intermediate artifact directory
    #[arg(long, global = true)]
    work: Option<PathBuf>,

    /// Overwrite existing records
    #[arg(long, global = true)]
    force: bool,

    /// Reports processed concurrently
    #[arg(long, global = true)]
    parallel: Option<usize>,

    /// Reuse chunk partials found in the work directory
    #[arg(long, global = true)]
    resume: bool,

    /// Directory of local clones laid out as <owner>/<repo>
    #[arg(long, global = true)]
    repo_mirror: Option<PathBuf>,

    /// Print the build summary as JSON
    #[arg(long, global = true)]
    json: bool,

    /// More logging (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every stage for each report
    Build {
        /// Report files or directories of reports
        reports: Vec<PathBuf>,
    },
    /// Split reports into token-bounded chunks
    Chunk { reports: Vec<PathBuf> },
    /// Extract project info and findings from chunked reports
    Extract { reports: Vec<PathBuf> },
    /// Assign CWE categories to extracted findings
    Classify { reports: Vec<PathBuf> },
    /// Retrieve sources and write dataset records
    Fetch { reports: Vec<PathBuf> },
    /// Category statistics and treemap over written records
    Analyze {
        /// Record directories [default: the output directory]
        dirs: Vec<PathBuf>,
    },
    /// Krippendorff's alpha over a two-column label CSV
    Alpha { labels: PathBuf },
    /// Precision, recall and F1 table from counts or scores
    Metrics { table: PathBuf },
}

impl GlobalArgs {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            chunk_length: self.chunk_length,
            k: self.k,
            temperature: self.temperature,
            model_name: self.model.clone(),
            provider_endpoint: self.provider.clone(),
            mock_script: self.mock_script.clone(),
            taxonomy: self.taxonomy.clone(),
            hardware_list: self.hardware_list.clone(),
            mapping_notes: self.mapping_notes.clone(),
            work_dir: self.work.clone(),
            out_dir: self.out.clone(),
            parallel: self.parallel,
            repo_mirror: self.repo_mirror.clone(),
            force: self.force,
            resume: self.resume,
        }
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

/// Directories expand to the regular, non-hidden files directly inside them.
fn expand_inputs(inputs: &[PathBuf]) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(input.clone());
        }
    }
    Ok(out)
}

fn print_summary(summary: &BuildSummary, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(summary).expect("summary serializes"));
        return;
    }
    println!("ok {}, failed {}", summary.ok, summary.failed);
    for record in &summary.records {
        println!("  wrote {}", record.display());
    }
    for f in &summary.failures {
        println!("  failed {} [{}]: {}", f.report.display(), f.stage, f.message);
    }
    if !summary.stage_failures.is_empty() {
        let tally: Vec<String> = summary.stage_failures.iter().map(|(s, n)| format!("{s}={n}")).collect();
        println!("failures by stage: {}", tally.join(", "));
    }
}

fn print_stage(out: &StageOutput) {
    if let Some(text) = &out.text {
        print!("{text}");
        if !text.ends_with('\n') {
            println!();
        }
    }
    for file in &out.files {
        println!("wrote {}", file.display());
    }
    for f in &out.failures {
        println!("failed {} [{}]: {}", f.report.display(), f.stage, f.message);
    }
}

fn exit_for(err: &PipelineError) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_setup() || matches!(err, PipelineError::StageDependency { .. }) {
        ExitCode::from(EXIT_USAGE)
    } else {
        ExitCode::from(EXIT_FAILED)
    }
}

fn run(cli: Cli) -> Result<ExitCode, PipelineError> {
    let config = PipelineConfig::resolve(
        cli.global.config.as_deref(),
        |k| std::env::var(k).ok(),
        &cli.global.overrides(),
    )?;
    let json = cli.global.json;
    let (stage, inputs) = match cli.command {
        Command::Build { reports } => {
            let reports = expand_inputs(&reports).map_err(|source| PipelineError::Io {
                path: "inputs".into(),
                source,
            })?;
            if reports.is_empty() {
                return Err(PipelineError::Usage("no input reports given".into()));
            }
            let pipeline = Pipeline::from_config(config)?;
            let summary = pipeline.run_build(&reports)?;
            print_summary(&summary, json);
            return Ok(if summary.ok > 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILED)
            });
        }
        Command::Chunk { reports } => (Stage::Chunk, reports),
        Command::Extract { reports } => (Stage::Extract, reports),
        Command::Classify { reports } => (Stage::Classify, reports),
        Command::Fetch { reports } => (Stage::Fetch, reports),
        Command::Analyze { dirs } => {
            let tree = load_taxonomy(&config)?;
            let dirs = if dirs.is_empty() {
                vec![config.out_dir.clone()]
            } else {
                dirs
            };
            let out = analyze_records(&dirs, &tree, &config.severity, &config.out_dir)?;
            print_stage(&out);
            return Ok(ExitCode::SUCCESS);
        }
        Command::Alpha { labels } => (Stage::Alpha, vec![labels]),
        Command::Metrics { table } => (Stage::Metrics, vec![table]),
    };
    let out = match stage {
        Stage::Alpha | Stage::Metrics => run_table_stage(stage, &inputs)?,
        _ => {
            let inputs = expand_inputs(&inputs).map_err(|source| PipelineError::Io {
                path: "inputs".into(),
                source,
            })?;
            Pipeline::from_config(config)?.run_stage(stage, &inputs)?
        }
    };
    print_stage(&out);
    Ok(if out.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILED)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    match run(cli) {
        Ok(code) => code,
        Err(e) => exit_for(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_shape_is_valid() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn directories_expand_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.md", "a.md", ".hidden.md"] {
            std::fs::write(dir.path().join(name), "x").unwrap();
        }
        let files = expand_inputs(&[dir.path().to_path_buf()]).unwrap();
        let names: Vec<_> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.md", "b.md"]);
    }
}
