//! `normmerge`: merge checkpoints, inspect them, and check the least-squares
//! merging identities.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use normmerge::io::{parse_recipe, read_checkpoint, validate_alignment, write_checkpoint};
use normmerge::lsq::verify::{run_verify, VerifyConfig};
use normmerge::lsq::Matrix;
use normmerge::merge::{
    extract_task_vector, run_recipe, Checkpoint, ExcludeSet, NanCoefficients, NormSource,
};
use normmerge::{Error, ErrorCategory};
use serde_json::json;

#[derive(Parser)]
#[command(name = "normmerge", version, about = "Norm-aware model merging", args_override_self = true)]
struct Cli {
    /// Write the machine-readable merge report to this path.
    #[arg(long, global = true, value_name = "PATH")]
    report: Option<PathBuf>,

    /// Emit CSV on stdout.
    #[arg(long, global = true, conflicts_with = "json")]
    csv: bool,

    /// Emit JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Seed for randomized checks.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Recipe override, `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a merge recipe and write the merged checkpoint.
    Merge {
        recipe: PathBuf,
    },
    /// Print inverse-norm coefficients for a set of models.
    Coeffs(CoeffsArgs),
    /// Print per-tensor shapes, dtypes and norms.
    Inspect {
        path: PathBuf,
    },
    /// Check the least-squares merging identities on random instances.
    Verify(VerifyArgs),
    /// Print per-tensor norms of the difference of two checkpoints.
    Diff {
        a: PathBuf,
        b: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NormSourceArg {
    TaskVectors,
    FullWeights,
}

#[derive(Args)]
struct CoeffsArgs {
    /// Shared base checkpoint; norms default to task-vector norms when given.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, value_enum)]
    norm_source: Option<NormSourceArg>,
    /// Leave out the m/2 factor.
    #[arg(long)]
    no_global_scale: bool,
    /// Glob of tensor names to leave out. Repeatable.
    #[arg(long)]
    exclude: Vec<String>,
    #[arg(required = true)]
    models: Vec<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Input dimensions.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 4, 16])]
    d: Vec<usize>,
    /// Task counts.
    #[arg(long, value_delimiter = ',', default_values_t = [2, 3, 5])]
    tasks: Vec<usize>,
    /// Output dimensions.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3])]
    m: Vec<usize>,
    /// Random instances per combination.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Sample sizes for the isotropy experiment.
    #[arg(long, value_delimiter = ',', default_values_t = [256, 1024, 4096])]
    n_schedule: Vec<usize>,
    /// Input dimension for the isotropy experiment.
    #[arg(long, default_value_t = 8)]
    isotropy_d: usize,
    /// Write the isotropy CSV here.
    #[arg(long, value_name = "PATH")]
    csv_out: Option<PathBuf>,
}

/// A failure and the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.category() {
            ErrorCategory::Validation => 1,
            ErrorCategory::Format => 2,
            ErrorCategory::Numerical => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn validation(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };

    let mut out = std::io::stdout().lock();
    let result = match &cli.command {
        Command::Merge { recipe } => cmd_merge(&cli, recipe, &mut out),
        Command::Coeffs(args) => cmd_coeffs(&cli, args, &mut out),
        Command::Inspect { path } => cmd_inspect(&cli, path, &mut out),
        Command::Verify(args) => cmd_verify(&cli, args, &mut out),
        Command::Diff { a, b } => cmd_diff(&cli, a, b, &mut out),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn emit(out: &mut impl Write, text: &str) -> Outcome {
    out.write_all(text.as_bytes()).map_err(|e| Failure {
        code: 2,
        message: format!("writing output: {e}"),
    })
}

fn write_file(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e }.into())
}

fn load(path: &Path) -> Result<Checkpoint, Failure> {
    info!("reading {}", path.display());
    Ok(read_checkpoint(path)?)
}

/// 17 significant digits.
fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn load_grams(paths: &[PathBuf]) -> Result<BTreeMap<String, Vec<Matrix>>, Failure> {
    let mut grams: BTreeMap<String, Vec<Matrix>> = BTreeMap::new();
    let files = paths.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let Some(first) = files.first() else {
        return Ok(grams);
    };
    for (path, file) in paths.iter().zip(&files) {
        if file.tensors().keys().ne(first.tensors().keys()) {
            return Err(Error::GramShapeMismatch(format!(
                "{} covers different tensors than {}",
                path.display(),
                paths[0].display()
            ))
            .into());
        }
        for (name, t) in file.tensors() {
            let &[rows, cols] = t.shape() else {
                return Err(Error::GramShapeMismatch(format!(
                    "{name} in {} has shape {:?}",
                    path.display(),
                    t.shape()
                ))
                .into());
            };
            grams
                .entry(name.clone())
                .or_default()
                .push(Matrix::new(rows, cols, t.data().to_vec())?);
        }
    }
    Ok(grams)
}

fn cmd_merge(cli: &Cli, recipe_path: &Path, out: &mut impl Write) -> Outcome {
    let doc = parse_recipe(recipe_path, &cli.overrides)?;
    let base = doc.base_path.as_deref().map(load).transpose()?;
    let models = doc.model_paths.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let grams = load_grams(&doc.gram_paths)?;

    let (merged, mut report) = run_recipe(&doc.recipe, base.as_ref(), &models, &grams)?;
    report.label_models(doc.model_paths.iter().map(|p| p.display().to_string()));

    info!("writing {}", doc.output_path.display());
    write_checkpoint(&merged, &doc.output_path, doc.dtype_policy)?;
    let json = report.to_json() + "\n";
    if let Some(path) = &cli.report {
        write_file(path, &json)?;
    }
    if cli.json {
        emit(out, &json)
    } else if cli.csv {
        let mut text = String::from("model,norm,alpha,coefficient\n");
        for m in &report.models {
            let alpha = m.alpha.map(num).unwrap_or_default();
            text += &format!("{},{},{},{}\n", m.model_id, num(m.norm), alpha, num(m.effective_coefficient));
        }
        emit(out, &text)
    } else {
        emit(out, &report.to_string())
    }
}

fn cmd_coeffs(cli: &Cli, args: &CoeffsArgs, out: &mut impl Write) -> Outcome {
    let exclude = ExcludeSet::new(&args.exclude)?;
    let base = args.base.as_deref().map(load).transpose()?;
    let models = args.models.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;

    let mut all: Vec<Checkpoint> = base.iter().cloned().collect();
    all.extend(models.iter().cloned());
    if all.len() > 1 {
        let alignment = validate_alignment(&all, &exclude);
        if !alignment.ok {
            eprint!("{alignment}");
            return Err(validation("checkpoints are not aligned"));
        }
    }

    let source = match args.norm_source {
        Some(NormSourceArg::TaskVectors) => NormSource::TaskVectors,
        Some(NormSourceArg::FullWeights) => NormSource::FullWeights,
        None => NormSource::default_for(base.is_some()),
    };
    let norms = match (source, &base) {
        (NormSource::TaskVectors, Some(b)) => models
            .iter()
            .map(|m| extract_task_vector(b, m, &exclude)?.norm())
            .collect::<Result<Vec<_>, _>>()?,
        (NormSource::TaskVectors, None) => {
            return Err(validation("--norm-source task-vectors needs --base"));
        }
        (NormSource::FullWeights, _) => models
            .iter()
            .map(|m| m.mergeable_norm(&exclude))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let coeffs = NanCoefficients::from_norms(norms, !args.no_global_scale)?;
    let effective = coeffs.effective();
    let labels: Vec<String> = args.models.iter().map(|p| p.display().to_string()).collect();

    let text = if cli.json {
        let rows: Vec<_> = labels
            .iter()
            .enumerate()
            .map(|(i, label)| {
                json!({
                    "model": label,
                    "norm": coeffs.norms[i],
                    "alpha": coeffs.alphas[i],
                    "coefficient": effective[i],
                })
            })
            .collect();
        let doc = json!({ "norm_source": source.as_str(), "scale": coeffs.scale, "models": rows });
        serde_json::to_string_pretty(&doc).expect("json") + "\n"
    } else if cli.csv {
        let mut text = String::from("model,norm,alpha,coefficient\n");
        for (i, label) in labels.iter().enumerate() {
            text += &format!(
                "{label},{},{},{}\n",
                num(coeffs.norms[i]),
                num(coeffs.alphas[i]),
                num(effective[i])
            );
        }
        text
    } else {
        let width = labels.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut text = format!("norm_source={} scale={}\n", source.as_str(), coeffs.scale);
        text += &format!("{:<width$}  {:>22}  {:>22}  {:>22}\n", "model", "norm", "alpha", "coefficient");
        for (i, label) in labels.iter().enumerate() {
            text += &format!(
                "{label:<width$}  {:>22}  {:>22}  {:>22}\n",
                num(coeffs.norms[i]),
                num(coeffs.alphas[i]),
                num(effective[i])
            );
        }
        text
    };
    emit(out, &text)
}

fn cmd_inspect(cli: &Cli, path: &Path, out: &mut impl Write) -> Outcome {
    let ckpt = load(path)?;
    let total = ckpt.mergeable_norm(&ExcludeSet::empty())?;
    let mut rows = Vec::new();
    for name in ckpt.names() {
        let row = match ckpt.tensor(name) {
            Some(t) => (name, t.shape().to_vec(), t.dtype().as_str().to_string(), Some(t.frobenius_norm()?)),
            None => {
                let o = &ckpt.opaque()[name];
                (name, o.shape.clone(), o.dtype.clone(), None)
            }
        };
        rows.push(row);
    }

    let text = if cli.json {
        let tensors: Vec<_> = rows
            .iter()
            .map(|(name, shape, dtype, norm)| json!({ "name": name, "shape": shape, "dtype": dtype, "norm": norm }))
            .collect();
        let doc = json!({ "tensors": tensors, "norm": total, "metadata": ckpt.metadata() });
        serde_json::to_string_pretty(&doc).expect("json") + "\n"
    } else if cli.csv {
        let mut text = String::from("name,shape,dtype,norm\n");
        for (name, shape, dtype, norm) in &rows {
            let shape: Vec<String> = shape.iter().map(usize::to_string).collect();
            text += &format!("{name},{},{dtype},{}\n", shape.join("x"), norm.map(num).unwrap_or_default());
        }
        text
    } else {
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(4);
        let mut text = format!("{:<width$}  {:<16}  {:<6}  {}\n", "name", "shape", "dtype", "norm");
        for (name, shape, dtype, norm) in &rows {
            let norm = norm.map_or_else(|| "-".to_string(), |n| format!("{n:?}"));
            text += &format!("{name:<width$}  {:<16}  {dtype:<6}  {norm}\n", format!("{shape:?}"));
        }
        text += &format!("total norm: {total:?}\n");
        text
    };
    emit(out, &text)
}

fn cmd_verify(cli: &Cli, args: &VerifyArgs, out: &mut impl Write) -> Outcome {
    let config = VerifyConfig {
        seed: cli.seed,
        dims: args.d.clone(),
        task_counts: args.tasks.clone(),
        output_dims: args.m.clone(),
        instances: args.instances,
        isotropy_d: args.isotropy_d,
        n_schedule: args.n_schedule.clone(),
        ..VerifyConfig::default()
    };
    if [&config.dims, &config.task_counts, &config.output_dims]
        .iter()
        .any(|v| v.is_empty() || v.contains(&0))
        || config.instances == 0
        || config.isotropy_d == 0
    {
        return Err(validation("verify sizes must be positive"));
    }
    let report = run_verify(&config)?;
    if let Some(path) = &args.csv_out {
        write_file(path, &report.isotropy.to_csv())?;
    }

    let text = if cli.json {
        let checks: Vec<_> = report
            .checks
            .iter()
            .map(|c| {
                json!({
                    "name": c.name,
                    "passed": c.passed,
                    "cases": c.cases,
                    "worst": c.worst,
                    "tolerance": c.tolerance,
                })
            })
            .collect();
        let points: Vec<_> = report
            .isotropy
            .points
            .iter()
            .map(|p| json!({ "n": p.n, "coeff_error": p.coeff_error }))
            .collect();
        let doc = json!({ "seed": cli.seed, "checks": checks, "isotropy": points, "passed": report.passed() });
        serde_json::to_string_pretty(&doc).expect("json") + "\n"
    } else if cli.csv {
        report.isotropy.to_csv()
    } else {
        let mut text = format!("seed={}\n", cli.seed);
        for c in &report.checks {
            text += &format!("{c}\n");
        }
        for p in &report.isotropy.points {
            text += &format!("isotropy n={:<6} coeff_error={:.6e}\n", p.n, p.coeff_error);
        }
        text
    };
    emit(out, &text)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 3,
            message: "one or more checks failed".into(),
        })
    }
}

fn cmd_diff(cli: &Cli, a_path: &Path, b_path: &Path, out: &mut impl Write) -> Outcome {
    let a = load(a_path)?;
    let b = load(b_path)?;
    let only_a: Vec<&String> = a.tensors().keys().filter(|k| b.tensor(k).is_none()).collect();
    let only_b: Vec<&String> = b.tensors().keys().filter(|k| a.tensor(k).is_none()).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        let list = |v: &[&String]| v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ");
        eprintln!("only in {}: {}", a_path.display(), list(&only_a));
        eprintln!("only in {}: {}", b_path.display(), list(&only_b));
        return Err(validation("tensor names differ"));
    }

    let mut rows = Vec::new();
    let mut total_sq = 0.0;
    for (name, ta) in a.tensors() {
        let tb = &b.tensors()[name];
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            ))
            .into());
        }
        let sq: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        if !sq.is_finite() {
            return Err(Error::NonFiniteInput(format!("difference of {name}")).into());
        }
        total_sq += sq;
        rows.push((name, sq.sqrt()));
    }
    let total = total_sq.sqrt();

    let text = if cli.json {
        let tensors: Vec<_> = rows.iter().map(|(n, d)| json!({ "name": n, "delta_norm": d })).collect();
        serde_json::to_string_pretty(&json!({ "tensors": tensors, "delta_norm": total })).expect("json") + "\n"
    } else if cli.csv {
        let mut text = String::from("name,delta_norm\n");
        for (name, d) in &rows {
            text += &format!("{name},{}\n", num(*d));
        }
        text
    } else {
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(4);
        let mut text = format!("{:<width$}  delta_norm\n", "name");
        for (name, d) in &rows {
            text += &format!("{name:<width$}  {d:?}\n");
        }
        text += &format!("total delta norm: {total:?}\n");
        text
    };
    emit(out, &text)
}
