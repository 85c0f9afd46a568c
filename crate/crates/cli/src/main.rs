mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use mvmrp::baselines::{fit_estimator, Estimator, Fitted, FittedDocument, SurveyInput};
use mvmrp::data::{
    expand_augmented, parse_questions, write_delimited, AltCovariate, CategorySet, ColumnKind, PostStratFrame,
    QuestionSpec, SurveyTable, TableSchema, CASE_ID, CHOICE, RESPONSE,
};
use mvmrp::design::{build_designs, check_rank, RankReport};
use mvmrp::formula::{parse_formula, FormulaAst};
use mvmrp::model::FitOptions;
use mvmrp::poststrat::{aggregate, CellPrediction};
use mvmrp::sim::{
    generate_superpoll, run_validation, EstimatorSpec, GeneratorSpec, Method, TruthKind, ValidationPlan,
    COPART_FORMULA, DEFAULT_FORMULA,
};
use mvmrp::{Error, ErrorClass, Result};

#[derive(Parser, Debug)]
#[command(name = "mvmrp", version, about = "Multivariate MRP via Poisson-augmented variational inference")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct SurveyArgs {
    #[arg(long)]
    formula: Option<String>,
    /// Survey file, one row per respondent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Questions as `name=a,b,c;other=x,y`.
    #[arg(long)]
    questions: Option<String>,
    #[arg(long)]
    id_column: Option<String>,
    #[arg(long)]
    weight_column: Option<String>,
    #[arg(long)]
    delimiter: Option<char>,
}

#[derive(Args, Debug, Default)]
struct FrameArgs {
    /// Model written by `fit`; defaults to `<out-dir>/state.json`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    poststrat: Option<PathBuf>,
    #[arg(long)]
    geography: Option<String>,
    #[arg(long)]
    cell_weight_column: Option<String>,
    #[arg(long)]
    cell_id_column: Option<String>,
    /// Add half the predictor variance before the softmax.
    #[arg(long)]
    variance_adjusted: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit an estimator and write `state.json` and `elbo_trace.csv`.
    Fit {
        #[command(flatten)]
        survey: SurveyArgs,
        #[arg(long)]
        estimator: Option<Estimator>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Relative ELBO change that counts as converged.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Write per-cell joint probabilities to `cells.csv`.
    Predict {
        #[command(flatten)]
        frame: FrameArgs,
    },
    /// Aggregate cell predictions to `qoi.csv` and `qoi.json`.
    Poststratify {
        #[command(flatten)]
        frame: FrameArgs,
    },
    /// Run the synthetic validation loop and write `mae.csv`.
    Simulate {
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        sample_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        truth: Option<String>,
        /// Comma-separated labels from mvmrp, copart, pp-ova, separate, naive, truth.
        #[arg(long)]
        estimator: Option<String>,
        /// Base formula for every fitted estimator except `copart`.
        #[arg(long)]
        formula: Option<String>,
        #[arg(long)]
        reference: Option<String>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
        /// Also write replication 0's sample, the frame, and the truth as CSV files.
        #[arg(long)]
        export_data: bool,
    },
    /// Parse a formula and print its syntax tree; with data, also check the design.
    CheckFormula {
        #[command(flatten)]
        survey: SurveyArgs,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Context {
    cfg: RunConfig,
    jobs: usize,
    out_dir: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let jobs = cli.jobs.or(cfg.jobs).unwrap_or(0);
    let out_dir = cli.out_dir.clone().or_else(|| cfg.out_dir.as_ref().map(|p| cfg.resolve(p))).unwrap_or_else(|| "out".into());
    let ctx = Context { cfg, jobs, out_dir };
    mvmrp::par::with_jobs(jobs, move || match cli.command {
        Command::Fit { survey, estimator, max_iter, tol } => cmd_fit(&ctx, &survey, estimator, max_iter, tol),
        Command::Predict { frame } => cmd_predict(&ctx, &frame, false),
        Command::Poststratify { frame } => cmd_predict(&ctx, &frame, true),
        Command::Simulate { replications, sample_size, seed, truth, estimator, formula, reference, max_iter, tol, export_data } => {
            let sim = SimArgs { replications, sample_size, seed, truth, estimator, formula, reference, max_iter, tol, export_data };
            cmd_simulate(&ctx, sim)
        }
        Command::CheckFormula { survey } => cmd_check(&ctx, &survey),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn formula(ctx: &Context, flag: &Option<String>) -> Result<FormulaAst> {
    let src = flag
        .clone()
        .or_else(|| ctx.cfg.formula.clone())
        .ok_or_else(|| Error::Config("no formula given (use --formula or `formula` in the config)".into()))?;
    Ok(parse_formula(&src)?)
}

fn questions(ctx: &Context, flag: &Option<String>) -> Result<Vec<QuestionSpec>> {
    match flag {
        Some(q) => parse_questions(q),
        None if !ctx.cfg.questions.is_empty() => Ok(ctx.cfg.questions.clone()),
        None => Err(Error::Config("no questions given (use --questions or [[questions]] in the config)".into())),
    }
}

/// Columns a set of formulas needs from a wide table.
fn needed_columns<'a>(asts: impl IntoIterator<Item = &'a FormulaAst>, questions: &[QuestionSpec], alts: &[AltCovariate]) -> Vec<String> {
    let mut skip: BTreeSet<String> = [CHOICE, CASE_ID, RESPONSE].iter().map(|s| s.to_string()).collect();
    skip.extend(questions.iter().map(|q| q.name.clone()));
    skip.extend(alts.iter().map(|a| a.name.clone()));
    let mut cols: BTreeSet<String> = BTreeSet::new();
    for ast in asts {
        cols.extend(ast.variables().into_iter().filter(|v| !skip.contains(v)));
    }
    for a in alts {
        cols.extend(a.keys.iter().cloned());
    }
    cols.into_iter().collect()
}

fn delimiter(c: Option<char>) -> Result<u8> {
    match c {
        None => Ok(b','),
        Some(c) if c.is_ascii() => Ok(c as u8),
        Some(c) => Err(Error::Config(format!("delimiter `{c}` is not a single ASCII character"))),
    }
}

fn load_survey(ctx: &Context, args: &SurveyArgs, asts: &[&FormulaAst], alts: &[AltCovariate]) -> Result<(SurveyTable, CategorySet)> {
    let qs = questions(ctx, &args.questions)?;
    let path = args
        .data
        .clone()
        .or_else(|| ctx.cfg.survey.path.as_ref().map(|p| ctx.cfg.resolve(p)))
        .ok_or_else(|| Error::Config("no survey data given (use --data or [survey] path)".into()))?;
    let mut schema = TableSchema { delimiter: delimiter(args.delimiter.or(ctx.cfg.survey.delimiter))?, ..Default::default() };
    for c in needed_columns(asts.iter().copied(), &qs, alts) {
        schema = schema.column(c, ColumnKind::Auto);
    }
    if let Some(id) = args.id_column.clone().or_else(|| ctx.cfg.survey.id_column.clone()) {
        schema = schema.id(id);
    }
    if let Some(w) = args.weight_column.clone().or_else(|| ctx.cfg.survey.weight_column.clone()) {
        schema = schema.weight(w);
    }
    let survey = SurveyTable::load(&path, schema, &qs)?;
    if survey.dropped_rows > 0 {
        log::warn!("dropped {} survey rows with missing values", survey.dropped_rows);
    }
    Ok((survey, CategorySet::new(qs)?))
}

fn solver_options(ctx: &Context, max_iter: Option<usize>, tol: Option<f64>) -> Result<FitOptions> {
    let mut opts = FitOptions { solver: ctx.cfg.solver.clone(), design: ctx.cfg.design };
    if let Some(m) = max_iter {
        opts.solver.max_iter = m;
    }
    if let Some(t) = tol {
        opts.solver.elbo_rel_tol = t;
    }
    opts.solver.validate()?;
    Ok(opts)
}

fn cmd_fit(ctx: &Context, args: &SurveyArgs, estimator: Option<Estimator>, max_iter: Option<usize>, tol: Option<f64>) -> Result<()> {
    let ast = formula(ctx, &args.formula)?;
    let estimator = estimator.or(ctx.cfg.estimator).unwrap_or_default();
    let alts = ctx.cfg.alts()?;
    let (survey, categories) = load_survey(ctx, args, &[&ast], &alts)?;
    let opts = solver_options(ctx, max_iter, tol)?;
    let fitted = fit_estimator(estimator, &ast, SurveyInput { survey: &survey, categories: &categories, alts: &alts }, &opts)?;

    create_dir(&ctx.out_dir)?;
    FittedDocument::new(estimator, &fitted).save(&ctx.out_dir.join("state.json"))?;
    let mut rows = Vec::new();
    for (k, m) in fitted.models().iter().enumerate() {
        for (i, e) in m.state.elbo_trace.iter().enumerate() {
            rows.push(vec![k.to_string(), (i + 1).to_string(), e.to_string()]);
        }
        let s = &m.state.stats;
        println!(
            "model {k}: {} sweeps, converged={}, ELBO {}, {:.2}s",
            s.iterations,
            s.converged,
            m.state.final_elbo(),
            s.wall_time_secs
        );
    }
    write_delimited(&ctx.out_dir.join("elbo_trace.csv"), &["model", "iteration", "elbo"], &rows)?;
    println!("wrote {}", ctx.out_dir.display());
    Ok(())
}

fn cmd_predict(ctx: &Context, args: &FrameArgs, aggregate_cells: bool) -> Result<()> {
    let model_path = args.model.clone().unwrap_or_else(|| ctx.out_dir.join("state.json"));
    let doc = FittedDocument::load(&model_path)?;
    let fitted: Fitted = doc.into_fitted()?;
    let models = fitted.models();
    let categories = match &fitted {
        Fitted::Naive(ms) => CategorySet::new(ms.iter().flat_map(|m| m.categories.questions.clone()).collect())?,
        _ => models[0].categories.clone(),
    };
    let alts = ctx.cfg.alts()?;
    let pc = &ctx.cfg.poststrat;
    let path = args
        .poststrat
        .clone()
        .or_else(|| pc.path.as_ref().map(|p| ctx.cfg.resolve(p)))
        .ok_or_else(|| Error::Config("no post-stratification frame given (use --poststrat or [poststrat] path)".into()))?;
    let geography = args.geography.clone().or_else(|| pc.geography.clone()).unwrap_or_else(|| "state".into());
    let weight = args
        .cell_weight_column
        .clone()
        .or_else(|| pc.weight_column.clone())
        .ok_or_else(|| Error::Config("no cell weight column given (use --cell-weight-column)".into()))?;
    let mut schema = TableSchema { delimiter: delimiter(pc.delimiter)?, ..Default::default() }.weight(weight);
    for c in needed_columns(models.iter().map(|m| &m.formula), &categories.questions, &alts) {
        schema = schema.column(c, ColumnKind::Auto);
    }
    if let Some(id) = args.cell_id_column.clone().or_else(|| pc.id_column.clone()) {
        schema = schema.id(id);
    }
    let frame = PostStratFrame::load(&path, schema, &geography)?;
    let variance_adjusted = args.variance_adjusted || ctx.cfg.variance_adjusted.unwrap_or(false);
    let cells = fitted.predict(&frame, &categories, &alts, variance_adjusted)?;

    create_dir(&ctx.out_dir)?;
    if aggregate_cells {
        let report = aggregate(&cells, &categories)?;
        report.write_csv(&ctx.out_dir.join("qoi.csv"))?;
        report.write_json(&ctx.out_dir.join("qoi.json"))?;
        println!("wrote qoi.csv and qoi.json for {} geographies", report.geographies.len());
    } else {
        write_cells(&ctx.out_dir.join("cells.csv"), &cells, &categories)?;
        println!("wrote cells.csv for {} cells", cells.len());
    }
    Ok(())
}

fn write_cells(path: &Path, cells: &[CellPrediction], categories: &CategorySet) -> Result<()> {
    let labels = categories.labels();
    let rows: Vec<Vec<String>> = cells
        .iter()
        .flat_map(|c| {
            c.probs.iter().zip(&labels).map(move |(p, l)| vec![c.cell_id.clone(), c.geography.clone(), l.clone(), p.to_string()])
        })
        .collect();
    write_delimited(path, &["cell_id", "geography", "category", "probability"], &rows)
}

struct SimArgs {
    replications: Option<usize>,
    sample_size: Option<usize>,
    seed: Option<u64>,
    truth: Option<String>,
    estimator: Option<String>,
    formula: Option<String>,
    reference: Option<String>,
    max_iter: Option<usize>,
    tol: Option<f64>,
    export_data: bool,
}

fn cmd_simulate(ctx: &Context, args: SimArgs) -> Result<()> {
    let SimArgs { replications, sample_size, seed, truth, estimator, formula: formula_flag, reference, max_iter, tol, export_data } =
        args;
    let sc = &ctx.cfg.simulate;
    let mut spec: GeneratorSpec = sc.generator.clone().unwrap_or_default();
    if let Some(r) = replications {
        spec.replications = r;
    }
    if let Some(n) = sample_size {
        spec.sample_size = n;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let truth = match truth.as_deref() {
        None => sc.truth.unwrap_or_default(),
        Some("generative") => TruthKind::Generative,
        Some("superpoll") => TruthKind::Superpoll,
        Some(other) => return Err(Error::Config(format!("unknown truth `{other}` (expected generative or superpoll)"))),
    };
    let base = formula_flag.or_else(|| ctx.cfg.formula.clone()).unwrap_or_else(|| DEFAULT_FORMULA.to_string());
    let labels: Vec<String> = match estimator {
        Some(s) => s.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect(),
        None => sc.estimators.clone().unwrap_or_else(|| ["mvmrp", "copart", "pp-ova", "naive"].map(String::from).to_vec()),
    };
    let estimators = labels
        .iter()
        .map(|l| {
            Ok(match l.as_str() {
                "truth" => EstimatorSpec { label: l.clone(), method: Method::Truth },
                "copart" => EstimatorSpec::fit(l, Estimator::Mvmrp, COPART_FORMULA),
                other => EstimatorSpec::fit(l, other.parse::<Estimator>()?, &base),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let reference = reference.or_else(|| sc.reference.clone()).unwrap_or_else(|| labels[0].clone());
    let plan = ValidationPlan {
        estimators,
        reference,
        truth,
        fit: solver_options(ctx, max_iter, tol)?,
        variance_adjusted: ctx.cfg.variance_adjusted.unwrap_or(false),
        jobs: ctx.jobs,
    };
    plan.validate()?;
    let sp = generate_superpoll(&spec)?;
    if export_data {
        sp.export(&ctx.out_dir.join("data"), 0, truth)?;
    }
    let report = run_validation(&sp, &plan)?;
    report.write(&ctx.out_dir)?;
    for s in &report.summary {
        println!("{:<10} {:<28} median {:.5} mean {:.5} ({:+.1}%)", s.estimator, s.quantity, s.median, s.mean, s.pct_change);
    }
    if !report.failures.is_empty() {
        println!("{} fits failed; see failures.csv", report.failures.len());
    }
    println!("wrote {}", ctx.out_dir.join("mae.csv").display());
    Ok(())
}

fn cmd_check(ctx: &Context, args: &SurveyArgs) -> Result<()> {
    let ast = formula(ctx, &args.formula)?;
    println!("{}", serde_json::to_string_pretty(&ast.canonicalized())?);
    println!("canonical: {}", ast.canonicalized());
    if args.data.is_none() && ctx.cfg.survey.path.is_none() {
        return Ok(());
    }
    let alts = ctx.cfg.alts()?;
    let (survey, categories) = load_survey(ctx, args, &[&ast], &alts)?;
    let data = expand_augmented(&survey, &categories, &alts)?.with_response_name(&ast.response)?;
    let designs = build_designs(&ast, &data, ctx.cfg.design)?;
    println!("rows: {}  fixed columns: {}", designs.n_rows(), designs.layout.n_fixed());
    for (t, b) in designs.layout.re.iter().zip(&designs.re_blocks) {
        println!("  {}: {} levels x {} slots", t.term, b.g, b.d);
    }
    for f in &designs.fe_blocks {
        println!("  v_fe: {} levels", f.n_levels);
    }
    match check_rank(&designs.x, &designs.layout.x_names) {
        RankReport::FullRank => println!("unregularized design is full rank"),
        RankReport::Skipped { n_cols } => println!("rank check skipped ({n_cols} columns)"),
        RankReport::Deficient { rank, dependencies } => {
            println!("unregularized design is rank deficient (rank {rank}):");
            for d in dependencies {
                let on: Vec<String> = d.on.iter().map(|(n, c)| format!("{c:+.4}*{n}")).collect();
                println!("  {} = {}", d.column, on.join(" "));
            }
        }
    }
    Ok(())
}
