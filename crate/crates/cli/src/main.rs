use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use objpose::data::{write_split, Split};
use objpose::eval::{
    ablate_pruning, ablate_templates, build_test_object, build_testset, evaluate, match_rows, read_csv, write_csv,
    write_view_image, EvalConfig, EvalError, EvalReport, QueryRow,
};
use objpose::model::{InferOptions, PoseModel};
use objpose::train::{load_model, Checkpoint, TrainConfig, TrainError, Trainer};
use objpose_tensor::ParamStore;

const EXIT_CONFIG: u8 = 2;
const EXIT_EMPTY: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(name = "objpose", about = "Template-matching pose estimation on synthetic objects")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write train and test objects to a dataset cache.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 20)]
        test: usize,
        #[arg(long, default_value_t = 16_000)]
        points: usize,
    },
    /// Train a model; writes config.toml, metrics.csv and checkpoint.pmck.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// TOML config; overrides the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Dataset cache from gen-data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from out/checkpoint.pmck.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained run on held-out objects.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Skip 3D refinement.
        #[arg(long)]
        no_refine: bool,
    },
    /// Accuracy and matching runtime per keep fraction.
    AblatePrune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.9,0.7,0.5,0.3,0.1")]
        fractions: Vec<f64>,
    },
    /// Accuracy per percentage of template views kept.
    AblateTemplates {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,25,50,75,100")]
        percentages: Vec<f64>,
    },
    /// Write the matches of one query, plus the query image next to the CSV.
    MatchDump {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        object: usize,
        #[arg(long, default_value_t = 0)]
        query: usize,
    },
    /// Threshold-accuracy curves from an eval rows.csv.
    ExportCurves {
        #[arg(long)]
        rows: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        points: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Training output directory.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    objects: usize,
    #[arg(long, default_value_t = 30)]
    queries: usize,
    /// Dataset cache from gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Empty(String),
    Diverged(String),
    Other(String),
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Toml(_) | TrainError::FingerprintMismatch { .. } => {
                Failure::Config(e.to_string())
            }
            TrainError::Divergence { .. } => Failure::Diverged(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::EmptyTestset => Failure::Empty(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

struct Loaded {
    model: PoseModel,
    store: ParamStore,
    eval: EvalConfig,
    opts: InferOptions,
    data: Option<PathBuf>,
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    Ok(TrainConfig::from_toml(&text)?)
}

fn load_run(a: &RunArgs) -> Result<Loaded, Failure> {
    let cfg = read_config(&a.run.join("config.toml"))?;
    let ckpt = Checkpoint::load(&a.run.join("checkpoint.pmck"))
        .map_err(|e| Failure::Config(format!("checkpoint: {e}")))?;
    let (model, store) = load_model(&cfg, &ckpt)?;
    let eval = EvalConfig {
        seed: a.seed,
        objects: a.objects,
        queries_per_object: a.queries,
        points_per_object: cfg.points_per_object,
        view_distance: cfg.view_distance,
        ..EvalConfig::default()
    };
    let opts = InferOptions {
        schedule: cfg.prune_schedule.clone(),
        refine_top: cfg.refine_top,
        seed: a.seed,
        ..InferOptions::default()
    };
    Ok(Loaded {
        model,
        store,
        eval,
        opts,
        data: a.data.clone(),
    })
}

fn testset(l: &Loaded) -> Result<Vec<objpose::eval::TestObject>, Failure> {
    if l.eval.objects == 0 || l.eval.queries_per_object == 0 {
        return Err(EvalError::EmptyTestset.into());
    }
    Ok(build_testset(&l.eval, l.data.as_deref())?)
}

fn write_report(r: &EvalReport, out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out)?;
    r.write_rows(&out.join("rows.csv"))?;
    r.write_curves(&out.join("curves.csv"))?;
    let s = toml::to_string(&r.summary()).map_err(|e| Failure::Other(e.to_string()))?;
    std::fs::write(out.join("summary.toml"), &s)?;
    print!("{s}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData {
            out,
            seed,
            train,
            test,
            points,
        } => {
            let w = |split, n| write_split(&out, seed, split, n, points).map_err(|e| Failure::Other(e.to_string()));
            w(Split::Train, train)?;
            w(Split::Test, test)?;
            println!("wrote {train} train and {test} test objects to {}", out.display());
        }
        Cmd::Train {
            out,
            config,
            preset,
            seed,
            epochs,
            data,
            resume,
        } => {
            let mut cfg = match &config {
                Some(p) => read_config(p)?,
                None => TrainConfig::preset(&preset).ok_or_else(|| Failure::Config(format!("unknown preset {preset}")))?,
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            let mut trainer = if resume {
                let ck = Checkpoint::load(&out.join("checkpoint.pmck"))?;
                Trainer::from_checkpoint(cfg, &ck)?
            } else {
                Trainer::new(cfg)?
            };
            trainer.data_dir = data;
            trainer.run(Some(&out), |m| {
                println!(
                    "epoch {:>3}  loss {:.4}  coarse {:.4}  fine {:.4}  zoom {:.4}  shift {:.4}  local {:.4}  correct {:.1}  {:.1}s",
                    m.epoch, m.loss, m.coarse, m.fine, m.zoom, m.shift, m.local, m.correct, m.seconds
                )
            })?;
        }
        Cmd::Eval { run, out, no_refine } => {
            let mut l = load_run(&run)?;
            l.opts.refine3d = !no_refine;
            let ts = testset(&l)?;
            let r = evaluate(&l.model, &l.store, &ts, &l.opts, &l.eval)?;
            write_report(&r, &out)?;
        }
        Cmd::AblatePrune { run, out, fractions } => {
            let l = load_run(&run)?;
            let ts = testset(&l)?;
            let (table, _) = ablate_pruning(&l.model, &l.store, &ts, &l.opts, &l.eval, &fractions)?;
            write_csv(&out, &table)?;
            for r in &table {
                println!("keep {:.2}  acc {:.3}  match {:.2} ms", r.keep_fraction, r.accuracy, r.mean_match_ms);
            }
        }
        Cmd::AblateTemplates { run, out, percentages } => {
            let l = load_run(&run)?;
            let ts = testset(&l)?;
            let (table, _) = ablate_templates(&l.model, &l.store, &ts, &l.opts, &l.eval, &percentages)?;
            write_csv(&out, &table)?;
            for r in &table {
                println!("{:>5.1}%  views {:>3}  acc {:.3}", r.percentage, r.views, r.accuracy);
            }
        }
        Cmd::MatchDump {
            run,
            out,
            object,
            query,
        } => {
            let l = load_run(&run)?;
            let t = build_test_object(&l.eval, object, l.data.as_deref())?;
            let q = t.queries.get(query).ok_or_else(|| Failure::Empty(format!("no query {query}")))?;
            let all: Vec<usize> = (0..t.templates.len()).collect();
            let bank = objpose::eval::template_bank(&l.model, &l.store, &t, &all, &l.eval)?;
            let matches = l
                .model
                .matches(&l.store, q, &bank, &l.opts)
                .map_err(|e| Failure::Other(e.to_string()))?;
            write_csv(&out, &match_rows(&matches))?;
            write_view_image(q, &out.with_extension(if q.channels >= 3 { "ppm" } else { "pgm" }))?;
            println!("{} matches", matches.len());
        }
        Cmd::ExportCurves { rows, out, points } => {
            let rows: Vec<QueryRow> = read_csv(&rows).map_err(|e| Failure::Config(e.to_string()))?;
            if rows.is_empty() {
                return Err(EvalError::EmptyTestset.into());
            }
            let cfg = EvalConfig {
                curve_points: points,
                ..EvalConfig::default()
            };
            write_csv(&out, &EvalReport::from_rows(rows, &cfg).curves)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Config(m) => (EXIT_CONFIG, m),
                Failure::Empty(m) => (EXIT_EMPTY, m),
                Failure::Diverged(m) => (EXIT_DIVERGED, m),
                Failure::Other(m) => (1, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
