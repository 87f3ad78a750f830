//! `ncgcd`: reproducible experiments on the NC-GCD pipeline.
//!
//! Exit codes: 0 success, 1 I/O or unreadable input, 2 usage or invalid
//! parameters, 3 numeric abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncgcd::clustering::estimate_k;
use ncgcd::data::{gcd_split, load_embeddings, sample_sphere_mixture, save_embeddings};
use ncgcd::etf::{build_etf, verify_etf};
use ncgcd::scm::{agreement, match_iterations};
use ncgcd::trainer::{evaluate, train_with, write_metrics_csv, TrainConfig};
use ncgcd::{EmbeddingFormat, Error, EtfPrototypeSet, GcdDataset, HeadParams, SeededRng, SplitSpec};

/// Tolerance used when reporting ETF geometry.
const VERIFY_TOL: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "ncgcd", version, about = "Neural-collapse guided category discovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a simplex ETF prototype set and write it as CSV.
    Etf {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a sphere-mixture GCD problem (NCGD file plus split sidecar).
    Synth {
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 300.0)]
        kappa: f64,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0.5)]
        known_frac: f64,
        #[arg(long, default_value_t = 0.5)]
        labeled_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the projection head; writes metrics.csv, head.nchk, etf.csv and config.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Split sidecar; defaults to `<data>.split.json`.
        #[arg(long)]
        split: Option<PathBuf>,
        /// JSON file with TrainConfig fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        no_scm: bool,
        #[arg(long)]
        no_sup_etf: bool,
        #[arg(long)]
        no_unsup_etf: bool,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of clusters; conflicts with --estimate-k.
        #[arg(long, conflicts_with = "estimate_k")]
        k: Option<usize>,
        /// Ignore any configured K and estimate it from the data.
        #[arg(long)]
        estimate_k: bool,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint: prints a CSV header and one report row.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        etf: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        restarts: usize,
    },
    /// Match labeling A onto labeling B; prints σ (A label -> B label).
    Match {
        #[arg(long)]
        labels_a: PathBuf,
        #[arg(long)]
        labels_b: PathBuf,
        /// Where to write A's labels expressed in B's label space.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the silhouette-selected number of clusters.
    EstimateK {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        kmin: usize,
        #[arg(long, default_value_t = 20)]
        kmax: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// An error together with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Parse { .. } => 1,
            Error::NonFiniteLoss { .. } | Error::NonFiniteGradient(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn unreadable(e: Error) -> Failure {
    Failure {
        code: 1,
        message: e.to_string(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Etf {
            dim,
            classes,
            seed,
            out,
        } => cmd_etf(dim, classes, seed, &out),
        Command::Synth {
            classes,
            dim,
            kappa,
            per_class,
            known_frac,
            labeled_frac,
            seed,
            out,
        } => cmd_synth(classes, dim, kappa, per_class, known_frac, labeled_frac, seed, &out),
        Command::Train {
            data,
            split,
            config,
            out_dir,
            no_scm,
            no_sup_etf,
            no_unsup_etf,
            alpha,
            epochs,
            seed,
            k,
            estimate_k,
            quiet,
        } => (|| {
            let mut cfg = match &config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            cfg.use_scm &= !no_scm;
            cfg.use_sup_etf &= !no_sup_etf;
            cfg.use_unsup_etf &= !no_unsup_etf;
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.seed = seed.unwrap_or(cfg.seed);
            if k.is_some() {
                cfg.k = k;
            }
            if estimate_k {
                cfg.k = None;
            }
            cfg.validate()?;
            cmd_train(&cfg, &data, split.as_deref(), &out_dir, quiet)
        })(),
        Command::Eval {
            data,
            split,
            checkpoint,
            etf,
            seed,
            restarts,
        } => cmd_eval(&data, split.as_deref(), &checkpoint, &etf, seed, restarts),
        Command::Match {
            labels_a,
            labels_b,
            out,
        } => cmd_match(&labels_a, &labels_b, out.as_deref()),
        Command::EstimateK {
            data,
            kmin,
            kmax,
            seed,
        } => cmd_estimate_k(&data, kmin, kmax, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_etf(dim: usize, classes: usize, seed: u64, out: &Path) -> CmdResult {
    let etf = build_etf(dim, classes, seed)?;
    etf.write_csv(out)?;
    let report = verify_etf(&etf, VERIFY_TOL);
    println!("dim={dim} classes={classes} seed={seed}");
    println!("max_norm_dev={:e}", report.max_norm_dev);
    println!("max_pair_dev={:e}", report.max_pair_dev);
    println!("verify={}", if report.pass { "pass" } else { "fail" });
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    classes: usize,
    dim: usize,
    kappa: f64,
    per_class: usize,
    known_frac: f64,
    labeled_frac: f64,
    seed: u64,
    out: &Path,
) -> CmdResult {
    let (x, y) = sample_sphere_mixture(classes, dim, kappa, per_class, &mut SeededRng::substream(seed, 0))?;
    let ds = gcd_split(x, y, known_frac, labeled_frac, &mut SeededRng::substream(seed, 1))?;
    save_embeddings(out, EmbeddingFormat::from_path(out), &ds.features, Some(&ds.gt_labels))?;
    let sidecar = SplitSpec::sidecar_path(out);
    ds.split().write_json(&sidecar)?;
    println!("samples={} dim={dim} classes={classes}", ds.len());
    println!("known={:?}", ds.known_classes);
    println!("novel={:?}", ds.novel_classes);
    println!("labeled={}", ds.labeled_indices().len());
    println!("split={}", sidecar.display());
    Ok(())
}

fn load_dataset(data: &Path, split: Option<&Path>) -> Result<GcdDataset, Error> {
    let split = split.map_or_else(|| SplitSpec::sidecar_path(data), Path::to_path_buf);
    GcdDataset::load(data, &split)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn cmd_train(
    cfg: &TrainConfig,
    data: &Path,
    split: Option<&Path>,
    out_dir: &Path,
    quiet: bool,
) -> CmdResult {
    let ds = load_dataset(data, split)?;
    fs::create_dir_all(out_dir).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", out_dir.display()),
    })?;
    let state = train_with(cfg, &ds, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {}  all {}  old {}  new {}  flip {}",
                r.epoch,
                opt(r.loss_total),
                opt(r.acc_all),
                opt(r.acc_old),
                opt(r.acc_new),
                opt(r.flip_rate)
            );
        }
    })?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &state.metrics)?;
    state.head.save(&out_dir.join("head.nchk"))?;
    state.etf.write_csv(&out_dir.join("etf.csv"))?;
    let config_path = out_dir.join("config.json");
    fs::write(&config_path, state.config.to_json()).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", config_path.display()),
    })?;
    let last = state.metrics.last();
    println!("K={}", state.etf.num_classes());
    println!("acc_all={}", opt(last.and_then(|r| r.acc_all)));
    println!("acc_old={}", opt(last.and_then(|r| r.acc_old)));
    println!("acc_new={}", opt(last.and_then(|r| r.acc_new)));
    Ok(())
}

fn cmd_eval(
    data: &Path,
    split: Option<&Path>,
    checkpoint: &Path,
    etf: &Path,
    seed: u64,
    restarts: usize,
) -> CmdResult {
    let ds = load_dataset(data, split).map_err(unreadable)?;
    let head = HeadParams::load(checkpoint).map_err(unreadable)?;
    let etf = EtfPrototypeSet::read_csv(etf).map_err(unreadable)?;
    if head.d_in != ds.features.cols() {
        return Err(unreadable(Error::Dimension(format!(
            "checkpoint expects {} input features, data has {}",
            head.d_in,
            ds.features.cols()
        ))));
    }
    if head.d_out != etf.dim() {
        return Err(unreadable(Error::Dimension(format!(
            "checkpoint emits {} features, prototypes have dimension {}",
            head.d_out,
            etf.dim()
        ))));
    }
    let report = evaluate(&head, &etf, &ds, seed, restarts.max(1)).map_err(unreadable)?;
    let nc = report.nc.as_ref();
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    println!("acc_all,acc_old,acc_new,nc1_within_var,nc1_ratio,nc2_pair_dev,nc3_self_duality,nc4_agreement");
    println!(
        "{},{},{},{},{},{},{},{}",
        report.accuracy.all,
        report.accuracy.old,
        report.accuracy.new,
        f(nc.map(|m| m.nc1_within_var)),
        f(nc.map(|m| m.nc1_ratio)),
        f(nc.map(|m| m.nc2_pair_dev)),
        f(nc.map(|m| m.nc3_self_duality)),
        f(nc.map(|m| m.nc4_agreement)),
    );
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<usize>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse().map_err(|e| Failure {
                code: 1,
                message: format!("{}: line {}: {e}", path.display(), n + 1),
            })
        })
        .collect()
}

fn cmd_match(a: &Path, b: &Path, out: Option<&Path>) -> CmdResult {
    let la = read_labels(a)?;
    let lb = read_labels(b)?;
    if la.len() != lb.len() {
        return Err(usage(format!(
            "label files differ in length: {} vs {}",
            la.len(),
            lb.len()
        )));
    }
    let k = la.iter().chain(&lb).max().map_or(1, |m| m + 1);
    let (sigma, relabeled) = match_iterations(&la, &lb, k)?;
    let dense = sigma.to_dense().expect("square matching");
    let joined: Vec<String> = dense.iter().map(usize::to_string).collect();
    println!("sigma={}", joined.join(","));
    println!("score={}", sigma.score);
    println!("agreement={}", agreement(&relabeled, &lb));
    if let Some(out) = out {
        let text: String = relabeled.iter().map(|l| format!("{l}\n")).collect();
        fs::write(out, text).map_err(|e| Failure {
            code: 1,
            message: format!("{}: {e}", out.display()),
        })?;
    }
    Ok(())
}

fn cmd_estimate_k(data: &Path, kmin: usize, kmax: usize, seed: u64) -> CmdResult {
    if kmin < 2 || kmax < kmin {
        return Err(usage(format!(
            "invalid K range [{kmin}, {kmax}]: need 2 <= kmin <= kmax"
        )));
    }
    let loaded = load_embeddings(data, EmbeddingFormat::from_path(data))?;
    let k = estimate_k(&loaded.features, kmin, kmax, &SeededRng::new(seed))?;
    println!("{k}");
    Ok(())
}
