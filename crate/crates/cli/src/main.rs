//! Command-line front end for the pruning toolkit.
//!
//! Subcommands mirror the pipeline stages (`dedup`, `clipscore`, `dbp`), plus
//! fixture generation (`gen`), standalone clustering (`kmeans`), the bare
//! allocation solver (`qp`), the full config-driven `pipeline`, and `bench`.
//!
//! Exit codes: 0 success, 2 config error, 3 data-format error, 4 infeasible
//! allocation, 5 empty selection.

mod bench;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use dbprune_core::dbp::{self, DbpConfig};
use dbprune_core::dedup;
use dbprune_core::embed::{load_embeddings, load_scores, write_embeddings, write_scores};
use dbprune_core::error::{Error, Result};
use dbprune_core::kmeans;
use dbprune_core::mask::write_mask;
use dbprune_core::pipeline::{self, PipelineConfig};
use dbprune_core::qp;
use dbprune_core::score;
use dbprune_core::synth;

#[derive(Parser)]
#[command(name = "dbprune", version, about = "Prune embedding-indexed datasets")]
struct Cli {
    /// Pipeline config file (used by the pipeline subcommand)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for all randomized steps
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap on worker threads
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Force single-threaded bitwise-deterministic execution
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output directory for masks and reports
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sphere-mixture fixture (EMB1 + SCR1)
    Gen {
        #[arg(long, default_value_t = 32)]
        dim: usize,
        /// Comma-separated per-cluster sizes, e.g. 5000,2000,500
        #[arg(long)]
        sizes: String,
        /// Comma-separated per-cluster spreads in [0, 1]; a single value
        /// broadcasts to every cluster
        #[arg(long, default_value = "0.2")]
        spreads: String,
        #[arg(long)]
        embeddings_out: PathBuf,
        #[arg(long)]
        scores_out: Option<PathBuf>,
        /// Optional text file with the true cluster label per row
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Fit a spherical k-means model and save it (KMC1)
    Kmeans {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = kmeans::DEFAULT_ITERS)]
        iters: usize,
        #[arg(long)]
        model_out: PathBuf,
    },
    /// Semantic dedup: cluster, then drop near-duplicates above a threshold
    Dedup {
        #[arg(long)]
        embeddings: PathBuf,
        /// Cluster count for the dedup-stage clustering
        #[arg(long)]
        k: usize,
        #[arg(long, conflicts_with = "target_keep_fraction")]
        threshold: Option<f64>,
        #[arg(long)]
        target_keep_fraction: Option<f64>,
        /// Early-stop tolerance for the threshold search (fraction of rows)
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = kmeans::DEFAULT_ITERS)]
        iters: usize,
        /// Mask file path (defaults to mask_dedup.txt under --output)
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Match-score filtering
    Clipscore {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, conflicts_with = "fraction")]
        threshold: Option<f64>,
        /// Keep the top fraction by score instead of thresholding
        #[arg(long)]
        fraction: Option<f64>,
        /// Mask file path (defaults to mask_clipscore.txt under --output)
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Density-based pruning on one embedding file
    Dbp {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = pipeline::DEFAULT_DBP_L)]
        l: usize,
        #[arg(long, default_value_t = pipeline::DEFAULT_DBP_TAU)]
        tau: f64,
        #[arg(long, conflicts_with = "keep_fraction")]
        n: Option<usize>,
        #[arg(long)]
        keep_fraction: Option<f64>,
        #[arg(long, default_value_t = pipeline::DEFAULT_BALANCE_RATIO)]
        balance_ratio: f64,
        #[arg(long, default_value_t = kmeans::DEFAULT_ITERS)]
        iters: usize,
        /// Mask file path (defaults to mask_dbp.txt under --output)
        #[arg(long)]
        mask_out: Option<PathBuf>,
        /// Per-cluster CSV path (defaults to dbp_clusters.csv under --output)
        #[arg(long)]
        csv_out: Option<PathBuf>,
    },
    /// Solve one allocation problem from a text file
    Qp {
        /// Problem file: first line N, then one "q lb ub" line per cluster
        #[arg(long)]
        problem: PathBuf,
        /// Output file with one "x_real x_int" line per cluster
        /// (stdout when omitted)
        #[arg(long)]
        solution_out: Option<PathBuf>,
    },
    /// Run the configured pipeline (dedup -> clipscore -> dbp)
    Pipeline,
    /// Time fit/assign/solve at growing scales
    Bench {
        #[arg(long, default_value = "5000,20000")]
        sizes: String,
        #[arg(long, default_value = "32,64")]
        dims: String,
        #[arg(long, default_value = "50,200")]
        ks: String,
        #[arg(long, default_value_t = 10)]
        iters: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.threads
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .expect("thread pool is configured once at startup");
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Gen {
            dim,
            sizes,
            spreads,
            embeddings_out,
            scores_out,
            labels_out,
        } => {
            let sizes: Vec<usize> = parse_list("sizes", &sizes)?;
            let mut spreads: Vec<f64> = parse_list("spreads", &spreads)?;
            if spreads.len() == 1 && sizes.len() > 1 {
                spreads = vec![spreads[0]; sizes.len()];
            }
            let (m, labels) = synth::gen_sphere_mixture(dim, &sizes, &spreads, seed)?;
            write_embeddings(&embeddings_out, &m)?;
            if let Some(path) = scores_out {
                write_scores(
                    &path,
                    &synth::gen_scores(m.rows(), seed.wrapping_add(0x5c0fe)),
                )?;
            }
            if let Some(path) = labels_out {
                let mut text = String::new();
                for l in &labels {
                    text.push_str(&format!("{l}\n"));
                }
                std::fs::write(&path, text).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
            }
            println!("gen rows={} dim={dim} clusters={}", m.rows(), sizes.len());
            Ok(())
        }
        Command::Kmeans {
            embeddings,
            k,
            iters,
            model_out,
        } => {
            let m = load_embeddings(&embeddings)?.normalize_rows()?;
            let model = kmeans::fit(&m, k, iters, seed)?;
            kmeans::save_model(&model_out, &model)?;
            println!(
                "kmeans rows={} k={k} iters_run={} objective={}",
                m.rows(),
                model.iters_run(),
                model.objective()
            );
            Ok(())
        }
        Command::Dedup {
            embeddings,
            k,
            threshold,
            target_keep_fraction,
            tol,
            iters,
            mask_out,
        } => {
            let m = load_embeddings(&embeddings)?.normalize_rows()?;
            let model = kmeans::fit(&m, k, iters, seed)?;
            let assignment = kmeans::assign(&m, &model)?;
            let threshold = match (threshold, target_keep_fraction) {
                (Some(t), None) => t,
                (None, Some(f)) => {
                    dedup::find_threshold(&m, &model, &assignment, f, tol)?.threshold
                }
                _ => {
                    return Err(Error::Config(
                        "set exactly one of --threshold and --target-keep-fraction".into(),
                    ))
                }
            };
            let mask = dedup::dedup_dataset(&m, &model, &assignment, threshold)?;
            let mask_out = artifact_path(mask_out, &cli.output, "mask_dedup.txt")?;
            write_mask(&mask_out, &mask)?;
            println!(
                "dedup input={} output={} keep_fraction={} threshold={threshold} clusters={k}",
                m.rows(),
                mask.len(),
                mask.len() as f64 / m.rows() as f64
            );
            Ok(())
        }
        Command::Clipscore {
            scores,
            threshold,
            fraction,
            mask_out,
        } => {
            let s = load_scores(&scores)?;
            let (mask, cut) = match (threshold, fraction) {
                (Some(t), None) => (score::filter_by_threshold(&s, t), t),
                (None, Some(f)) => {
                    let mask = score::filter_top_fraction(&s, f)?;
                    let cut = mask
                        .ids()
                        .iter()
                        .map(|&i| s.as_slice()[i] as f64)
                        .fold(f64::INFINITY, f64::min);
                    (mask, cut)
                }
                _ => {
                    return Err(Error::Config(
                        "set exactly one of --threshold and --fraction".into(),
                    ))
                }
            };
            if mask.is_empty() {
                return Err(Error::EmptySelection {
                    stage: "clipscore".into(),
                });
            }
            let mask_out = artifact_path(mask_out, &cli.output, "mask_clipscore.txt")?;
            write_mask(&mask_out, &mask)?;
            println!(
                "clipscore input={} kept={} cut_score={cut}",
                s.len(),
                mask.len()
            );
            Ok(())
        }
        Command::Dbp {
            embeddings,
            k,
            l,
            tau,
            n,
            keep_fraction,
            balance_ratio,
            iters,
            mask_out,
            csv_out,
        } => {
            let m = load_embeddings(&embeddings)?.normalize_rows()?;
            let n_keep = match (n, keep_fraction) {
                (Some(n), None) => n,
                (None, Some(f)) => (f * m.rows() as f64).round() as usize,
                (None, None) => {
                    (pipeline::DEFAULT_DBP_KEEP_FRACTION * m.rows() as f64).round() as usize
                }
                _ => {
                    return Err(Error::Config(
                        "set at most one of --n and --keep-fraction".into(),
                    ))
                }
            };
            let cfg = DbpConfig {
                k,
                l,
                tau,
                n_keep,
                balance_ratio,
                kmeans_iters: iters,
                seed,
            };
            let result = dbp::run_dbp(&m, &cfg)?;
            let mask_out = artifact_path(mask_out, &cli.output, "mask_dbp.txt")?;
            write_mask(&mask_out, &result.mask)?;
            let csv_out = match (csv_out, &cli.output) {
                (Some(path), _) => Some(path),
                (None, Some(dir)) => {
                    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                        path: dir.clone(),
                        source: e,
                    })?;
                    Some(dir.join("dbp_clusters.csv"))
                }
                (None, None) => None,
            };
            if let Some(path) = csv_out {
                pipeline::write_cluster_csv(&path, &result.stats)?;
            }
            println!(
                "dbp input={} output={} lambda={} cv_original={} cv_pruned={}",
                m.rows(),
                result.mask.len(),
                result.lambda,
                result.cv_original,
                result.cv_pruned
            );
            Ok(())
        }
        Command::Qp {
            problem,
            solution_out,
        } => {
            let prob = qp::load_problem(&problem)?;
            let alloc = qp::allocate(&prob)?;
            match solution_out {
                Some(path) => {
                    qp::write_solution(&path, &alloc)?;
                    println!("qp k={} lambda={}", prob.k(), alloc.lambda);
                }
                None => {
                    for (xr, xi) in alloc.x_real.iter().zip(&alloc.x_int) {
                        println!("{xr} {xi}");
                    }
                }
            }
            Ok(())
        }
        Command::Pipeline => {
            let config_path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("pipeline needs --config PATH".into()))?;
            let mut cfg = PipelineConfig::load(config_path)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(output) = &cli.output {
                cfg.output = Some(output.clone());
            }
            let out_dir = cfg.output.clone().ok_or_else(|| {
                Error::Config(
                    "no output directory: set 'output =' in the config or pass --output".into(),
                )
            })?;
            let outcome = pipeline::run_pipeline(&cfg)?;
            pipeline::emit_reports(&out_dir, &outcome)?;
            for r in &outcome.reports {
                let metrics: Vec<String> =
                    r.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!(
                    "stage={} input={} output={} wall_ms={} {}",
                    r.stage,
                    r.input_size,
                    r.output_size,
                    r.wall.as_millis(),
                    metrics.join(" ")
                );
            }
            println!(
                "pipeline rows={} final={} output_dir={}",
                outcome.original_rows,
                outcome.final_mask.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Bench {
            sizes,
            dims,
            ks,
            iters,
        } => {
            let sizes: Vec<usize> = parse_list("sizes", &sizes)?;
            let dims: Vec<usize> = parse_list("dims", &dims)?;
            let ks: Vec<usize> = parse_list("ks", &ks)?;
            bench::run(&sizes, &dims, &ks, iters, seed);
            Ok(())
        }
    }
}

/// Explicit path if given, otherwise `name` under the --output directory.
fn artifact_path(
    explicit: Option<PathBuf>,
    output: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf> {
    match explicit {
        Some(path) => Ok(path),
        None => {
            let dir = output.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "no destination for {name}: pass --mask-out PATH or --output DIR"
                ))
            })?;
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
            Ok(dir.join(name))
        }
    }
}

fn parse_list<T: std::str::FromStr>(name: &str, text: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for piece in text.split(',') {
        let piece = piece.trim();
        if piece.is_empty() {
            return Err(Error::Config(format!(
                "--{name}: empty element in {text:?}"
            )));
        }
        out.push(
            piece
                .parse()
                .map_err(|_| Error::Config(format!("--{name}: cannot parse {piece:?}")))?,
        );
    }
    if out.is_empty() {
        return Err(Error::Config(format!("--{name} must not be empty")));
    }
    Ok(out)
}
