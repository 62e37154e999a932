//! Config-driven orchestration of the three pruning stages.
//!
//! Configs are line-oriented `key = value` text with `#` comments and dotted
//! stage prefixes:
//!
//! ```text
//! embeddings = data/train.emb
//! scores     = data/train.scr       # required when the score stage is on
//! seed       = 7
//!
//! dedup.enabled = true
//! dedup.k = 64
//! dedup.target_keep_fraction = 0.8  # or dedup.threshold = 0.85
//!
//! score.enabled = true
//! score.mode = top_fraction         # or absolute_threshold
//! score.fraction = 0.5
//!
//! dbp.enabled = true
//! dbp.k = 500
//! dbp.keep_fraction = 0.6           # or dbp.n = <count>
//! ```
//!
//! Stages run in the fixed order dedup -> clipscore -> dbp, each consuming
//! the previous stage's mask. Keep fractions are relative to the previous
//! stage's output. All randomness flows from the single config seed, salted
//! with the stage index, so toggling one stage never perturbs another's
//! stream.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crate::dbp::{self, ClusterStats, DbpConfig};
use crate::dedup::{self, DedupConfig, DedupCriterion};
use crate::embed;
use crate::error::{io_err, Error, Result};
use crate::kmeans;
use crate::mask::{self, SelectionMask};
use crate::score::{self, ScoreFilter};

pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.3;
pub const DEFAULT_DBP_K: usize = 500;
pub const DEFAULT_DBP_L: usize = 20;
pub const DEFAULT_DBP_TAU: f64 = 0.1;
pub const DEFAULT_DBP_KEEP_FRACTION: f64 = 0.6;
pub const DEFAULT_BALANCE_RATIO: f64 = 0.0;

/// Keep-count change (as a fraction of rows) below which the dedup
/// threshold search stops early.
const DEDUP_SEARCH_TOL: f64 = 1e-3;

const STAGE_SALT_DEDUP: u64 = 0;
#[allow(dead_code)] // the score stage draws no randomness; salt reserved
const STAGE_SALT_SCORE: u64 = 1;
const STAGE_SALT_DBP: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub embeddings: PathBuf,
    pub scores: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub dedup: Option<DedupConfig>,
    pub score: Option<ScoreFilter>,
    pub dbp: Option<DbpStageConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbpStageConfig {
    pub k: usize,
    pub l: usize,
    pub tau: f64,
    pub target: DbpTarget,
    pub balance_ratio: f64,
    pub kmeans_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DbpTarget {
    Count(usize),
    KeepFraction(f64),
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse_str(&text)
    }

    /// Parses the `key = value` format. Unknown and duplicate keys are
    /// config errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected 'key = value', got {raw:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if value.is_empty() {
                return Err(Error::Config(format!(
                    "line {}: empty value for {key}",
                    lineno + 1
                )));
            }
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
        }
        Self::from_entries(entries)
    }

    fn from_entries(mut entries: BTreeMap<String, String>) -> Result<Self> {
        fn take(entries: &mut BTreeMap<String, String>, key: &str) -> Option<String> {
            entries.remove(key)
        }
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(Error::Config(format!(
                    "{key}: expected true or false, got {other:?}"
                ))),
            }
        }

        let embeddings = take(&mut entries, "embeddings")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("missing required key 'embeddings'".into()))?;
        let scores = take(&mut entries, "scores").map(PathBuf::from);
        let output = take(&mut entries, "output").map(PathBuf::from);
        let seed = match take(&mut entries, "seed") {
            Some(v) => parse::<u64>("seed", &v)?,
            None => 0,
        };

        let dedup_enabled = match take(&mut entries, "dedup.enabled") {
            Some(v) => parse_bool("dedup.enabled", &v)?,
            None => false,
        };
        let dedup_k = take(&mut entries, "dedup.k");
        let dedup_threshold = take(&mut entries, "dedup.threshold");
        let dedup_target = take(&mut entries, "dedup.target_keep_fraction");
        let dedup = if dedup_enabled {
            let k = parse::<usize>(
                "dedup.k",
                &dedup_k.ok_or_else(|| {
                    Error::Config("dedup.k is required when dedup is enabled".into())
                })?,
            )?;
            let criterion = match (dedup_threshold, dedup_target) {
                (Some(t), None) => DedupCriterion::Threshold(parse("dedup.threshold", &t)?),
                (None, Some(f)) => {
                    let f = parse::<f64>("dedup.target_keep_fraction", &f)?;
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(Error::Config(format!(
                            "dedup.target_keep_fraction must be in (0, 1], got {f}"
                        )));
                    }
                    DedupCriterion::TargetKeepFraction(f)
                }
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "set exactly one of dedup.threshold and dedup.target_keep_fraction".into(),
                    ))
                }
                (None, None) => {
                    return Err(Error::Config(
                        "dedup needs dedup.threshold or dedup.target_keep_fraction".into(),
                    ))
                }
            };
            if k == 0 {
                return Err(Error::Config("dedup.k must be at least 1".into()));
            }
            Some(DedupConfig { k, criterion })
        } else {
            None
        };

        let score_enabled = match take(&mut entries, "score.enabled") {
            Some(v) => parse_bool("score.enabled", &v)?,
            None => false,
        };
        let score_mode = take(&mut entries, "score.mode");
        let score_threshold = take(&mut entries, "score.threshold");
        let score_fraction = take(&mut entries, "score.fraction");
        let score = if score_enabled {
            let mode = score_mode.unwrap_or_else(|| "absolute_threshold".into());
            match mode.as_str() {
                "absolute_threshold" => {
                    let t = match score_threshold {
                        Some(v) => parse("score.threshold", &v)?,
                        None => DEFAULT_SCORE_THRESHOLD,
                    };
                    Some(ScoreFilter::AbsoluteThreshold(t))
                }
                "top_fraction" => {
                    let f = parse::<f64>(
                        "score.fraction",
                        &score_fraction.ok_or_else(|| {
                            Error::Config("score.fraction is required for top_fraction mode".into())
                        })?,
                    )?;
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(Error::Config(format!(
                            "score.fraction must be in (0, 1], got {f}"
                        )));
                    }
                    Some(ScoreFilter::TopFraction(f))
                }
                other => {
                    return Err(Error::Config(format!(
                        "score.mode must be absolute_threshold or top_fraction, got {other:?}"
                    )))
                }
            }
        } else {
            None
        };

        let dbp_enabled = match take(&mut entries, "dbp.enabled") {
            Some(v) => parse_bool("dbp.enabled", &v)?,
            None => false,
        };
        let dbp_k = take(&mut entries, "dbp.k");
        let dbp_l = take(&mut entries, "dbp.l");
        let dbp_tau = take(&mut entries, "dbp.tau");
        let dbp_n = take(&mut entries, "dbp.n");
        let dbp_keep = take(&mut entries, "dbp.keep_fraction");
        let dbp_balance = take(&mut entries, "dbp.balance_ratio");
        let dbp_iters = take(&mut entries, "dbp.kmeans_iters");
        let dbp = if dbp_enabled {
            let target = match (dbp_n, dbp_keep) {
                (Some(n), None) => DbpTarget::Count(parse("dbp.n", &n)?),
                (None, Some(f)) => {
                    let f = parse::<f64>("dbp.keep_fraction", &f)?;
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(Error::Config(format!(
                            "dbp.keep_fraction must be in (0, 1], got {f}"
                        )));
                    }
                    DbpTarget::KeepFraction(f)
                }
                (Some(_), Some(_)) => {
                    return Err(Error::Config(
                        "set exactly one of dbp.n and dbp.keep_fraction".into(),
                    ))
                }
                (None, None) => DbpTarget::KeepFraction(DEFAULT_DBP_KEEP_FRACTION),
            };
            Some(DbpStageConfig {
                k: match dbp_k {
                    Some(v) => parse("dbp.k", &v)?,
                    None => DEFAULT_DBP_K,
                },
                l: match dbp_l {
                    Some(v) => parse("dbp.l", &v)?,
                    None => DEFAULT_DBP_L,
                },
                tau: match dbp_tau {
                    Some(v) => parse("dbp.tau", &v)?,
                    None => DEFAULT_DBP_TAU,
                },
                target,
                balance_ratio: match dbp_balance {
                    Some(v) => parse("dbp.balance_ratio", &v)?,
                    None => DEFAULT_BALANCE_RATIO,
                },
                kmeans_iters: match dbp_iters {
                    Some(v) => parse("dbp.kmeans_iters", &v)?,
                    None => kmeans::DEFAULT_ITERS,
                },
            })
        } else {
            None
        };

        if let Some(key) = entries.keys().next() {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        Ok(Self {
            embeddings,
            scores,
            output,
            seed,
            dedup,
            score,
            dbp,
        })
    }
}

/// Summary of one executed stage. Everything except `wall` is deterministic
/// for a fixed config and seed.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: String,
    pub input_size: usize,
    pub output_size: usize,
    pub wall: Duration,
    pub metrics: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub original_rows: usize,
    pub final_mask: SelectionMask,
    /// Mask after each enabled stage, in execution order.
    pub stage_masks: Vec<(String, SelectionMask)>,
    pub reports: Vec<StageReport>,
    pub dbp_stats: Option<Vec<ClusterStats>>,
}

/// Executes the enabled stages in order, composing masks over the original
/// dataset. Any stage error aborts with the stage name attached; an empty
/// intermediate selection aborts as well.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let m = embed::load_embeddings(&cfg.embeddings)?.normalize_rows()?;
    let rows = m.rows();
    let scores = match &cfg.scores {
        Some(path) => {
            let s = embed::load_scores(path)?;
            if s.len() != rows {
                return Err(Error::Data(format!(
                    "{} scores for {rows} embedding rows",
                    s.len()
                )));
            }
            Some(s)
        }
        None => None,
    };
    if cfg.score.is_some() && scores.is_none() {
        return Err(Error::Config(
            "score stage is enabled but no 'scores' file is configured".into(),
        ));
    }

    let mut mask = SelectionMask::all(rows);
    let mut stage_masks = Vec::new();
    let mut reports = Vec::new();
    let mut dbp_stats = None;

    if let Some(dedup_cfg) = &cfg.dedup {
        let start = Instant::now();
        let input_size = mask.len();
        let sub = m.subset(&mask)?;
        let model = kmeans::fit(
            &sub,
            dedup_cfg.k,
            kmeans::DEFAULT_ITERS,
            cfg.seed.wrapping_add(STAGE_SALT_DEDUP),
        )?;
        let assignment = kmeans::assign(&sub, &model)?;
        let (threshold, probes) = match dedup_cfg.criterion {
            DedupCriterion::Threshold(t) => (t, 0),
            DedupCriterion::TargetKeepFraction(f) => {
                let search = dedup::find_threshold(&sub, &model, &assignment, f, DEDUP_SEARCH_TOL)?;
                (search.threshold, search.probes)
            }
        };
        let local = dedup::dedup_dataset(&sub, &model, &assignment, threshold)?;
        if local.is_empty() {
            return Err(Error::EmptySelection {
                stage: "dedup".into(),
            });
        }
        mask = mask.compose(&local)?;
        let achieved = mask.len() as f64 / input_size as f64;
        reports.push(StageReport {
            stage: "dedup".into(),
            input_size,
            output_size: mask.len(),
            wall: start.elapsed(),
            metrics: vec![
                ("threshold".into(), format!("{threshold}")),
                ("achieved_keep_fraction".into(), format!("{achieved}")),
                ("clusters".into(), format!("{}", dedup_cfg.k)),
                ("search_probes".into(), format!("{probes}")),
            ],
        });
        stage_masks.push(("dedup".to_string(), mask.clone()));
    }

    if let Some(filter) = &cfg.score {
        let start = Instant::now();
        let input_size = mask.len();
        let sub_scores = scores.as_ref().expect("checked above").subset(&mask)?;
        let (local, metrics) = match *filter {
            ScoreFilter::AbsoluteThreshold(t) => {
                let local = score::filter_by_threshold(&sub_scores, t);
                (
                    local,
                    vec![
                        ("mode".into(), "absolute_threshold".into()),
                        ("cut_score".into(), format!("{t}")),
                    ],
                )
            }
            ScoreFilter::TopFraction(f) => {
                let local = score::filter_top_fraction(&sub_scores, f)?;
                let cut = local
                    .ids()
                    .iter()
                    .map(|&i| sub_scores.as_slice()[i])
                    .fold(f32::INFINITY, f32::min);
                (
                    local,
                    vec![
                        ("mode".into(), "top_fraction".into()),
                        ("fraction".into(), format!("{f}")),
                        ("cut_score".into(), format!("{cut}")),
                    ],
                )
            }
        };
        if local.is_empty() {
            return Err(Error::EmptySelection {
                stage: "clipscore".into(),
            });
        }
        mask = mask.compose(&local)?;
        reports.push(StageReport {
            stage: "clipscore".into(),
            input_size,
            output_size: mask.len(),
            wall: start.elapsed(),
            metrics,
        });
        stage_masks.push(("clipscore".to_string(), mask.clone()));
    }

    if let Some(stage) = &cfg.dbp {
        let start = Instant::now();
        let input_size = mask.len();
        let sub = m.subset(&mask)?;
        let n_keep = match stage.target {
            DbpTarget::Count(n) => n,
            DbpTarget::KeepFraction(f) => (f * sub.rows() as f64).round() as usize,
        };
        let dcfg = DbpConfig {
            k: stage.k,
            l: stage.l,
            tau: stage.tau,
            n_keep,
            balance_ratio: stage.balance_ratio,
            kmeans_iters: stage.kmeans_iters,
            seed: cfg.seed.wrapping_add(STAGE_SALT_DBP),
        };
        let result = dbp::run_dbp(&sub, &dcfg)?;
        if result.mask.is_empty() {
            return Err(Error::EmptySelection {
                stage: "dbp".into(),
            });
        }
        mask = mask.compose(&result.mask)?;
        reports.push(StageReport {
            stage: "dbp".into(),
            input_size,
            output_size: mask.len(),
            wall: start.elapsed(),
            metrics: vec![
                ("n_keep".into(), format!("{n_keep}")),
                ("lambda".into(), format!("{}", result.lambda)),
                ("clusters".into(), format!("{}", result.stats.len())),
                ("l_used".into(), format!("{}", result.l_used)),
                ("tau".into(), format!("{}", result.tau)),
                ("cv_original".into(), format!("{}", result.cv_original)),
                ("cv_pruned".into(), format!("{}", result.cv_pruned)),
            ],
        });
        stage_masks.push(("dbp".to_string(), mask.clone()));
        dbp_stats = Some(result.stats);
    }

    Ok(PipelineOutcome {
        original_rows: rows,
        final_mask: mask,
        stage_masks,
        reports,
        dbp_stats,
    })
}

/// Persists every intermediate mask, the final mask, the stage report lines
/// and (when the dbp stage ran) the per-cluster CSV into `dir`.
pub fn emit_reports(dir: &Path, outcome: &PipelineOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for (name, stage_mask) in &outcome.stage_masks {
        mask::write_mask(&dir.join(format!("mask_{name}.txt")), stage_mask)?;
    }
    mask::write_mask(&dir.join("mask_final.txt"), &outcome.final_mask)?;

    let report_path = dir.join("report.txt");
    let file = File::create(&report_path).map_err(|e| io_err(&report_path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: String| writeln!(w, "{line}").map_err(|e| io_err(&report_path, e));
    emit(format!(
        "rows={} final={}",
        outcome.original_rows,
        outcome.final_mask.len()
    ))?;
    for r in &outcome.reports {
        let mut line = format!(
            "stage={} input={} output={} wall_ms={}",
            r.stage,
            r.input_size,
            r.output_size,
            r.wall.as_millis()
        );
        for (k, v) in &r.metrics {
            line.push_str(&format!(" {k}={v}"));
        }
        emit(line)?;
    }
    w.flush().map_err(|e| io_err(&report_path, e))?;

    if let Some(stats) = &outcome.dbp_stats {
        write_cluster_csv(&dir.join("dbp_clusters.csv"), stats)?;
    }
    Ok(())
}

/// One row per non-empty cluster: original size, distances, complexity,
/// sampling probability, real target and both allocations.
pub fn write_cluster_csv(path: &Path, stats: &[ClusterStats]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(
        w,
        "cluster_id,members,d_inter,d_intra,complexity,prob,target_real,alloc_real,alloc_int"
    )
    .map_err(|e| io_err(path, e))?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.cluster_id,
            s.members,
            s.d_inter,
            s.d_intra,
            s.complexity,
            s.prob,
            s.target_real,
            s.alloc_real,
            s.alloc_int
        )
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
