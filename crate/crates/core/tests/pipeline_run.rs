//! End-to-end pipeline runs on small synthetic fixtures.

use std::path::{Path, PathBuf};

use dbprune_core::embed::{write_embeddings, write_scores};
use dbprune_core::error::Error;
use dbprune_core::mask::load_mask;
use dbprune_core::pipeline::{emit_reports, run_pipeline, PipelineConfig};
use dbprune_core::synth::{gen_scores, gen_sphere_mixture};

/// Writes a 3000-row mixture plus uniform scores and returns their paths.
fn fixture(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let sizes = [1200, 600, 400, 300, 250, 150, 70, 30];
    let spreads = [0.25, 0.2, 0.1, 0.3, 0.15, 0.25, 0.2, 0.1];
    let (m, _) = gen_sphere_mixture(24, &sizes, &spreads, seed).unwrap();
    let scores = gen_scores(m.rows(), seed.wrapping_add(1000));
    let emb = dir.join("fixture.emb");
    let scr = dir.join("fixture.scr");
    write_embeddings(&emb, &m).unwrap();
    write_scores(&scr, &scores).unwrap();
    (emb, scr)
}

fn config_text(emb: &Path, scr: &Path) -> String {
    format!(
        "embeddings = {}\nscores = {}\nseed = 11\n\
         dedup.enabled = true\ndedup.k = 16\ndedup.target_keep_fraction = 0.8\n\
         score.enabled = true\nscore.mode = top_fraction\nscore.fraction = 0.5\n\
         dbp.enabled = true\ndbp.k = 10\ndbp.l = 5\ndbp.tau = 0.1\n\
         dbp.keep_fraction = 0.6\ndbp.kmeans_iters = 40\n",
        emb.display(),
        scr.display()
    )
}

#[test]
fn all_stages_disabled_yields_the_identity_mask() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, _) = fixture(dir.path(), 3);
    let cfg = PipelineConfig::parse_str(&format!("embeddings = {}\n", emb.display())).unwrap();
    let outcome = run_pipeline(&cfg).unwrap();
    assert_eq!(outcome.final_mask.len(), 3000);
    assert_eq!(outcome.final_mask.ids()[0], 0);
    assert_eq!(*outcome.final_mask.ids().last().unwrap(), 2999);
    assert!(outcome.reports.is_empty());
}

#[test]
fn three_stage_run_composes_and_hits_the_exact_target() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, scr) = fixture(dir.path(), 5);
    let cfg = PipelineConfig::parse_str(&config_text(&emb, &scr)).unwrap();
    let outcome = run_pipeline(&cfg).unwrap();

    let dedup_mask = &outcome.stage_masks[0].1;
    let score_mask = &outcome.stage_masks[1].1;
    let dbp_mask = &outcome.stage_masks[2].1;

    // nested subsets
    assert!(dbp_mask.is_subset_of(score_mask));
    assert!(score_mask.is_subset_of(dedup_mask));
    assert_eq!(dbp_mask, &outcome.final_mask);

    // score keeps exactly ceil(0.5 * dedup output)
    let expect_score = (0.5 * dedup_mask.len() as f64).ceil() as usize;
    assert_eq!(score_mask.len(), expect_score);

    // the allocator pins the final size exactly
    let expect_final = (0.6 * expect_score as f64).round() as usize;
    assert_eq!(outcome.final_mask.len(), expect_final);

    // dedup reached at least its target fraction
    assert!(dedup_mask.len() as f64 >= 0.8 * 3000.0 - 1e-9);
}

#[test]
fn identical_configs_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, scr) = fixture(dir.path(), 7);
    let cfg = PipelineConfig::parse_str(&config_text(&emb, &scr)).unwrap();

    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    let a = run_pipeline(&cfg).unwrap();
    emit_reports(&out_a, &a).unwrap();
    let b = run_pipeline(&cfg).unwrap();
    emit_reports(&out_b, &b).unwrap();

    assert_eq!(a.final_mask, b.final_mask);
    for name in [
        "mask_dedup.txt",
        "mask_clipscore.txt",
        "mask_dbp.txt",
        "mask_final.txt",
    ] {
        let bytes_a = std::fs::read(out_a.join(name)).unwrap();
        let bytes_b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "{name} differs between runs");
    }
    let csv_a = std::fs::read(out_a.join("dbp_clusters.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("dbp_clusters.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn emitted_files_are_consistent_with_the_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, scr) = fixture(dir.path(), 9);
    let cfg = PipelineConfig::parse_str(&config_text(&emb, &scr)).unwrap();
    let outcome = run_pipeline(&cfg).unwrap();
    let out = dir.path().join("out");
    emit_reports(&out, &outcome).unwrap();

    assert_eq!(
        load_mask(&out.join("mask_final.txt")).unwrap(),
        outcome.final_mask
    );

    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("stage=dedup"));
    assert!(report.contains("stage=clipscore"));
    assert!(report.contains("stage=dbp"));
    assert!(report.contains("cv_original="));
    assert!(report.contains("cv_pruned="));

    let csv = std::fs::read_to_string(out.join("dbp_clusters.csv")).unwrap();
    let rows = csv.lines().count() - 1; // header
    assert_eq!(rows, outcome.dbp_stats.as_ref().unwrap().len());
    assert!(csv.starts_with("cluster_id,members,d_inter,d_intra,complexity,prob,"));
}

#[test]
fn dedup_then_dbp_flow_prunes_in_two_steps() {
    // the common recipe: dedup to ~63% of the corpus, then density-based
    // pruning down to 60% of the survivors
    let dir = tempfile::tempdir().unwrap();
    let (emb, _) = fixture(dir.path(), 21);
    let text = format!(
        "embeddings = {}\nseed = 4\n\
         dedup.enabled = true\ndedup.k = 16\ndedup.target_keep_fraction = 0.63\n\
         dbp.enabled = true\ndbp.k = 8\ndbp.l = 5\ndbp.keep_fraction = 0.6\ndbp.kmeans_iters = 40\n",
        emb.display()
    );
    let cfg = PipelineConfig::parse_str(&text).unwrap();
    let outcome = run_pipeline(&cfg).unwrap();
    let dedup_len = outcome.stage_masks[0].1.len();
    assert!(dedup_len as f64 >= 0.63 * 3000.0 - 1e-9);
    assert_eq!(
        outcome.final_mask.len(),
        (0.6 * dedup_len as f64).round() as usize
    );
}

#[test]
fn single_stage_run_emits_one_report() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, scr) = fixture(dir.path(), 13);
    let text = format!(
        "embeddings = {}\nscores = {}\nscore.enabled = true\nscore.threshold = 0.4\n",
        emb.display(),
        scr.display()
    );
    let cfg = PipelineConfig::parse_str(&text).unwrap();
    let outcome = run_pipeline(&cfg).unwrap();
    assert_eq!(outcome.reports.len(), 1);
    assert_eq!(outcome.reports[0].stage, "clipscore");
    assert!(outcome.reports[0].output_size <= outcome.reports[0].input_size);
    assert!(outcome.dbp_stats.is_none());
}

#[test]
fn empty_selection_aborts_with_the_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, scr) = fixture(dir.path(), 15);
    let text = format!(
        "embeddings = {}\nscores = {}\nscore.enabled = true\nscore.threshold = 2.0\n",
        emb.display(),
        scr.display()
    );
    let cfg = PipelineConfig::parse_str(&text).unwrap();
    match run_pipeline(&cfg) {
        Err(Error::EmptySelection { stage }) => assert_eq!(stage, "clipscore"),
        other => panic!("expected empty selection, got {other:?}"),
    }
}

#[test]
fn score_stage_without_scores_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, _) = fixture(dir.path(), 17);
    let text = format!("embeddings = {}\nscore.enabled = true\n", emb.display());
    let cfg = PipelineConfig::parse_str(&text).unwrap();
    assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
}

#[test]
fn score_length_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (emb, _) = fixture(dir.path(), 19);
    let scr = dir.path().join("short.scr");
    write_scores(&scr, &gen_scores(10, 0)).unwrap();
    let text = format!(
        "embeddings = {}\nscores = {}\nscore.enabled = true\n",
        emb.display(),
        scr.display()
    );
    let cfg = PipelineConfig::parse_str(&text).unwrap();
    assert!(matches!(run_pipeline(&cfg), Err(Error::Data(_))));
}
