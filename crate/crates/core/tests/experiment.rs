use std::fs;

use rml::experiment::{
    from_long, read_long, read_summary, run_experiment, sweep_report, to_long, ExperimentSpec, KvConfig,
    REPORT_METRICS,
};
use rml::Error;

fn spec(extra: &str, out: &std::path::Path) -> ExperimentSpec {
    let text = format!(
        "name = t\nidentities = 20\nepochs = 3\nwarmup_epochs = 1\nembed_dim = 8\nnum_tokens = 4\nbatch_size = 16\n{extra}\nout_dir = {}\n",
        out.display()
    );
    ExperimentSpec::from_kv(&KvConfig::parse(&text).unwrap()).unwrap()
}

#[test]
fn one_cell_spec_writes_one_row_and_artefacts() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec("noise_rates = 0.2", dir.path());
    let summary = run_experiment(&s, 1).unwrap();
    assert!(summary.all_ok());
    let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    let cell = dir.path().join("cell-000");
    for f in ["data.txt", "model.ckpt", "history.csv", "metrics.json"] {
        assert!(cell.join(f).exists(), "{f}");
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let grid = "noise_rates = 0, 0.4\nlosses = tal, trl\nrepetitions = 2";
    run_experiment(&spec(grid, a.path()), 1).unwrap();
    run_experiment(&spec(grid, b.path()), 3).unwrap();
    let ra = fs::read(a.path().join("summary.csv")).unwrap();
    let rb = fs::read(b.path().join("summary.csv")).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(String::from_utf8(ra).unwrap().lines().count(), 9);
}

#[test]
fn summary_metrics_rederive_from_checkpoint_and_data() {
    use rml::encoder::EncoderParams;
    use rml::eval::evaluate_model;
    use rml::synth_data::{PairDataset, SplitFractions};
    let dir = tempfile::tempdir().unwrap();
    let s = spec("noise_rates = 0.3", dir.path());
    let summary = run_experiment(&s, 1).unwrap();
    let m = summary.rows[0].outcome.as_ref().unwrap();
    let cell = dir.path().join("cell-000");
    let params = EncoderParams::load(cell.join("model.ckpt")).unwrap();
    let data = PairDataset::load(cell.join("data.txt")).unwrap();
    let test = data.split(SplitFractions::default()).unwrap().test;
    let e = evaluate_model(&params, &test).unwrap();
    assert_eq!(e.metrics.rank1, m.rank1);
    assert_eq!(e.metrics.map, m.map);
    assert_eq!(e.metrics.minp, m.minp);
}

#[test]
fn failed_cells_are_recorded_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    // Two identities leave too few for the identity split.
    let mut s = spec("", dir.path());
    s.dataset.num_identities = 2;
    let summary = run_experiment(&s, 1).unwrap();
    assert!(!summary.all_ok());
    let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("error"));
}

#[test]
fn empty_or_invalid_grids_are_rejected() {
    let kv = KvConfig::parse("noise_rates = \n").unwrap();
    assert!(matches!(ExperimentSpec::from_kv(&kv), Err(Error::Config(_))));
    let kv = KvConfig::parse("noise_rates = 1.0\n").unwrap();
    assert!(matches!(ExperimentSpec::from_kv(&kv), Err(Error::Config(_))));
    let kv = KvConfig::parse("tau = 0.1\n").unwrap();
    assert!(matches!(ExperimentSpec::from_kv(&kv), Err(Error::Config(_))));
    assert!(matches!(KvConfig::parse("a = 1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
    let kv = KvConfig::parse("ccd = off\n").unwrap();
    assert_eq!(ExperimentSpec::from_kv(&kv).unwrap().ccd, vec![false]);
}

#[test]
fn tau_sweep_report_is_sorted_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec("noise_rates = 0.2\ntaus = 0.1, 0.005, 0.03", dir.path());
    run_experiment(&s, 1).unwrap();
    let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let long_text = sweep_report(&text).unwrap();
    let long = read_long(&long_text).unwrap();
    assert!(long.iter().all(|r| r.axis == "tau"));
    let xs: Vec<f64> = long.iter().filter(|r| r.metric == "rank1").map(|r| r.x).collect();
    assert_eq!(xs, vec![0.005, 0.03, 0.1]);

    let records = read_summary(&text).unwrap();
    let back = from_long(&to_long(&records), "tau").unwrap();
    let mut want = records.clone();
    want.sort_by(|a, b| a.keys["tau"].parse::<f64>().unwrap().total_cmp(&b.keys["tau"].parse().unwrap()));
    assert_eq!(back.len(), want.len());
    for (a, b) in back.iter().zip(&want) {
        let mut keys = b.keys.clone();
        keys.remove("cell");
        assert_eq!(a.keys, keys);
        assert_eq!(a.metrics, b.metrics);
    }
}

#[test]
fn one_row_gives_one_long_row_per_metric() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&spec("noise_rates = 0", dir.path()), 1).unwrap();
    let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let long = to_long(&read_summary(&text).unwrap());
    assert_eq!(long.len(), REPORT_METRICS.len());
}

#[test]
fn loss_ablation_ranks_the_alignment_loss_first() {
    let dir = tempfile::tempdir().unwrap();
    let kv = KvConfig::parse(&format!(
        "name = ablation\nnoise_rates = 0.5\nlosses = tal, trl, trls\nout_dir = {}\n",
        dir.path().display()
    ))
    .unwrap();
    let s = ExperimentSpec::from_kv(&kv).unwrap();
    let summary = run_experiment(&s, rml::experiment::thread_budget()).unwrap();
    assert_eq!(summary.rows.len(), 3);
    let r1: Vec<f64> = summary.rows.iter().map(|r| r.outcome.as_ref().unwrap().rank1).collect();
    assert!(r1[0] > r1[1] && r1[0] > r1[2], "{r1:?}");
}
