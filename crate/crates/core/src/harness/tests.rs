use proptest::prelude::*;

use super::*;
use crate::executor::{PolicyConfig, PolicyKind, PolicyParams};
use crate::mapper::{MapperConfig, MapperParams};
use crate::planner::VinParams;
use crate::synthesizer::{SynthConfig, SynthParams};

fn res(d: &[u32]) -> Vec<EpisodeResult> {
    d.iter().enumerate().map(|(i, &d)| EpisodeResult::new("m", i, 17, d, 0)).collect()
}

#[test]
fn summary_examples() {
    let s = summarize("m", &res(&[0, 0, 2, 10])).unwrap();
    assert_eq!((s.mean, s.p75, s.success), (3.0, 2.0, 75.0));
    let z = summarize("m", &res(&[0, 0, 0])).unwrap();
    assert_eq!((z.mean, z.p75, z.success), (0.0, 0.0, 100.0));
    assert!(matches!(summarize("m", &[]), Err(HarnessError::Empty(_))));
    let row = SummaryRow { method: "Initial".into(), mean: 16.0, p75: 17.0, success: 0.0 };
    assert_eq!(row.format_row(), "Initial 16.0 / 17.0 / 0.0");
}

#[test]
fn success_radius_is_inclusive() {
    assert!(EpisodeResult::new("m", 0, 17, 3, 0).success);
    assert!(!EpisodeResult::new("m", 0, 17, 4, 0).success);
}

#[test]
fn histogram_bins_and_empty_method() {
    let cfg = HistogramConfig { width: 5, max: 20, ..HistogramConfig::default() };
    let rows = emit_histogram("m", &res(&[0, 4, 5, 19, 20, 99]), &cfg);
    assert_eq!(rows.iter().map(|r| (r.bin_lo, r.bin_hi, r.count)).collect::<Vec<_>>(), vec![(0, 5, 2), (5, 10, 1), (10, 15, 0), (15, 20, 3)]);
    let empty = emit_histogram("none", &[], &cfg);
    assert_eq!(empty.len(), 4);
    assert!(empty.iter().all(|r| r.count == 0));
    let mut mr = MethodResults::default();
    mr.push("a", res(&[1, 2]));
    mr.push("b", Vec::new());
    let csv = mr.histogram_csv(&cfg);
    assert_eq!(csv.lines().next(), Some("method,bin_lo,bin_hi,count"));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn config_defaults_and_validation() {
    let d = ExperimentConfig::from_json("{}").unwrap();
    assert_eq!(d, ExperimentConfig::default());
    assert_eq!(ExperimentConfig::from_json(&d.to_json()).unwrap(), d);
    let partial = ExperimentConfig::from_json(r#"{"episodes": 7, "noise": {"p_fail": 0.0}}"#).unwrap();
    assert_eq!((partial.episodes, partial.noise.p_fail, partial.t_max), (7, 0.0, 20));
    for bad in [
        r#"{"maps": {"test": {"start": 10, "count": 5}}}"#,
        r#"{"d_min": 20, "d_max": 18}"#,
        r#"{"d_min": 2}"#,
        r#"{"t_max": 10}"#,
        r#"{"noise": {"p_fail": 1.5}}"#,
        r#"{"memory": []}"#,
        r#"{"episodes": "many"}"#,
    ] {
        let e = ExperimentConfig::from_json(bad).unwrap_err();
        assert!(matches!(e, HarnessError::Config(_)), "{bad}: {e}");
        assert_eq!(e.exit_code(), 2);
    }
    let s = ExperimentConfig::default().with_seed(9);
    assert_eq!((s.seed, s.mapper.seed, s.planner.seed, s.synth.seed, s.policy.seed), (9, 9, 9, 9, 9));
    assert_eq!(HarnessError::MissingCheckpoints(vec!["x".into()]).exit_code(), 1);
}

fn small_cfg() -> ExperimentConfig {
    ExperimentConfig {
        episodes: 24,
        maps: MapConfig { test: SeedRange { start: 9000, count: 2 }, ..MapConfig::default() },
        ..ExperimentConfig::default()
    }
}

fn tiny_policies() -> Vec<PolicyParams> {
    let synth = SynthParams::init(3, SynthConfig::default());
    let pc = PolicyConfig { obs_hidden: 16, obs_out: 8, embed: 8, hidden: 8, ..PolicyConfig::default() };
    [PolicyKind::Ours, PolicyKind::Gru, PolicyKind::ActionOnly, PolicyKind::NnMatch].iter().map(|&k| PolicyParams::init(k, 1, pc, &synth)).collect()
}

#[test]
fn eval_cases_are_prefix_stable() {
    let cfg = small_cfg();
    let maps = cfg.maps.generate(Split::Test).unwrap();
    let a = eval_cases(0, &maps, 16, 18, 10).unwrap();
    let b = eval_cases(0, &maps, 16, 18, 4).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.episode, x.map), (y.episode, y.map));
        assert!((16..=18).contains(&x.episode.distance));
    }
}

#[test]
fn policy_eval_rows_sanity_and_determinism() {
    let cfg = small_cfg();
    let maps = cfg.maps.generate(Split::Test).unwrap();
    let pols = tiny_policies();
    let r = run_policy_eval(&cfg, &maps, &pols).unwrap();
    let names: Vec<&str> = r.results.methods.iter().map(|(m, _)| m.as_str()).collect();
    assert_eq!(
        names,
        [
            "initial",
            "open_loop_no_noise",
            "open_loop",
            "ours_all",
            "ours_10",
            "ours_5",
            "ours_env40",
            "gru_all",
            "gru_10",
            "gru_5",
            "gru_env40",
            "action_only",
            "nn_match_all",
            "nn_match_10",
            "nn_match_5",
            "nn_match_env40"
        ]
    );
    for (_, rs) in &r.results.methods {
        assert_eq!(rs.len(), cfg.episodes);
    }
    let initial = summarize("initial", r.results.get("initial").unwrap()).unwrap();
    assert!(initial.mean >= 16.0 && initial.mean <= 18.0);
    let again = run_policy_eval(&cfg, &maps, &pols).unwrap();
    assert_eq!(r.results.summary_csv().unwrap(), again.results.summary_csv().unwrap());
    assert_eq!(r.results.episodes_jsonl(), again.results.episodes_jsonl());
    let rep = replay_episode(&cfg, &maps, &pols, "ours_5", 3).unwrap();
    let row = &r.results.get("ours_5").unwrap()[3];
    assert_eq!(rep.record.final_distance, row.final_distance);
    assert_eq!(rep.signature.unwrap().entries.len(), rep.plan.len());
    assert!(matches!(replay_episode(&cfg, &maps, &pols, "bogus", 0), Err(HarnessError::Config(_))));
}

#[test]
fn sanity_chain_flags_broken_rows() {
    let mut mr = MethodResults::default();
    mr.push("initial", res(&[17, 16]));
    mr.push("open_loop_no_noise", res(&[0, 0]));
    mr.push("open_loop", res(&[0, 0]));
    let r = PolicyReport { results: mr };
    assert!(r.sanity(crate::gridworld::NoiseModel::noiseless()).is_ok());
    assert!(r.sanity(crate::gridworld::NoiseModel::default()).is_err());
}

#[test]
fn full_system_runs_with_untrained_models() {
    let cfg = ExperimentConfig { episodes: 6, ..small_cfg() };
    let maps = cfg.maps.generate(Split::Test).unwrap();
    let mapper = MapperParams::init(2, MapperConfig::default());
    let vin = VinParams::from_mapper(2, &mapper);
    let pol = &tiny_policies()[0];
    let r = run_full_system(&cfg, &maps, &mapper, &vin, pol).unwrap();
    assert_eq!(r.results.success("oracle_open_loop_no_noise"), Some(100.0));
    assert!((0.0..=1.0).contains(&r.planning_success));
    assert_eq!(r.results.methods.len(), 4);
    assert_eq!(run_full_system(&cfg, &maps, &mapper, &vin, pol).unwrap(), r);
}

#[test]
fn checkpoint_store_round_trip_and_missing_list() {
    let dir = tempfile::tempdir().unwrap();
    let store = CheckpointStore::new(dir.path());
    let cfg = ExperimentConfig::default();
    match store.policies(&cfg) {
        Err(HarnessError::MissingCheckpoints(m)) => assert_eq!(m, ["policy_ours", "policy_gru", "policy_action_only", "policy_nn_match"]),
        other => panic!("{other:?}"),
    }
    let pol = &tiny_policies()[2];
    store.save(&policy_checkpoint(PolicyKind::ActionOnly), &pol.bundle, 5).unwrap();
    let mut cfg1 = cfg.clone();
    cfg1.policy.policy = pol.cfg;
    assert_eq!(&store.policy(&cfg1, PolicyKind::ActionOnly).unwrap(), pol);
    let small = ExperimentConfig { maps: MapConfig { train: SeedRange { start: 0, count: 1 }, ..cfg.maps.clone() }, ..cfg };
    assert_eq!(store.write_maps(&small).unwrap(), 16);
    assert!(dir.path().join("maps/test_9000.json").is_file());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn histogram_counts_sum_to_episodes(d in proptest::collection::vec(0u32..60, 0..80), w in 1u32..7, max in 1u32..40) {
        let cfg = HistogramConfig { width: w, max, ..HistogramConfig::default() };
        let rows = emit_histogram("m", &res(&d), &cfg);
        prop_assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), d.len());
        prop_assert!(!rows.is_empty());
        prop_assert!(rows.windows(2).all(|p| p[0].bin_hi == p[1].bin_lo));
    }

    #[test]
    fn summary_is_order_independent(mut d in proptest::collection::vec(0u32..40, 1..50)) {
        let a = summarize("m", &res(&d)).unwrap();
        d.reverse();
        let b = summarize("m", &res(&d)).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-9);
        prop_assert_eq!(a.p75, b.p75);
        prop_assert_eq!(a.success, b.success);
    }
}
