use std::fs::File;

use fedaml_core::pipeline::{self, Artifacts, RunConfig};
use fedaml_core::synth::CountrySpec;
use fedaml_core::Error;
use tempfile::TempDir;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default().with_seed(3);
    cfg.dataset.countries = vec![
        CountrySpec { code: "US".into(), accounts: 80, transactions: 400, amount_scale: 1.0 },
        CountrySpec { code: "DE".into(), accounts: 50, transactions: 250, amount_scale: 1.0 },
    ];
    cfg.dataset.laundering_groups = 5;
    cfg.federation.rounds = 6;
    cfg.federation.eval_every = 0;
    cfg
}

#[test]
fn config_rejects_unknown_keys() {
    let err = RunConfig::from_toml("[federation]\nrounds = 3\nlearning_rate = 0.1\n").unwrap_err();
    assert!(matches!(err, Error::InvalidConfig(ref m) if m.contains("learning_rate")), "{err}");
    assert!(RunConfig::from_toml("colour = 1\n").is_err());
    let ok = RunConfig::from_toml("[federation]\nrounds = 3\n").unwrap();
    assert_eq!(ok.federation.rounds, 3);
    assert_eq!(ok.loss, RunConfig::default().loss);
}

#[test]
fn config_validation_runs_on_load() {
    assert!(RunConfig::from_toml("[federation]\ncomm_frequency = 0\n").is_err());
    assert!(RunConfig::from_toml("[dataset]\ngroup_size = [2, 5]\n").is_err());
}

#[test]
fn stages_chain_through_artifacts() {
    let dir = TempDir::new().unwrap();
    let art = Artifacts::new(dir.path());
    let cfg = small_config();

    let ds = pipeline::generate_stage(&art, &cfg).unwrap();
    assert_eq!(pipeline::load_records(&art).unwrap(), ds.records);

    let outcome = pipeline::train_stage(&art, &cfg).unwrap();
    for market in ["US", "DE"] {
        let back = fedaml_core::params::ModelParams::read_checkpoint(File::open(art.checkpoint(market)).unwrap()).unwrap();
        assert_eq!(&back, outcome.params_for(market));
    }
    // federated clients end every round on the shared parameters
    assert_eq!(outcome.params_for("US"), outcome.params_for("DE"));

    let rows = pipeline::detect_stage(&art, &cfg).unwrap();
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.score)));
    assert_eq!(pipeline::detect_stage(&art, &cfg).unwrap(), rows);

    pipeline::ppr_stage(&art, &cfg).unwrap();
    let refined = pipeline::propagate_stage(&art, &cfg).unwrap();
    assert_eq!(refined.len(), rows.len());
    let decided = pipeline::decide_stage(&art, &cfg, None).unwrap();
    assert!(!decided.economic.is_empty());
    let text = pipeline::report_stage(&art, &cfg).unwrap();
    assert!(text.contains("US") && text.contains("DE"), "{text}");
    for p in [art.report(), art.report_text(), art.decisions(), art.economic(), art.clusters(), art.refined_scores()] {
        assert!(p.exists(), "{}", p.display());
    }
}

#[test]
fn downstream_stage_names_missing_input() {
    let dir = TempDir::new().unwrap();
    let art = Artifacts::new(dir.path());
    let cfg = small_config();
    pipeline::generate_stage(&art, &cfg).unwrap();
    let err = pipeline::propagate_stage(&art, &cfg).unwrap_err().to_string();
    assert!(err.contains("scores.csv") || err.contains("checkpoints") || err.contains("clusters.csv"), "{err}");
}
