use std::path::PathBuf;

use ssda_core::data::SplitCase;
use ssda_core::train::TrainConfig;

fn config_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn default_config_carries_published_hyperparameters() {
    let c = TrainConfig::default();
    assert_eq!(
        (c.alpha, c.sigma, c.beta_sq, c.lambda_pta, c.lambda_cona, c.lambda_msr),
        (0.5, 0.95, 0.5, 0.1, 1.0, 1.0)
    );
    assert_eq!((c.batch_size, c.iterations), (24, 5000));
    assert_eq!((c.lr_extractor, c.lr_classifier, c.weight_decay), (0.01, 0.001, 0.0005));
}

#[test]
fn shipped_configs_match_builtins() {
    let case1 = TrainConfig::from_file(&config_file("case1.json")).unwrap();
    assert_eq!(case1, TrainConfig::default());
    let text = std::fs::read_to_string(config_file("case1.json")).unwrap();
    assert_eq!(text.trim_end(), TrainConfig::default().to_json_pretty());

    let case2 = TrainConfig::from_file(&config_file("case2.json")).unwrap();
    let mut want = TrainConfig::default();
    want.split.case = SplitCase::CaseII;
    assert_eq!(case2, want);

    let toy = TrainConfig::from_file(&config_file("toy.json")).unwrap();
    assert_eq!(toy, TrainConfig::toy());
}
