use std::path::PathBuf;

use trustgate_core::config::RunConfig;

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn default_toml_matches_built_in_defaults() {
    assert_eq!(RunConfig::load(configs().join("default.toml")).unwrap(), RunConfig::default());
}

#[test]
fn smoke_toml_is_valid() {
    let config = RunConfig::load(configs().join("smoke.toml")).unwrap();
    assert_eq!(config.n_steps, 300);
    config.validate().unwrap();
}
