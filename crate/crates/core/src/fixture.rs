//! The bundled planted-anomaly fixture.

use std::path::{Path, PathBuf};

use crate::config::PipelineConfig;
use crate::manifest::{Dataset, DatasetManifest};
use crate::pipeline::PipelineError;

/// Directory holding `manifest.toml`, `config.toml`, `mock.toml` and
/// `annotations.txt`.
pub fn planted_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("planted")
}

/// Loads the fixture dataset and its config, with the cache redirected to
/// `cache_dir`.
pub fn load_planted(cache_dir: &Path) -> Result<(Dataset, PipelineConfig), PipelineError> {
    let dir = planted_dir();
    let dataset = DatasetManifest::load(&dir.join("manifest.toml"))?.load_dataset()?;
    let mut cfg = PipelineConfig::load(&dir.join("config.toml"))?;
    cfg.cache_dir = cache_dir.to_path_buf();
    Ok((dataset, cfg))
}
