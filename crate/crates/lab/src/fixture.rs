//! Materializes the tiny self-contained experiment fixture: a ready-to-run
//! config and a byte-stable snapshot of the procedural dataset for
//! inspection. Running it twice produces identical bytes.

use std::path::{Path, PathBuf};

use thiserror::Error;

use simclr_core::data::{load_dataset, DataError};

use crate::config::{tiny_config, ConfigError};

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Files written by [`make_tiny_fixture`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub config: PathBuf,
    pub dataset_snapshot: PathBuf,
}

/// Writes `tiny.toml` and `dataset.bin` under `out_dir`. The snapshot uses
/// one record per image: a class label byte followed by channel-major
/// 8x8x3 pixels quantized to u8.
pub fn make_tiny_fixture(out_dir: &Path) -> Result<FixturePaths, FixtureError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| FixtureError::Io {
            path: path.clone(),
            source,
        }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;

    let config = tiny_config(PathBuf::from("runs/tiny"));
    config
        .validate()
        .map_err(FixtureError::Config)?;
    let config_path = out_dir.join("tiny.toml");
    std::fs::write(&config_path, config.to_toml_string()).map_err(io(&config_path))?;

    let collection = load_dataset(&config.dataset)?;
    let mut blob = Vec::new();
    for i in 0..collection.len() {
        blob.push(collection.labels[i]);
        for &v in collection.images[i].data() {
            blob.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let snapshot_path = out_dir.join("dataset.bin");
    std::fs::write(&snapshot_path, &blob).map_err(io(&snapshot_path))?;

    Ok(FixturePaths {
        config: config_path,
        dataset_snapshot: snapshot_path,
    })
}
