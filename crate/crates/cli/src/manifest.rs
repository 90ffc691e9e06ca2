//! Run manifests: everything needed to re-execute a run bit-identically —
//! the resolved config and its hash, the effective seed, data file hashes,
//! and the code version.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::Data(format!("hashing {}: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

#[derive(Serialize)]
struct DataFileEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    code_version: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a ExperimentConfig,
    data_files: Vec<(String, DataFileEntry)>,
}

/// Write `manifest.json` and the JSON export of the config into `run_dir`.
pub fn write_run_manifest(
    run_dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    config_dir: &Path,
    seed: u64,
) -> Result<(), CliError> {
    fs::create_dir_all(run_dir)
        .map_err(|e| CliError::Config(format!("output dir {}: {e}", run_dir.display())))?;
    let config_json = config.to_json();
    let mut data_files = Vec::new();
    for (name, path) in config.dataset_paths(config_dir)? {
        data_files.push((
            name.to_string(),
            DataFileEntry { path: path.display().to_string(), sha256: sha256_file(&path)? },
        ));
    }
    let manifest = Manifest {
        command,
        code_version: env!("CARGO_PKG_VERSION"),
        seed,
        config_sha256: hex(&Sha256::digest(config_json.as_bytes())),
        config,
        data_files,
    };
    let write = |name: &str, body: String| {
        fs::write(run_dir.join(name), body)
            .map_err(|e| CliError::Config(format!("writing {name}: {e}")))
    };
    write("manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    write("config.json", config_json)?;
    Ok(())
}
