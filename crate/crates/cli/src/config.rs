use std::path::{Path, PathBuf};

use matl::data::ImageNormalization;
use matl::traineval::{Cell, KeepModels, Protocol};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSource {
    pub per_class: usize,
    pub tile_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            per_class: 200,
            tile_size: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectorySource {
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Directory(DirectorySource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSource::default())
    }
}

/// Contents of an `experiment --config` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    pub data: DataSource,
    pub normalization: ImageNormalization,
    pub output_dir: PathBuf,
    pub protocol: Protocol,
    pub cells: Vec<Cell>,
    pub checkpoints: KeepModels,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            normalization: ImageNormalization::default(),
            output_dir: PathBuf::from("matl-output"),
            protocol: Protocol::default(),
            cells: Cell::default_grid(),
            checkpoints: KeepModels::default(),
        }
    }
}

/// Parses a run config, reporting the JSON path of the first offending field.
pub fn parse_run_config(text: &str, path: &Path) -> Result<RunConfigFile, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        CliError::Usage(format!("{}: field `{field}`: {}", path.display(), e.inner()))
    })
}
