//! Atlas parameter files, configuration files and run manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::shapes::{ShapeSpec, Transform};
use crate::diffcore::ParameterBlock;
use crate::error::{Error, Result};
use crate::fit::FitConfig;
use crate::patchmodel::{Architecture, Atlas};

const MAGIC: &[u8; 4] = b"PATL";
const FORMAT_VERSION: u32 = 1;
const ACTIVATION: &str = "softplus";

pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Layout: magic, format version, K, H, D (u32 LE), activation tag (u8
/// length + bytes), parameter count (u64 LE), parameters (f64 LE).
pub fn save_atlas(path: &Path, atlas: &Atlas) -> Result<()> {
    let arch = atlas.architecture();
    let mut out = Vec::with_capacity(32 + 8 * atlas.params().len());
    out.extend_from_slice(MAGIC);
    for x in [FORMAT_VERSION, arch.patches as u32, arch.hidden as u32, arch.latent as u32] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.push(ACTIVATION.len() as u8);
    out.extend_from_slice(ACTIVATION.as_bytes());
    out.extend_from_slice(&(atlas.params().len() as u64).to_le_bytes());
    for p in atlas.params().as_slice() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(format_err(self.path, "truncated atlas file"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Loads an atlas; with `expected`, refuses any other architecture.
pub fn load_atlas(path: &Path, expected: Option<Architecture>) -> Result<Atlas> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        at: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(format_err(path, "not an atlas file"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported atlas format version {version}")));
    }
    let (k, h, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let len = r.take(1)?[0] as usize;
    let tag = String::from_utf8_lossy(r.take(len)?).into_owned();
    let found = Architecture::new(k, h, d)?;
    if tag != ACTIVATION {
        return Err(Error::ArchitectureMismatch {
            expected: format!("activation {ACTIVATION}"),
            found: format!("activation {tag}"),
        });
    }
    if let Some(e) = expected {
        if e != found {
            return Err(Error::ArchitectureMismatch {
                expected: e.to_string(),
                found: found.to_string(),
            });
        }
    }
    let count = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    if count != found.param_count() {
        return Err(format_err(
            path,
            format!("{count} parameters stored for {found}, which needs {}", found.param_count()),
        ));
    }
    let params = r
        .take(8 * count)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if r.at != bytes.len() {
        return Err(format_err(path, "trailing bytes after parameters"));
    }
    Atlas::new(found, ParameterBlock(params))
}

pub fn parse_config(text: &str, path: &Path) -> Result<FitConfig> {
    let cfg: FitConfig = toml::from_str(text).map_err(|e| format_err(path, e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<FitConfig> {
    parse_config(&fs::read_to_string(path)?, path)
}

pub fn config_to_string(cfg: &FitConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Where the target came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum InputSource {
    File { path: PathBuf },
    Shape { spec: ShapeSpec },
}

/// Everything needed to repeat a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub input: InputSource,
    pub normalization: Transform,
    pub outputs: Vec<PathBuf>,
    pub config: FitConfig,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m: RunManifest = toml::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
        m.config.validate()?;
        Ok(m)
    }
}
