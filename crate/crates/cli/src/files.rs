use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use kem_core::phantom::PhantomSpec;
use kem_core::volume::{load_labels, load_metaimage, load_volume, store_volume};
use kem_core::{LabelVolume, Params, Volume};

pub const MANIFEST: &str = "manifest.json";

/// Contents of a phantom directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: PhantomSpec,
    pub volume: String,
    pub labels: String,
    pub geometry: String,
    pub truth: String,
}

pub struct Input {
    pub volume: Volume,
    pub truth: Option<(Params, LabelVolume)>,
}

fn field_path(dir: &Path, name: &str, class: usize) -> PathBuf {
    dir.join(format!("{name}_{class}.kvol"))
}

/// Writes `pi_m`, `mu_m` and `sigma_m` (1-based) as `.kvol` pairs.
pub fn store_fields(dir: &Path, theta: &Params) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, fields) in [("pi", &theta.pi), ("mu", &theta.mu), ("sigma", &theta.sigma)] {
        for (m, f) in fields.iter().enumerate() {
            let path = field_path(dir, name, m + 1);
            store_volume(f, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn load_fields(dir: &Path, components: usize) -> Result<Params> {
    let read = |name: &str| -> Result<Vec<Volume>> {
        (1..=components)
            .map(|m| {
                let path = field_path(dir, name, m);
                load_volume(&path).with_context(|| format!("loading {}", path.display()))
            })
            .collect()
    };
    Ok(Params::new(read("pi")?, read("mu")?, read("sigma")?)?)
}

/// Reads a volume file, or a phantom directory together with its truth.
pub fn load_input(path: &Path) -> Result<Input> {
    if path.is_dir() {
        let manifest_path = path.join(MANIFEST);
        if !manifest_path.exists() {
            bail!("{} is a directory without {MANIFEST}", path.display());
        }
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
            .with_context(|| format!("parsing {}", manifest_path.display()))?;
        let m = manifest.spec.components();
        let volume = load_volume(path.join(&manifest.volume))?;
        let labels = load_labels(path.join(&manifest.labels), Some(m))?;
        let theta = load_fields(&path.join(&manifest.truth), m)?;
        return Ok(Input {
            volume,
            truth: Some((theta, labels)),
        });
    }
    let volume = match path.extension().and_then(|e| e.to_str()) {
        Some("mhd") => load_metaimage(path)?,
        _ => load_volume(path)?,
    };
    Ok(Input { volume, truth: None })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
