//! Synthetic datasets: generation, the JSON manifest and loading into tasks.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wxmatch_core::degrade::{make_pair, mix_seed, WeatherComponent, WeatherSpec};
use wxmatch_core::episodes::{split_for, Pair, Split, Task};

use crate::error::{Error, Result};
use crate::io::{read_png, write_png};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    /// Relative to the manifest directory.
    pub degraded_path: String,
    pub clean_path: String,
    /// Scene seed of the pair.
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub condition_id: String,
    pub spec: WeatherSpec,
    pub pairs: Vec<PairRecord>,
}

/// `rain`, `fog`, `rain+fog`, ... from the component kinds in order.
pub fn condition_id(spec: &WeatherSpec) -> String {
    spec.components
        .iter()
        .map(|c| match c {
            WeatherComponent::Rain(_) => "rain",
            WeatherComponent::Snow(_) => "snow",
            WeatherComponent::Fog(_) => "fog",
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// Scene seed of the `index`-th pair of a dataset built with `seed`.
pub fn pair_seed(seed: u64, index: usize) -> u64 {
    mix_seed(seed, index as u64)
}

/// Generates `count` square pairs in memory, tagged with the standard split.
pub fn generate_task(spec: &WeatherSpec, count: usize, seed: u64, size: usize) -> Result<Task> {
    if count < 2 {
        return Err(wxmatch_core::Error::Insufficient(format!("a dataset needs at least 2 pairs, got {count}")).into());
    }
    let cond = condition_id(spec);
    let pairs = (0..count)
        .map(|i| {
            let p = make_pair(spec, pair_seed(seed, i), size, size)?;
            Ok(Pair::new(format!("{i:04}"), p.degraded, p.clean, cond.clone())?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Task::new(cond, pairs))
}

/// Writes `count` PNG pairs and `manifest.json` into `out_dir`.
pub fn build_dataset(
    spec: &WeatherSpec,
    count: usize,
    seed: u64,
    out_dir: &Path,
    size: usize,
) -> Result<DatasetManifest> {
    let task = generate_task(spec, count, seed, size)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut pairs = Vec::with_capacity(count);
    for (i, p) in task.pairs.iter().enumerate() {
        let degraded_path = format!("{}_degraded.png", p.id);
        let clean_path = format!("{}_clean.png", p.id);
        write_png(&out_dir.join(&degraded_path), &p.degraded)?;
        write_png(&out_dir.join(&clean_path), &p.clean)?;
        pairs.push(PairRecord {
            id: p.id.clone(),
            degraded_path,
            clean_path,
            seed: pair_seed(seed, i),
            split: split_for(i, count),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        condition_id: task.condition_id,
        spec: spec.clone(),
        pairs,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads and validates `dir/manifest.json`: version, unique ids, existing files.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported manifest version {}", m.version),
        ));
    }
    let mut ids = HashSet::new();
    for r in &m.pairs {
        if !ids.insert(r.id.as_str()) {
            return Err(Error::format(&path, format!("duplicate pair id `{}`", r.id)));
        }
        for f in [&r.degraded_path, &r.clean_path] {
            if !dir.join(f).is_file() {
                return Err(Error::format(
                    &path,
                    format!("pair `{}` references missing file `{f}`", r.id),
                ));
            }
        }
    }
    Ok(m)
}

fn resolve(dir: &Path, rel: &str) -> PathBuf {
    dir.join(rel)
}

/// Loads a dataset directory as a task, keeping the manifest's split tags.
pub fn load_task(dir: &Path) -> Result<Task> {
    let m = read_manifest(dir)?;
    let mut pairs = Vec::with_capacity(m.pairs.len());
    for r in &m.pairs {
        let degraded = read_png(&resolve(dir, &r.degraded_path))?;
        let clean = read_png(&resolve(dir, &r.clean_path))?;
        pairs.push(Pair::new(r.id.clone(), degraded, clean, m.condition_id.clone())?);
    }
    Ok(Task {
        condition_id: m.condition_id,
        splits: m.pairs.iter().map(|r| r.split).collect(),
        pairs,
    })
}
