//! On-disk layouts.
//!
//! Every artifact is a directory of MTX1 matrix files plus a plain-text
//! `manifest.txt` of `key = value` lines. Keys are written in a fixed order
//! and floats use Rust's shortest round-trip formatting, so re-running a
//! command with the same inputs reproduces every byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::adapter::{AdapterKind, AdapterRecord};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Activation, LinearLayer, ToyModel};
use crate::train::Dataset;
use crate::world::{PlantedLayer, SyntheticWorld, WorldConfig};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Writes `key = value` lines in the given order.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::format(format!(
                "{}:{}: expected `key = value`",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn manifest_get<'a>(map: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::format(format!("{}: missing key `{key}`", path.display())))
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(format!("key `{key}`: cannot parse `{value}`")))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Saves a model as one MTX1 file per layer weight plus a manifest with the
/// activation tag, layer dims, and adapter kind per layer. Adapter factors
/// live in adapter checkpoints, not here.
pub fn save_model(dir: &Path, model: &ToyModel) -> Result<()> {
    ensure_dir(dir)?;
    let mut entries = vec![
        ("format".to_string(), "toy-model".to_string()),
        ("activation".to_string(), model.activation.name().to_string()),
        ("layers".to_string(), model.layers.len().to_string()),
    ];
    for (i, layer) in model.layers.iter().enumerate() {
        entries.push((
            format!("dims.{i}"),
            format!("{}x{}", layer.out_dim(), layer.in_dim()),
        ));
        let kind = layer
            .adapter
            .as_ref()
            .map_or("none", |slot| slot.kind.name());
        entries.push((format!("adapter.{i}"), kind.to_string()));
        layer.weight.save_mtx(&dir.join(format!("layer_{i}.mtx")))?;
    }
    write_manifest(&dir.join(MANIFEST_FILE), &entries)
}

/// Loads the base weights of a saved model; adapter slots are left empty.
pub fn load_model(dir: &Path) -> Result<ToyModel> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let map = read_manifest(&manifest_path)?;
    if manifest_get(&map, "format", &manifest_path)? != "toy-model" {
        return Err(Error::format(format!(
            "{}: not a model checkpoint",
            dir.display()
        )));
    }
    let activation = Activation::parse(manifest_get(&map, "activation", &manifest_path)?)?;
    let n: usize = parse_num(manifest_get(&map, "layers", &manifest_path)?, "layers")?;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let weight = Matrix::load_mtx(&dir.join(format!("layer_{i}.mtx")))?;
        let dims = manifest_get(&map, &format!("dims.{i}"), &manifest_path)?;
        let expected = format!("{}x{}", weight.rows(), weight.cols());
        if dims != expected {
            return Err(Error::format(format!(
                "layer {i}: manifest says {dims}, file holds {expected}"
            )));
        }
        layers.push(LinearLayer::new(weight));
    }
    ToyModel::new(layers, activation)
}

fn fmt_f64(x: f64) -> String {
    // `{}` prints the shortest representation that parses back bit-exactly.
    format!("{x}")
}

fn fmt_f64_list(xs: &[f64]) -> String {
    xs.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

fn parse_f64_list(s: &str, key: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| parse_num(p.trim(), key)).collect()
}

/// Saves a world: model checkpoint, datasets, planted ground truth, and a
/// manifest recording the seed and the measured gammas.
pub fn save_world(dir: &Path, world: &SyntheticWorld) -> Result<()> {
    ensure_dir(dir)?;
    save_model(&dir.join("model"), &world.model)?;
    world
        .benign
        .inputs
        .save_mtx(&dir.join("benign_inputs.mtx"))?;
    world
        .benign
        .targets
        .save_mtx(&dir.join("benign_targets.mtx"))?;
    world
        .protected_inputs
        .save_mtx(&dir.join("protected_inputs.mtx"))?;

    let c = &world.config;
    let mut entries = vec![
        ("format".to_string(), "world".to_string()),
        ("seed".to_string(), c.seed.to_string()),
        ("width".to_string(), c.width.to_string()),
        ("layers".to_string(), c.layers.to_string()),
        ("planted_rank".to_string(), c.planted_rank.to_string()),
        ("n_benign".to_string(), c.n_benign.to_string()),
        ("n_protected".to_string(), c.n_protected.to_string()),
        ("gamma".to_string(), fmt_f64(world.gamma)),
    ];
    for (l, planted) in world.planted.iter().enumerate() {
        entries.push((format!("gamma.{l}"), fmt_f64(planted.gamma)));
        entries.push((format!("alphas.{l}"), fmt_f64_list(&planted.alphas)));
        planted
            .basis
            .save_mtx(&dir.join(format!("planted_basis_{l}.mtx")))?;
        planted
            .w_s
            .save_mtx(&dir.join(format!("planted_ws_{l}.mtx")))?;
    }
    write_manifest(&dir.join(MANIFEST_FILE), &entries)
}

/// Loads a saved world.
pub fn load_world(dir: &Path) -> Result<SyntheticWorld> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let map = read_manifest(&manifest_path)?;
    if manifest_get(&map, "format", &manifest_path)? != "world" {
        return Err(Error::format(format!(
            "{}: not a world checkpoint",
            dir.display()
        )));
    }
    let config = WorldConfig {
        seed: parse_num(manifest_get(&map, "seed", &manifest_path)?, "seed")?,
        width: parse_num(manifest_get(&map, "width", &manifest_path)?, "width")?,
        layers: parse_num(manifest_get(&map, "layers", &manifest_path)?, "layers")?,
        planted_rank: parse_num(
            manifest_get(&map, "planted_rank", &manifest_path)?,
            "planted_rank",
        )?,
        n_benign: parse_num(manifest_get(&map, "n_benign", &manifest_path)?, "n_benign")?,
        n_protected: parse_num(
            manifest_get(&map, "n_protected", &manifest_path)?,
            "n_protected",
        )?,
    };
    let model = load_model(&dir.join("model"))?;
    let benign = Dataset::new(
        Matrix::load_mtx(&dir.join("benign_inputs.mtx"))?,
        Matrix::load_mtx(&dir.join("benign_targets.mtx"))?,
    )?;
    let protected_inputs = Matrix::load_mtx(&dir.join("protected_inputs.mtx"))?;

    let gamma: f64 = parse_num(manifest_get(&map, "gamma", &manifest_path)?, "gamma")?;
    let mut planted = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let basis = Matrix::load_mtx(&dir.join(format!("planted_basis_{l}.mtx")))?;
        let w_s = Matrix::load_mtx(&dir.join(format!("planted_ws_{l}.mtx")))?;
        let layer_gamma: f64 = parse_num(
            manifest_get(&map, &format!("gamma.{l}"), &manifest_path)?,
            "gamma",
        )?;
        let alphas = parse_f64_list(
            manifest_get(&map, &format!("alphas.{l}"), &manifest_path)?,
            "alphas",
        )?;
        planted.push(PlantedLayer {
            basis,
            alphas,
            w_s,
            gamma: layer_gamma,
        });
    }

    Ok(SyntheticWorld {
        config,
        model,
        benign,
        protected_inputs,
        planted,
        gamma,
    })
}

/// Adapter checkpoint metadata.
#[derive(Debug, Clone, Copy)]
pub struct AdapterMeta {
    pub kind: AdapterKind,
    pub r: usize,
    pub r_s: usize,
}

/// Saves one record per adapted layer under `layer_{i}/`, with the factor
/// files named by role: `b.mtx`/`a.mtx` for LoRA, plus `residual.mtx` for
/// PiSSA, and `b_prime.mtx`/`a.mtx`/`b0_prime.mtx`/`a0.mtx` for SaLoRA.
pub fn save_adapter_checkpoint(
    dir: &Path,
    records: &[AdapterRecord],
    meta: &AdapterMeta,
) -> Result<()> {
    ensure_dir(dir)?;
    let entries = vec![
        ("format".to_string(), "adapter".to_string()),
        ("kind".to_string(), meta.kind.name().to_string()),
        ("r".to_string(), meta.r.to_string()),
        ("r_s".to_string(), meta.r_s.to_string()),
        ("layers".to_string(), records.len().to_string()),
    ];
    write_manifest(&dir.join(MANIFEST_FILE), &entries)?;
    for (i, record) in records.iter().enumerate() {
        if record.kind() != meta.kind {
            return Err(Error::config(format!(
                "layer {i} record is {}, checkpoint kind is {}",
                record.kind().name(),
                meta.kind.name()
            )));
        }
        let layer_dir = dir.join(format!("layer_{i}"));
        ensure_dir(&layer_dir)?;
        match record {
            AdapterRecord::Lora { b, a } => {
                b.save_mtx(&layer_dir.join("b.mtx"))?;
                a.save_mtx(&layer_dir.join("a.mtx"))?;
            }
            AdapterRecord::Pissa { b, a, residual } => {
                b.save_mtx(&layer_dir.join("b.mtx"))?;
                a.save_mtx(&layer_dir.join("a.mtx"))?;
                residual.save_mtx(&layer_dir.join("residual.mtx"))?;
            }
            AdapterRecord::Salora {
                b_prime,
                a,
                b0_prime,
                a0,
            } => {
                b_prime.save_mtx(&layer_dir.join("b_prime.mtx"))?;
                a.save_mtx(&layer_dir.join("a.mtx"))?;
                b0_prime.save_mtx(&layer_dir.join("b0_prime.mtx"))?;
                a0.save_mtx(&layer_dir.join("a0.mtx"))?;
            }
        }
    }
    Ok(())
}

/// Loads an adapter checkpoint.
pub fn load_adapter_checkpoint(dir: &Path) -> Result<(Vec<AdapterRecord>, AdapterMeta)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let map = read_manifest(&manifest_path)?;
    if manifest_get(&map, "format", &manifest_path)? != "adapter" {
        return Err(Error::format(format!(
            "{}: not an adapter checkpoint",
            dir.display()
        )));
    }
    let kind = AdapterKind::parse(manifest_get(&map, "kind", &manifest_path)?)?;
    let meta = AdapterMeta {
        kind,
        r: parse_num(manifest_get(&map, "r", &manifest_path)?, "r")?,
        r_s: parse_num(manifest_get(&map, "r_s", &manifest_path)?, "r_s")?,
    };
    let n: usize = parse_num(manifest_get(&map, "layers", &manifest_path)?, "layers")?;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let layer_dir = dir.join(format!("layer_{i}"));
        let record = match kind {
            AdapterKind::Lora => AdapterRecord::Lora {
                b: Matrix::load_mtx(&layer_dir.join("b.mtx"))?,
                a: Matrix::load_mtx(&layer_dir.join("a.mtx"))?,
            },
            AdapterKind::Pissa => AdapterRecord::Pissa {
                b: Matrix::load_mtx(&layer_dir.join("b.mtx"))?,
                a: Matrix::load_mtx(&layer_dir.join("a.mtx"))?,
                residual: Matrix::load_mtx(&layer_dir.join("residual.mtx"))?,
            },
            AdapterKind::Salora => AdapterRecord::Salora {
                b_prime: Matrix::load_mtx(&layer_dir.join("b_prime.mtx"))?,
                a: Matrix::load_mtx(&layer_dir.join("a.mtx"))?,
                b0_prime: Matrix::load_mtx(&layer_dir.join("b0_prime.mtx"))?,
                a0: Matrix::load_mtx(&layer_dir.join("a0.mtx"))?,
            },
        };
        records.push(record);
    }
    Ok((records, meta))
}

/// Recursively lists all regular files under `dir`, sorted by relative path.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    walk(dir, &mut out)?;
    out.sort();
    Ok(out)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let path = entry.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
