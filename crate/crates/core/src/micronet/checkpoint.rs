//! Plain-text model checkpoints: one `key = value` per line, parameters as a
//! whitespace-separated list of shortest round-trip decimals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::net::{ArchConfig, MicroNet};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, LevelSpec};

pub const CHECKPOINT_FORMAT: &str = "mcdet-net/1";

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_checkpoint(net: &MicroNet) -> String {
    let grid = net.grid();
    let mut out = String::new();
    let _ = writeln!(out, "format = {CHECKPOINT_FORMAT}");
    let _ = writeln!(out, "dims = {}", grid.dims);
    let _ = writeln!(out, "image_size = {}", join(&grid.image_size));
    let _ = writeln!(out, "num_classes = {}", grid.num_classes);
    let _ = writeln!(out, "levels = {}", grid.levels.len());
    for (l, level) in grid.levels.iter().enumerate() {
        let _ = writeln!(out, "level.{l}.stride = {}", level.stride);
        let _ = writeln!(out, "level.{l}.base_size = {}", join(&level.base_size));
    }
    let _ = writeln!(out, "channels = {}", net.arch().channels);
    let _ = writeln!(out, "dropout = {}", net.arch().dropout);
    let _ = writeln!(out, "param_count = {}", net.num_params());
    let _ = writeln!(out, "params = {}", join(net.params()));
    out
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split_whitespace()
        .map(|v| {
            v.parse()
                .map_err(|_| Error::Input(format!("checkpoint key {key}: bad value {v:?}")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("checkpoint key {key}: bad value {value:?}")))
}

pub fn read_checkpoint(text: &str) -> Result<MicroNet> {
    let mut kv = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, "expected `key = value`"))?;
        if kv.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::parse(i + 1, format!("duplicate key {}", k.trim())));
        }
    }
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Input(format!("checkpoint is missing {k}")))
    };
    if get("format")? != CHECKPOINT_FORMAT {
        return Err(Error::Input(format!("unknown checkpoint format {:?}", get("format")?)));
    }
    let n_levels: usize = parse_one("levels", get("levels")?)?;
    let levels = (0..n_levels)
        .map(|l| {
            let stride_key = format!("level.{l}.stride");
            let base_key = format!("level.{l}.base_size");
            Ok(LevelSpec::new(
                parse_one(&stride_key, get(&stride_key)?)?,
                parse_list(&base_key, get(&base_key)?)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let grid = GridSpec {
        dims: parse_one("dims", get("dims")?)?,
        image_size: parse_list("image_size", get("image_size")?)?,
        levels,
        num_classes: parse_one("num_classes", get("num_classes")?)?,
    };
    let arch = ArchConfig {
        channels: parse_one("channels", get("channels")?)?,
        dropout: parse_one("dropout", get("dropout")?)?,
    };
    let params: Vec<f64> = parse_list("params", get("params")?)?;
    let count: usize = parse_one("param_count", get("param_count")?)?;
    if params.len() != count {
        return Err(Error::Input(format!(
            "checkpoint declares {count} parameters but lists {}",
            params.len()
        )));
    }
    let known = 9 + 2 * n_levels;
    if kv.len() != known {
        return Err(Error::Input("checkpoint has unknown keys".into()));
    }
    MicroNet::from_params(&grid, &arch, params)
}
