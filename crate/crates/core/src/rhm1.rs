//! The RHM1 binary container for dense grids.
//!
//! A single map is a 16-byte header — ASCII magic `RHM1`, then H, W and
//! channel count as unsigned 32-bit little-endian integers — followed by
//! `H*W*C` 64-bit little-endian IEEE-754 values in row-major,
//! channel-minor order.
//!
//! A container file is a plain concatenation of such maps. Named
//! containers (checkpoints, transfer artifacts) carry a JSON manifest in a
//! sibling `<file>.manifest.json` listing `name -> (h, w, c, offset)`
//! where `offset` is the byte offset of the map's header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const MAGIC: [u8; 4] = *b"RHM1";
pub const HEADER_LEN: usize = 16;

pub fn write_map(out: &mut impl Write, grid: &Grid) -> std::io::Result<()> {
    out.write_all(&MAGIC)?;
    out.write_all(&(grid.h() as u32).to_le_bytes())?;
    out.write_all(&(grid.w() as u32).to_le_bytes())?;
    out.write_all(&(grid.c() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(grid.len() * 8);
    for v in grid.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_map(input: &mut impl Read) -> Result<Grid> {
    let mut header = [0u8; HEADER_LEN];
    input
        .read_exact(&mut header)
        .map_err(|e| Error::Parse(format!("RHM1 header: {e}")))?;
    if header[..4] != MAGIC {
        return Err(Error::Parse("bad RHM1 magic".into()));
    }
    let h = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let n = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(c))
        .ok_or_else(|| Error::Parse("RHM1 dimensions overflow".into()))?;
    let mut bytes = vec![0u8; n * 8];
    input
        .read_exact(&mut bytes)
        .map_err(|e| Error::Parse(format!("RHM1 payload: {e}")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Grid::from_vec(h, w, c, data)
}

pub fn save_grid(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_LEN + grid.len() * 8);
    write_map(&mut buf, grid).expect("vec write cannot fail");
    fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_map(&mut bytes.as_slice())
}

/// Manifest entry for one named map inside a container.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct MapEntry {
    pub name: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ContainerManifest {
    pub maps: Vec<MapEntry>,
    /// Free-form metadata stored alongside the map table (e.g. a model
    /// configuration for checkpoints).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

fn manifest_path(container: &Path) -> std::path::PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".manifest.json");
    std::path::PathBuf::from(s)
}

/// Write a named container plus its JSON manifest. Names must be ASCII
/// and unique.
pub fn save_container(
    path: impl AsRef<Path>,
    maps: &[(&str, &Grid)],
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let path = path.as_ref();
    let mut seen = std::collections::HashSet::new();
    for (name, _) in maps {
        if !name.is_ascii() || name.is_empty() {
            return Err(Error::invalid(format!("map name {name:?} must be non-empty ASCII")));
        }
        if !seen.insert(*name) {
            return Err(Error::invalid(format!("duplicate map name {name:?}")));
        }
    }
    let mut buf = Vec::new();
    let mut entries = Vec::with_capacity(maps.len());
    for (name, grid) in maps {
        entries.push(MapEntry {
            name: name.to_string(),
            h: grid.h(),
            w: grid.w(),
            c: grid.c(),
            offset: buf.len() as u64,
        });
        write_map(&mut buf, grid).expect("vec write cannot fail");
    }
    fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest = ContainerManifest { maps: entries, meta };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse(format!("manifest encode: {e}")))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, json).map_err(|e| Error::io(mpath.display().to_string(), e))
}

/// Load a named container written by [`save_container`].
pub fn load_container(path: impl AsRef<Path>) -> Result<(Vec<(String, Grid)>, ContainerManifest)> {
    let path = path.as_ref();
    let mpath = manifest_path(path);
    let mjson = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: ContainerManifest =
        serde_json::from_str(&mjson).map_err(|e| Error::Format {
            path: mpath.display().to_string(),
            message: e.to_string(),
        })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::with_capacity(manifest.maps.len());
    for entry in &manifest.maps {
        let start = entry.offset as usize;
        if start >= bytes.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("map {} offset {} beyond end of file", entry.name, start),
            });
        }
        let grid = read_map(&mut &bytes[start..])?;
        if grid.shape() != (entry.h, entry.w, entry.c) {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!(
                    "map {} shape {} disagrees with manifest {}x{}x{}",
                    entry.name,
                    grid.shape_str(),
                    entry.h,
                    entry.w,
                    entry.c
                ),
            });
        }
        out.push((entry.name.clone(), grid));
    }
    Ok((out, manifest))
}
