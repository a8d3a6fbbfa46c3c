//! State files: little-endian `f32` arrays behind a small JSON header.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8 JSON
//! (`{"dtype":"<f4","shape":[...]}`, optionally with extra keys), then the data
//! in row-major order. Values are stored in single precision; the optimizer
//! rounds its state to `f32` at stage ends so that saving and reloading is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentW, NoiseMaps, LATENT_DIM};
use crate::optimizer::{Codes, LatentState, SharedWPlus, SharingConfig};
use crate::raster::Grid;

const DTYPE: &str = "<f4";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Side lengths of the grids a flat noise array is made of.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grids: Option<Vec<usize>>,
}

impl ArrayHeader {
    pub fn new(shape: Vec<usize>) -> Self {
        Self {
            dtype: DTYPE.into(),
            shape,
            grids: None,
        }
    }

    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn encode_array(header: &ArrayHeader, values: &[f64]) -> Result<Vec<u8>> {
    if header.len() != values.len() {
        return Err(Error::Schema(format!(
            "shape {:?} holds {} values, got {}",
            header.shape,
            header.len(),
            values.len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * values.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_array(bytes: &[u8]) -> Result<(ArrayHeader, Vec<f64>)> {
    let short = || Error::Schema("state file is truncated".into());
    let n = u64::from_le_bytes(bytes.get(..8).ok_or_else(short)?.try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(8..8usize.checked_add(n).ok_or_else(short)?)
        .ok_or_else(short)?;
    let header: ArrayHeader = serde_json::from_slice(json)?;
    if header.dtype != DTYPE {
        return Err(Error::Schema(format!("unsupported dtype {:?}", header.dtype)));
    }
    let data = &bytes[8 + n..];
    if data.len() != 4 * header.len() {
        return Err(Error::Schema(format!(
            "shape {:?} needs {} bytes of data, file has {}",
            header.shape,
            4 * header.len(),
            data.len()
        )));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((header, values))
}

pub fn write_array(path: &Path, header: &ArrayHeader, values: &[f64]) -> Result<()> {
    let bytes = encode_array(header, values)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_array(path: &Path) -> Result<(ArrayHeader, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::input(path, e.to_string()))?;
    decode_array(&bytes).map_err(|e| Error::input(path, e.to_string()))
}

pub fn write_noise(path: &Path, noise: &NoiseMaps) -> Result<()> {
    let values: Vec<f64> = noise.iter().copied().collect();
    let header = ArrayHeader {
        grids: Some(noise.maps.iter().map(|g| g.width).collect()),
        ..ArrayHeader::new(vec![values.len()])
    };
    write_array(path, &header, &values)
}

pub fn read_noise(path: &Path) -> Result<NoiseMaps> {
    let (header, values) = read_array(path)?;
    let grids = header
        .grids
        .ok_or_else(|| Error::input(path, "noise file lacks its grid sizes"))?;
    let mut maps = Vec::with_capacity(grids.len());
    let mut at = 0;
    for r in grids {
        let end = at + r * r;
        let chunk = values
            .get(at..end)
            .ok_or_else(|| Error::input(path, "noise grid sizes exceed the data"))?;
        maps.push(Grid::from_vec(r, r, chunk.to_vec())?);
        at = end;
    }
    if at != values.len() {
        return Err(Error::input(path, "noise data longer than its grids"));
    }
    Ok(NoiseMaps { maps })
}

/// Writes the codes and noise of `state` into `dir`.
pub fn save_state(dir: &Path, state: &LatentState) -> Result<()> {
    match &state.codes {
        Codes::W { face, hair } => {
            write_array(
                &dir.join("w_face.f32"),
                &ArrayHeader::new(vec![LATENT_DIM]),
                face.as_slice(),
            )?;
            write_array(
                &dir.join("w_hair.f32"),
                &ArrayHeader::new(vec![LATENT_DIM]),
                hair.as_slice(),
            )?;
        }
        Codes::WPlus(s) => {
            let own = ArrayHeader::new(vec![s.l(), LATENT_DIM]);
            write_array(
                &dir.join("wplus_face_own.f32"),
                &own,
                s.own(crate::semantics::View::Face),
            )?;
            write_array(
                &dir.join("wplus_hair_own.f32"),
                &own,
                s.own(crate::semantics::View::Hair),
            )?;
            let shared = ArrayHeader::new(vec![s.layers() - s.l(), LATENT_DIM]);
            write_array(&dir.join("wplus_shared.f32"), &shared, s.shared())?;
        }
    }
    write_noise(&dir.join("noise_face.f32"), &state.noise_face)?;
    write_noise(&dir.join("noise_hair.f32"), &state.noise_hair)
}

/// Reads what [`save_state`] wrote. Stage-1 directories hold W codes, later ones
/// W+ codes with shared rows.
pub fn load_state(dir: &Path, layers: usize, sharing: SharingConfig) -> Result<LatentState> {
    let codes = if dir.join("w_face.f32").exists() {
        let face = LatentW::new(read_array(&dir.join("w_face.f32"))?.1)?;
        let hair = LatentW::new(read_array(&dir.join("w_hair.f32"))?.1)?;
        Codes::W { face, hair }
    } else {
        let (_, face_own) = read_array(&dir.join("wplus_face_own.f32"))?;
        let (_, hair_own) = read_array(&dir.join("wplus_hair_own.f32"))?;
        let (_, shared) = read_array(&dir.join("wplus_shared.f32"))?;
        Codes::WPlus(SharedWPlus::new(layers, sharing.l, face_own, hair_own, shared)?)
    };
    Ok(LatentState {
        codes,
        noise_face: read_noise(&dir.join("noise_face.f32"))?,
        noise_hair: read_noise(&dir.join("noise_hair.f32"))?,
        sharing,
        layers,
    })
}
