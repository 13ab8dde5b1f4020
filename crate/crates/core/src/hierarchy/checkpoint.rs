//! Model container.
//!
//! ```text
//! "XSRC"  magic
//! u32     version
//! u32     section count
//! section*:
//!   [u8;4] tag
//!   u64    payload length
//!   bytes  payload
//!   u32    CRC32 over tag and payload
//! ```
//!
//! Sections, in order: `CONF` (model config as canonical TOML), `PROV`
//! (provenance lines), one `LAYR` per layer (mask, tile index lists, parent
//! routes), one `RESV` per reservoir (dims, hyperparameters, seed, weight
//! probes `W 1` and `W_in 1`, dense `W_out`). Recurrent and input weights are
//! regenerated from the seed on load and checked against the stored probes.
//! All integers and floats are little-endian.

use std::path::Path;

use nalgebra::DMatrix;

use super::{build_hierarchy, HierarchyModel, ModelConfig, Provenance};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::layer::Layer;
use crate::reservoir::ReservoirHyperparams;

pub const MODEL_MAGIC: &[u8; 4] = b"XSRC";
pub const MODEL_VERSION: u32 = 1;

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn indices(&mut self, v: &[usize]) {
        self.u32(v.len());
        for &i in v {
            self.u32(i);
        }
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Cursor { bytes, at: 0, what }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptHeader(format!("{} truncated", self.what)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::CorruptHeader(format!("{} has trailing bytes", self.what)));
        }
        Ok(())
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let mut h = crc32fast::Hasher::new();
    h.update(tag);
    h.update(payload);
    out.extend_from_slice(&h.finalize().to_le_bytes());
}

fn layer_payload(layer: &Layer) -> Vec<u8> {
    let mut b = Buf::default();
    b.u32(layer.level);
    b.u32(layer.grid_rows);
    b.u32(layer.grid_cols);
    for &m in &layer.mask {
        b.u8(m as u8);
    }
    b.u32(layer.tiling.n_tiles());
    for t in &layer.tiling.tiles {
        b.indices(&t.center_cells);
        b.indices(&t.input_cells);
    }
    b.u32(layer.units.len());
    for u in &layer.units {
        b.u32(u.tile_index);
        match &u.route {
            None => b.u8(0),
            Some(r) => {
                b.u8(1);
                b.u32(r.parent_tile_index);
                b.indices(&r.parent_cell_indices);
            }
        }
    }
    b.0
}

fn hyper_write(b: &mut Buf, h: &ReservoirHyperparams) {
    b.u32(h.d_r);
    b.f64s(&[h.g, h.density, h.g_in, h.g_l, h.tau, h.dt_step, h.noise_std, h.beta]);
    b.u32(h.washout);
}

fn hyper_read(c: &mut Cursor) -> Result<ReservoirHyperparams> {
    let d_r = c.u32()?;
    let v = c.f64s(8)?;
    let washout = c.u32()?;
    Ok(ReservoirHyperparams {
        d_r,
        g: v[0],
        density: v[1],
        g_in: v[2],
        g_l: v[3],
        tau: v[4],
        dt_step: v[5],
        noise_std: v[6],
        beta: v[7],
        washout,
    })
}

/// Serializes a trained model.
pub fn write_model(model: &HierarchyModel) -> Result<Vec<u8>> {
    let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
    sections.push((*b"CONF", model.config.canonical_text().into_bytes()));
    let p = &model.provenance;
    sections.push((
        *b"PROV",
        format!(
            "config_hash={}\nmaster_seed={}\ndata_fingerprint={}\n",
            p.config_hash, p.master_seed, p.data_fingerprint
        )
        .into_bytes(),
    ));
    for layer in &model.layers {
        sections.push((*b"LAYR", layer_payload(layer)));
    }
    for layer in &model.layers {
        for unit in &layer.units {
            let res = &unit.reservoir;
            let w_out = res
                .w_out()
                .ok_or_else(|| Error::Untrained(format!("layer {} tile {}", layer.level, unit.tile_index)))?;
            let mut b = Buf::default();
            b.u32(layer.level);
            b.u32(unit.tile_index);
            b.u32(res.d_in_local);
            b.u32(res.d_in_parent);
            b.u32(res.d_out);
            b.u64(res.seed);
            hyper_write(&mut b, &res.hyper);
            let (w1, win1) = res.weight_probe();
            b.f64s(&w1);
            b.f64s(&win1);
            for i in 0..w_out.nrows() {
                for j in 0..w_out.ncols() {
                    b.f64(w_out[(i, j)]);
                }
            }
            sections.push((*b"RESV", b.0));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
    for (tag, payload) in &sections {
        section(&mut out, tag, payload);
    }
    Ok(out)
}

fn read_sections(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    let mut c = Cursor::new(bytes, "model header");
    if c.take(4)? != MODEL_MAGIC {
        return Err(Error::CorruptHeader("bad magic, expected \"XSRC\"".into()));
    }
    let version = c.u32()? as u32;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: MODEL_VERSION,
        });
    }
    let n = c.u32()?;
    let mut sections = Vec::with_capacity(n);
    c.what = "model section";
    for _ in 0..n {
        let tag: [u8; 4] = c.take(4)?.try_into().unwrap();
        let len = usize::try_from(c.u64()?).map_err(|_| Error::CorruptHeader("section too large".into()))?;
        let payload = c.take(len)?;
        let crc = c.u32()? as u32;
        let mut h = crc32fast::Hasher::new();
        h.update(&tag);
        h.update(payload);
        if h.finalize() != crc {
            return Err(Error::Checksum(format!(
                "CRC mismatch in section {}",
                String::from_utf8_lossy(&tag)
            )));
        }
        sections.push((tag, payload));
    }
    c.finish()?;
    Ok(sections)
}

fn expect_tag(tag: &[u8; 4], want: &[u8; 4]) -> Result<()> {
    if tag != want {
        return Err(Error::CorruptHeader(format!(
            "expected section {}, found {}",
            String::from_utf8_lossy(want),
            String::from_utf8_lossy(tag)
        )));
    }
    Ok(())
}

/// Parses a model container, regenerating fixed weights from their seeds.
pub fn read_model(bytes: &[u8]) -> Result<HierarchyModel> {
    let sections = read_sections(bytes)?;
    let mut it = sections.into_iter();
    let (tag, conf) = it.next().ok_or_else(|| Error::CorruptHeader("empty model".into()))?;
    expect_tag(&tag, b"CONF")?;
    let text = std::str::from_utf8(conf).map_err(|_| Error::CorruptHeader("config is not UTF-8".into()))?;
    let config: ModelConfig = toml::from_str(text).map_err(|e| Error::CorruptHeader(format!("config: {e}")))?;
    config.validate()?;

    let (tag, prov) = it.next().ok_or_else(|| Error::CorruptHeader("missing provenance".into()))?;
    expect_tag(&tag, b"PROV")?;
    let prov = std::str::from_utf8(prov).map_err(|_| Error::CorruptHeader("provenance is not UTF-8".into()))?;
    let field = |key: &str| -> Result<String> {
        prov.lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_owned)
            .ok_or_else(|| Error::CorruptHeader(format!("provenance lacks {key}")))
    };
    let provenance = Provenance {
        config_hash: field("config_hash")?,
        master_seed: field("master_seed")?
            .parse()
            .map_err(|_| Error::CorruptHeader("bad master_seed".into()))?,
        data_fingerprint: field("data_fingerprint")?,
    };
    if provenance.config_hash != config.hash() {
        return Err(Error::Checksum("config hash does not match stored config".into()));
    }

    let mut masks = Vec::new();
    let mut grids = Vec::new();
    let mut stored_layers = Vec::new();
    for _ in 0..config.n_layers {
        let (tag, payload) = it.next().ok_or_else(|| Error::CorruptHeader("missing layer section".into()))?;
        expect_tag(&tag, b"LAYR")?;
        let mut c = Cursor::new(payload, "layer section");
        let _level = c.u32()?;
        let rows = c.u32()?;
        let cols = c.u32()?;
        let mask: Vec<bool> = c.take(rows * cols)?.iter().map(|&b| b != 0).collect();
        masks.push(mask);
        grids.push((rows, cols));
        stored_layers.push(payload);
    }
    let mut layers = build_hierarchy(&config, &masks, &grids)?;
    for (layer, stored) in layers.iter().zip(&stored_layers) {
        if layer_payload(layer).as_slice() != *stored {
            return Err(Error::Checksum(format!(
                "layer {} geometry differs from the geometry rebuilt from the config",
                layer.level
            )));
        }
    }

    for layer in layers.iter_mut() {
        for unit in layer.units.iter_mut() {
            let (tag, payload) = it.next().ok_or_else(|| Error::CorruptHeader("missing reservoir section".into()))?;
            expect_tag(&tag, b"RESV")?;
            let mut c = Cursor::new(payload, "reservoir section");
            let level = c.u32()?;
            let tile = c.u32()?;
            let dims = (c.u32()?, c.u32()?, c.u32()?);
            let seed = c.u64()?;
            let hyper = hyper_read(&mut c)?;
            let res = &mut unit.reservoir;
            if level != layer.level
                || tile != unit.tile_index
                || dims != (res.d_in_local, res.d_in_parent, res.d_out)
                || seed != res.seed
                || hyper != res.hyper
            {
                return Err(Error::Checksum(format!(
                    "reservoir section for layer {level} tile {tile} does not match the rebuilt model"
                )));
            }
            let d_r = hyper.d_r;
            let w1 = c.f64s(d_r)?;
            let win1 = c.f64s(d_r)?;
            let (w1_now, win1_now) = res.weight_probe();
            let same = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            if !same(&w1, &w1_now) || !same(&win1, &win1_now) {
                return Err(Error::Checksum(format!(
                    "regenerated weights of layer {level} tile {tile} fail the probe check"
                )));
            }
            let w_out = c.f64s(res.d_out * d_r)?;
            c.finish()?;
            res.set_readout(DMatrix::from_row_slice(res.d_out, d_r, &w_out))?;
        }
    }
    if it.next().is_some() {
        return Err(Error::CorruptHeader("unexpected trailing sections".into()));
    }
    Ok(HierarchyModel {
        config,
        layers,
        provenance,
    })
}

pub fn save_model(model: &HierarchyModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &write_model(model)?)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HierarchyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridSeries;
    use crate::hierarchy::{forecast, train_hierarchy, LayerConfig};
    use crate::layer::TilingParams;

    fn model() -> (HierarchyModel, GridSeries) {
        let hyper = ReservoirHyperparams {
            d_r: 12,
            washout: 5,
            ..Default::default()
        };
        let config = ModelConfig {
            n_layers: 2,
            refine_factors: vec![2],
            master_seed: 4,
            parent_timing: Default::default(),
            parent_training: Default::default(),
            layers: vec![
                LayerConfig {
                    tiling: TilingParams::new(1, 2),
                    hyper,
                },
                LayerConfig {
                    tiling: TilingParams::new(2, 2),
                    hyper,
                },
            ],
        };
        let values: Vec<f64> = (0..40 * 16).map(|i| (i as f64 * 0.21).cos()).collect();
        let series = GridSeries::from_values(40, 2, 8, values).unwrap();
        (train_hierarchy(&config, &series).unwrap(), series)
    }

    #[test]
    fn round_trip_reproduces_forecasts() {
        let (m, s) = model();
        let bytes = write_model(&m).unwrap();
        let back = read_model(&bytes).unwrap();
        assert_eq!(back.provenance, m.provenance);
        let warm = s.slice_time(0, 10).unwrap();
        let a = forecast(&m, &warm, 5).unwrap();
        let b = forecast(&back, &warm, 5).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert_eq!(x.frames, y.frames);
        }
        assert_eq!(write_model(&back).unwrap(), bytes);
    }

    #[test]
    fn tampered_readout_fails_checksum() {
        let (m, _) = model();
        let mut bytes = write_model(&m).unwrap();
        let n = bytes.len();
        // last bytes before the final CRC belong to the last W_out
        bytes[n - 10] ^= 0x40;
        assert!(matches!(read_model(&bytes), Err(Error::Checksum(_))));
    }

    #[test]
    fn future_version_rejected() {
        let (m, _) = model();
        let mut bytes = write_model(&m).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_model(&bytes), Err(Error::UnsupportedVersion { found: 2, .. })));
        assert!(matches!(read_model(b"NOPE"), Err(Error::CorruptHeader(_))));
    }
}
