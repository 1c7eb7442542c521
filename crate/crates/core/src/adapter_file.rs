//! Binary adapter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SADP" | version: u16 | payload: u8 (0 sparse, 1 dense, 2 lora)
//! task id: u32 length + UTF-8
//! criterion: u8 | kr: f64 | block size: u32 (0 = element masks) | seed: u64
//! config hash: [u8; 32] | config text: u32 length + UTF-8
//! train loss: f64 | val loss: f64
//! provenance: u32 count + count x [u8; 32]
//! layers: u32 count, then per layer
//!   site: u32 | rows: u32 | cols: u32 | kind: u8
//!   kind 0 (element): count: u32, count x (row: u32, col: u32), count x f64
//!   kind 1 (block):   size: u32, count: u32, count x (block row, block col),
//!                     count x size^2 x f64, block by block in row-major order
//!   kind 2 (dense):   rows x cols x f64
//!   kind 3 (lora):    rank: u32, alpha: f64, rows x rank f64, rank x cols f64
//! ```
//!
//! Coordinates are strictly increasing. Values are stored as raw bits, so a
//! round trip is lossless.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{parse_train_config, train_config_text};
use crate::error::{Error, FormatError, Result};
use crate::merging::{Expert, TaskVector};
use crate::model::{LoraAdapter, LoraLayer, Site};
use crate::numerics::Matrix;
use crate::saliency::{Criterion, MaskKind, SparseMask};
use crate::trainer::{Adapter, AdapterLayer, TrainConfig};

pub const MAGIC: [u8; 4] = *b"SADP";
pub const VERSION: u16 = 1;

pub type Hash = [u8; 32];

/// An expert plus the hashes of the files it was merged from.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterFile {
    pub expert: Expert,
    pub provenance: Vec<Hash>,
}

impl AdapterFile {
    pub fn new(expert: Expert) -> Self {
        Self {
            expert,
            provenance: Vec::new(),
        }
    }
}

pub fn sha256(bytes: &[u8]) -> Hash {
    Sha256::digest(bytes).into()
}

pub fn hex(hash: &Hash) -> String {
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Input(format!("{v} does not fit the file format")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.bytes(s.as_bytes());
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated(what).into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_bits(self.u64(what)?))
    }
    fn hash(&mut self, what: &'static str) -> Result<Hash> {
        Ok(self.take(32, what)?.try_into().expect("32 bytes"))
    }
    fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| FormatError::Corrupt(format!("{what} is not UTF-8")).into())
    }
    /// `n` values, guarding against counts larger than the remaining bytes.
    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        if n.checked_mul(8)
            .is_none_or(|b| b > self.buf.len() - self.pos)
        {
            return Err(FormatError::Truncated(what).into());
        }
        (0..n).map(|_| self.f64(what)).collect()
    }
    fn pairs(&mut self, n: usize, what: &'static str) -> Result<Vec<(u32, u32)>> {
        if n.checked_mul(8)
            .is_none_or(|b| b > self.buf.len() - self.pos)
        {
            return Err(FormatError::Truncated(what).into());
        }
        (0..n)
            .map(|_| Ok((self.u32(what)? as u32, self.u32(what)? as u32)))
            .collect()
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    FormatError::Corrupt(msg.into()).into()
}

const PAYLOAD_SPARSE: u8 = 0;
const PAYLOAD_DENSE: u8 = 1;
const PAYLOAD_LORA: u8 = 2;

const LAYER_ELEMENT: u8 = 0;
const LAYER_BLOCK: u8 = 1;
const LAYER_DENSE: u8 = 2;
const LAYER_LORA: u8 = 3;

pub fn encode(file: &AdapterFile) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.bytes(&MAGIC);
    w.u16(VERSION);
    let (payload, task_id, config, losses) = match &file.expert {
        Expert::Sparse(a) => (
            PAYLOAD_SPARSE,
            &a.task_id,
            Some(&a.config),
            (a.train_loss, a.val_loss),
        ),
        Expert::Dense(t) => (PAYLOAD_DENSE, &t.task_id, None, (f64::NAN, f64::NAN)),
        Expert::Lora(l) => (PAYLOAD_LORA, &l.task_id, None, (f64::NAN, f64::NAN)),
    };
    w.u8(payload);
    w.str(task_id)?;
    let default_cfg = TrainConfig::default();
    let cfg = config.unwrap_or(&default_cfg);
    let text = config.map(train_config_text).unwrap_or_default();
    w.u8(cfg.criterion.code());
    w.f64(if config.is_some() { cfg.kr } else { 1.0 });
    w.u32(cfg.block_size.filter(|_| config.is_some()).unwrap_or(0))?;
    w.u64(if config.is_some() { cfg.seed } else { 0 });
    w.bytes(&sha256(text.as_bytes()));
    w.str(&text)?;
    w.f64(losses.0);
    w.f64(losses.1);
    w.u32(file.provenance.len())?;
    for h in &file.provenance {
        w.bytes(h);
    }
    match &file.expert {
        Expert::Sparse(a) => {
            w.u32(a.layers.len())?;
            for (site, l) in &a.layers {
                write_sparse_layer(&mut w, *site, l)?;
            }
        }
        Expert::Dense(t) => {
            w.u32(t.layers.len())?;
            for (site, m) in &t.layers {
                w.u32(site.code() as usize)?;
                w.u32(m.rows())?;
                w.u32(m.cols())?;
                w.u8(LAYER_DENSE);
                m.data().iter().for_each(|v| w.f64(*v));
            }
        }
        Expert::Lora(lora) => {
            w.u32(lora.layers.len())?;
            for (site, l) in &lora.layers {
                w.u32(site.code() as usize)?;
                w.u32(l.a.rows())?;
                w.u32(l.b.cols())?;
                w.u8(LAYER_LORA);
                w.u32(lora.rank)?;
                w.f64(lora.alpha);
                l.a.data().iter().for_each(|v| w.f64(*v));
                l.b.data().iter().for_each(|v| w.f64(*v));
            }
        }
    }
    Ok(w.0)
}

fn write_sparse_layer(w: &mut Writer, site: Site, l: &AdapterLayer) -> Result<()> {
    let (rows, cols) = l.values.shape();
    // Only masked coordinates are stored; anything else would be lost.
    let keep = l.mask.to_dense();
    if let Some(i) =
        (0..l.values.len()).find(|&i| keep.data()[i] == 0.0 && l.values.data()[i].to_bits() != 0)
    {
        return Err(Error::Input(format!(
            "layer {site} has value {} outside its mask at ({}, {})",
            l.values.data()[i],
            i / cols,
            i % cols
        )));
    }
    w.u32(site.code() as usize)?;
    w.u32(rows)?;
    w.u32(cols)?;
    match l.mask.kind() {
        MaskKind::Element(coords) => {
            w.u8(LAYER_ELEMENT);
            w.u32(coords.len())?;
            for (r, c) in coords {
                w.u32(*r as usize)?;
                w.u32(*c as usize)?;
            }
            for (r, c) in coords {
                w.f64(l.values.get(*r as usize, *c as usize));
            }
        }
        MaskKind::Block { size, blocks } => {
            w.u8(LAYER_BLOCK);
            w.u32(*size as usize)?;
            w.u32(blocks.len())?;
            for (r, c) in blocks {
                w.u32(*r as usize)?;
                w.u32(*c as usize)?;
            }
            for (r, c) in l.mask.entries() {
                w.f64(l.values.get(r, c));
            }
        }
    }
    Ok(())
}

fn strictly_increasing(coords: &[(u32, u32)]) -> bool {
    coords.windows(2).all(|p| p[0] < p[1])
}

pub fn decode(bytes: &[u8]) -> Result<AdapterFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = match bytes.get(..4) {
        Some(m) => m.try_into().expect("4 bytes"),
        None => {
            let mut m = [0u8; 4];
            m[..bytes.len()].copy_from_slice(bytes);
            return Err(FormatError::BadMagic(m).into());
        }
    };
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic).into());
    }
    r.pos = 4;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let payload = r.u8("payload kind")?;
    let task_id = r.str("task id")?;
    let criterion =
        Criterion::from_code(r.u8("criterion")?).ok_or_else(|| corrupt("unknown criterion"))?;
    let kr = r.f64("keep ratio")?;
    let block = r.u32("block size")?;
    let seed = r.u64("seed")?;
    let hash = r.hash("config hash")?;
    let text = r.str("config text")?;
    if sha256(text.as_bytes()) != hash {
        return Err(corrupt("config hash does not match config text"));
    }
    let train_loss = r.f64("train loss")?;
    let val_loss = r.f64("val loss")?;
    let n_prov = r.u32("provenance count")?;
    if n_prov.checked_mul(32).is_none_or(|b| b > bytes.len()) {
        return Err(FormatError::Truncated("provenance").into());
    }
    let provenance = (0..n_prov)
        .map(|_| r.hash("provenance"))
        .collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32("layer count")?;

    let expert = match payload {
        PAYLOAD_SPARSE => {
            let config =
                parse_train_config(&text).map_err(|e| corrupt(format!("config text: {e}")))?;
            if config.criterion != criterion
                || config.kr.to_bits() != kr.to_bits()
                || config.block_size.unwrap_or(0) != block
                || config.seed != seed
            {
                return Err(corrupt("metadata disagrees with config text"));
            }
            let mut layers = BTreeMap::new();
            for _ in 0..n_layers {
                let (site, layer) = read_sparse_layer(&mut r)?;
                if layers.insert(site, layer).is_some() {
                    return Err(corrupt(format!("layer {site} appears twice")));
                }
            }
            Expert::Sparse(Adapter {
                task_id,
                layers,
                config,
                train_loss,
                val_loss,
            })
        }
        PAYLOAD_DENSE => {
            let mut layers = BTreeMap::new();
            for _ in 0..n_layers {
                let (site, rows, cols) = read_layer_header(&mut r, LAYER_DENSE)?;
                let data = r.f64s(rows * cols, "dense values")?;
                let m = Matrix::from_vec(rows, cols, data).map_err(|e| corrupt(e.to_string()))?;
                if layers.insert(site, m).is_some() {
                    return Err(corrupt(format!("layer {site} appears twice")));
                }
            }
            Expert::Dense(TaskVector { task_id, layers })
        }
        PAYLOAD_LORA => {
            let mut layers = BTreeMap::new();
            let mut shape = None;
            for _ in 0..n_layers {
                let (site, rows, cols) = read_layer_header(&mut r, LAYER_LORA)?;
                let rank = r.u32("lora rank")?;
                let alpha = r.f64("lora alpha")?;
                if *shape.get_or_insert((rank, alpha.to_bits())) != (rank, alpha.to_bits()) {
                    return Err(corrupt("lora layers disagree on rank or alpha"));
                }
                let a = Matrix::from_vec(rows, rank, r.f64s(rows * rank, "lora A")?)
                    .map_err(|e| corrupt(e.to_string()))?;
                let b = Matrix::from_vec(rank, cols, r.f64s(rank * cols, "lora B")?)
                    .map_err(|e| corrupt(e.to_string()))?;
                if layers.insert(site, LoraLayer { a, b }).is_some() {
                    return Err(corrupt(format!("layer {site} appears twice")));
                }
            }
            let (rank, alpha) = shape.unwrap_or((0, 0));
            Expert::Lora(LoraAdapter {
                task_id,
                rank,
                alpha: f64::from_bits(alpha),
                layers,
            })
        }
        other => return Err(corrupt(format!("unknown payload kind {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(AdapterFile { expert, provenance })
}

fn read_site(r: &mut Reader<'_>) -> Result<Site> {
    let code = r.u32("site")? as u32;
    Site::from_code(code).ok_or_else(|| corrupt(format!("unknown site code {code}")))
}

fn read_layer_header(r: &mut Reader<'_>, expected: u8) -> Result<(Site, usize, usize)> {
    let site = read_site(r)?;
    let rows = r.u32("rows")?;
    let cols = r.u32("cols")?;
    let kind = r.u8("layer kind")?;
    if kind != expected {
        return Err(corrupt(format!(
            "layer {site} has kind {kind}, expected {expected}"
        )));
    }
    Ok((site, rows, cols))
}

fn read_sparse_layer(r: &mut Reader<'_>) -> Result<(Site, AdapterLayer)> {
    let site = read_site(r)?;
    let rows = r.u32("rows")?;
    let cols = r.u32("cols")?;
    if rows
        .checked_mul(cols)
        .is_none_or(|n| n > (r.buf.len() * 8 + 1) << 20)
    {
        return Err(corrupt(format!(
            "layer {site} shape {rows}x{cols} is implausible"
        )));
    }
    let kind = r.u8("layer kind")?;
    let mut values = Matrix::zeros(rows, cols);
    let mask = match kind {
        LAYER_ELEMENT => {
            let n = r.u32("coordinate count")?;
            let coords = r.pairs(n, "coordinates")?;
            if !strictly_increasing(&coords) {
                return Err(corrupt(format!(
                    "layer {site} coordinates are not strictly increasing"
                )));
            }
            let vals = r.f64s(n, "values")?;
            let mask = SparseMask::from_elements(rows, cols, coords.clone())
                .map_err(|e| corrupt(e.to_string()))?;
            for ((rr, cc), v) in coords.iter().zip(vals) {
                values.set(*rr as usize, *cc as usize, v);
            }
            mask
        }
        LAYER_BLOCK => {
            let size = r.u32("block size")?;
            let n = r.u32("block count")?;
            let blocks = r.pairs(n, "blocks")?;
            if !strictly_increasing(&blocks) {
                return Err(corrupt(format!(
                    "layer {site} blocks are not strictly increasing"
                )));
            }
            let count = n
                .checked_mul(size * size)
                .ok_or_else(|| corrupt("block value count overflows"))?;
            let vals = r.f64s(count, "block values")?;
            let mask = SparseMask::from_blocks(rows, cols, size, blocks)
                .map_err(|e| corrupt(e.to_string()))?;
            for ((rr, cc), v) in mask.entries().zip(vals) {
                values.set(rr, cc, v);
            }
            mask
        }
        other => {
            return Err(corrupt(format!(
                "layer {site} has unknown mask kind {other}"
            )))
        }
    };
    Ok((site, AdapterLayer { values, mask }))
}

/// Writes to a temporary file next to `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, file: &AdapterFile) -> Result<Hash> {
    let bytes = encode(file)?;
    write_atomic(path, &bytes)?;
    Ok(sha256(&bytes))
}

/// Reads and decodes a file, also returning the hash of its bytes.
pub fn read_file(path: &Path) -> Result<(AdapterFile, Hash)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((decode(&bytes)?, sha256(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerKind, Site};

    fn sample_adapter(block: bool) -> Adapter {
        let site = Site::block(1, LayerKind::Qkv);
        let (values, mask) = if block {
            let mask = SparseMask::from_blocks(4, 4, 2, vec![(0, 1), (1, 0)]).unwrap();
            let mut v = Matrix::zeros(4, 4);
            for (i, (r, c)) in mask.entries().enumerate() {
                v.set(r, c, i as f64 * 0.1 - 0.3);
            }
            (v, mask)
        } else {
            let mask = SparseMask::from_elements(4, 4, vec![(0, 3), (2, 1)]).unwrap();
            let mut v = Matrix::zeros(4, 4);
            v.set(0, 3, 1.0 / 3.0);
            v.set(2, 1, -0.0);
            (v, mask)
        };
        Adapter {
            task_id: "in00-majority".into(),
            layers: [(site, AdapterLayer { values, mask })]
                .into_iter()
                .collect(),
            config: TrainConfig {
                block_size: block.then_some(2),
                ..TrainConfig::default()
            },
            train_loss: 0.25,
            val_loss: f64::NAN,
        }
    }

    fn bits_eq(a: &AdapterFile, b: &AdapterFile) -> bool {
        encode(a).unwrap() == encode(b).unwrap() && format!("{a:?}") == format!("{b:?}")
    }

    #[test]
    fn element_and_block_round_trip() {
        for block in [false, true] {
            let f = AdapterFile {
                expert: Expert::Sparse(sample_adapter(block)),
                provenance: vec![[7u8; 32]],
            };
            let back = decode(&encode(&f).unwrap()).unwrap();
            assert!(bits_eq(&f, &back));
        }
    }

    #[test]
    fn magic_and_version_have_distinct_errors() {
        let mut bytes = encode(&AdapterFile::new(Expert::Sparse(sample_adapter(false)))).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let e1 = decode(&bad).unwrap_err();
        bytes[4] = 9;
        let e2 = decode(&bytes).unwrap_err();
        assert!(matches!(e1, Error::Format(FormatError::BadMagic(_))));
        assert!(matches!(
            e2,
            Error::Format(FormatError::UnsupportedVersion(9))
        ));
        assert_ne!(e1.code(), e2.code());
        assert!(matches!(
            decode(b"SA").unwrap_err(),
            Error::Format(FormatError::BadMagic(_))
        ));
    }

    #[test]
    fn truncation_and_trailing_bytes_are_rejected() {
        let bytes = encode(&AdapterFile::new(Expert::Sparse(sample_adapter(true)))).unwrap();
        for cut in [6, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            decode(&longer),
            Err(Error::Format(FormatError::Corrupt(_)))
        ));
    }

    #[test]
    fn values_outside_mask_cannot_be_written() {
        let mut a = sample_adapter(false);
        a.layers.values_mut().next().unwrap().values.set(3, 3, 1.0);
        assert!(matches!(
            encode(&AdapterFile::new(Expert::Sparse(a))),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn unsorted_coordinates_are_corrupt() {
        let bytes = encode(&AdapterFile::new(Expert::Sparse(sample_adapter(false)))).unwrap();
        // Swap the two coordinate pairs, which sit right before the values.
        let n = bytes.len();
        let coords = n - 16 - 16;
        let mut swapped = bytes.clone();
        swapped[coords..coords + 8].copy_from_slice(&bytes[coords + 8..coords + 16]);
        swapped[coords + 8..coords + 16].copy_from_slice(&bytes[coords..coords + 8]);
        assert!(matches!(
            decode(&swapped),
            Err(Error::Format(FormatError::Corrupt(_)))
        ));
    }

    #[test]
    fn dense_and_lora_round_trip() {
        let site = Site::block(0, LayerKind::Qkv);
        let tv = TaskVector {
            task_id: "tv".into(),
            layers: [(
                site,
                Matrix::from_rows(&[&[1.5, -2.0], &[f64::MIN_POSITIVE, 3.0]]),
            )]
            .into_iter()
            .collect(),
        };
        let lora = LoraAdapter {
            task_id: "lo".into(),
            rank: 1,
            alpha: 2.0,
            layers: [(
                site,
                LoraLayer {
                    a: Matrix::from_rows(&[&[1.0], &[2.0]]),
                    b: Matrix::from_rows(&[&[3.0, 4.0]]),
                },
            )]
            .into_iter()
            .collect(),
        };
        for e in [Expert::Dense(tv), Expert::Lora(lora)] {
            let f = AdapterFile::new(e);
            assert!(bits_eq(&f, &decode(&encode(&f).unwrap()).unwrap()));
        }
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/a.sadp");
        let f = AdapterFile::new(Expert::Sparse(sample_adapter(true)));
        let h = write_file(&path, &f).unwrap();
        let (back, h2) = read_file(&path).unwrap();
        assert_eq!(h, h2);
        assert!(bits_eq(&f, &back));
        assert_eq!(
            std::fs::read_dir(path.parent().unwrap()).unwrap().count(),
            1
        );
    }
}
