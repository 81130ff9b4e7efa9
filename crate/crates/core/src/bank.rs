//! `DFB1` feature banks: persisted unit-norm embeddings.
//!
//! Little-endian throughout. Header (24 bytes): `b"DFB1"`, `u32` version,
//! `u32` dim, `u32` kind (0 image_single, 1 image_patches, 2 text), `u64`
//! record count. Image records: `u64` image id, `u32` row count, then per
//! row 4 x `f32` normalised box (all zero for a whole-image row) and
//! `dim` x `f32` feature. Text records: `u32` class id, `u32` name length,
//! UTF-8 name, `dim` x `f32` feature.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BANK_MAGIC: &[u8; 4] = b"DFB1";
pub const BANK_VERSION: u32 = 1;
pub const HEADER_BYTES: u64 = 24;
/// Tolerance on stored feature norms (f32 storage of f64 values).
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("bad magic {found:?} at offset {offset}")]
    BadMagic { offset: u64, found: [u8; 4] },
    #[error("unsupported bank version {0}")]
    Version(u32),
    #[error("unknown bank kind {0} at offset 12")]
    Kind(u32),
    #[error("truncated bank: reading {what} at offset {offset}")]
    Truncated { offset: u64, what: &'static str },
    #[error("record {record}: expected {expected}, found {found}")]
    Mismatch { record: u64, expected: String, found: String },
    #[error("record {record} row {row}: feature norm {norm} is not unit")]
    NotUnit { record: u64, row: usize, norm: f64 },
    #[error("record {record}: invalid UTF-8 class name")]
    Utf8 { record: u64 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, BankError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankKind {
    ImageSingle,
    ImagePatches,
    Text,
}

impl BankKind {
    fn code(self) -> u32 {
        match self {
            BankKind::ImageSingle => 0,
            BankKind::ImagePatches => 1,
            BankKind::Text => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(BankKind::ImageSingle),
            1 => Ok(BankKind::ImagePatches),
            2 => Ok(BankKind::Text),
            other => Err(BankError::Kind(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankHeader {
    pub version: u32,
    pub dim: usize,
    pub kind: BankKind,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub image_id: u64,
    pub boxes: Vec<[f32; 4]>,
    /// `rows x dim`, row-major.
    pub features: Vec<f32>,
}

impl ImageEntry {
    pub fn num_rows(&self) -> usize {
        self.boxes.len()
    }

    pub fn row(&self, i: usize, dim: usize) -> &[f32] {
        &self.features[i * dim..(i + 1) * dim]
    }

    pub fn rows_f64(&self, dim: usize) -> Vec<Vec<f64>> {
        self.features.chunks(dim).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
    }

    pub fn from_f64(image_id: u64, boxes: Vec<[f64; 4]>, rows: &[Vec<f64>]) -> Self {
        Self {
            image_id,
            boxes: boxes.iter().map(|b| b.map(|v| v as f32)).collect(),
            features: rows.iter().flatten().map(|&v| v as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEntry {
    pub class_id: u32,
    pub name: String,
    pub feature: Vec<f32>,
}

impl TextEntry {
    pub fn feature_f64(&self) -> Vec<f64> {
        self.feature.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Image(ImageEntry),
    Text(TextEntry),
}

/// An in-memory bank.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub dim: usize,
    pub kind: BankKind,
    pub images: Vec<ImageEntry>,
    pub texts: Vec<TextEntry>,
}

impl FeatureBank {
    pub fn new_images(dim: usize, kind: BankKind) -> Self {
        Self { dim, kind, images: Vec::new(), texts: Vec::new() }
    }

    pub fn new_texts(dim: usize) -> Self {
        Self { dim, kind: BankKind::Text, images: Vec::new(), texts: Vec::new() }
    }

    pub fn count(&self) -> u64 {
        match self.kind {
            BankKind::Text => self.texts.len() as u64,
            _ => self.images.len() as u64,
        }
    }

    pub fn header(&self) -> BankHeader {
        BankHeader { version: BANK_VERSION, dim: self.dim, kind: self.kind, count: self.count() }
    }

    /// Total feature rows across all records.
    pub fn total_rows(&self) -> usize {
        match self.kind {
            BankKind::Text => self.texts.len(),
            _ => self.images.iter().map(ImageEntry::num_rows).sum(),
        }
    }
}

fn check_unit(record: u64, row: usize, feature: &[f32]) -> Result<()> {
    let norm = feature.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE || !norm.is_finite() {
        return Err(BankError::NotUnit { record, row, norm });
    }
    Ok(())
}

fn mismatch(record: u64, expected: impl ToString, found: impl ToString) -> BankError {
    BankError::Mismatch { record, expected: expected.to_string(), found: found.to_string() }
}

/// Validates records against the bank's declared shape.
fn validate_record(header: &BankHeader, index: u64, rec: &Record) -> Result<()> {
    let d = header.dim;
    match (header.kind, rec) {
        (BankKind::Text, Record::Text(t)) => {
            if t.feature.len() != d {
                return Err(mismatch(index, format!("{d} values"), t.feature.len()));
            }
            check_unit(index, 0, &t.feature)
        }
        (BankKind::ImageSingle | BankKind::ImagePatches, Record::Image(e)) => {
            if header.kind == BankKind::ImageSingle && e.num_rows() != 1 {
                return Err(mismatch(index, "1 row in a single-feature bank", e.num_rows()));
            }
            if e.num_rows() == 0 {
                return Err(mismatch(index, "at least one row", 0));
            }
            if e.features.len() != e.num_rows() * d {
                return Err(mismatch(index, format!("{} values", e.num_rows() * d), e.features.len()));
            }
            for r in 0..e.num_rows() {
                check_unit(index, r, e.row(r, d))?;
            }
            Ok(())
        }
        (kind, _) => Err(mismatch(index, format!("{kind:?} record"), "other record kind")),
    }
}

struct CountingWriter<W> {
    inner: W,
}

impl<W: Write> CountingWriter<W> {
    fn u32(&mut self, v: u32) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> io::Result<()> {
        self.inner.write_all(&v.to_le_bytes())
    }
    fn f32s(&mut self, vs: &[f32]) -> io::Result<()> {
        for v in vs {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

pub fn write_bank_to<W: Write>(bank: &FeatureBank, w: W) -> Result<()> {
    let header = bank.header();
    let mut w = CountingWriter { inner: w };
    w.inner.write_all(BANK_MAGIC)?;
    w.u32(header.version)?;
    w.u32(bank.dim as u32)?;
    w.u32(bank.kind.code())?;
    w.u64(header.count)?;
    match bank.kind {
        BankKind::Text => {
            for (i, t) in bank.texts.iter().enumerate() {
                validate_record(&header, i as u64, &Record::Text(t.clone()))?;
                w.u32(t.class_id)?;
                w.u32(t.name.len() as u32)?;
                w.inner.write_all(t.name.as_bytes())?;
                w.f32s(&t.feature)?;
            }
        }
        _ => {
            for (i, e) in bank.images.iter().enumerate() {
                validate_record(&header, i as u64, &Record::Image(e.clone()))?;
                w.u64(e.image_id)?;
                w.u32(e.num_rows() as u32)?;
                for r in 0..e.num_rows() {
                    w.f32s(&e.boxes[r])?;
                    w.f32s(e.row(r, bank.dim))?;
                }
            }
        }
    }
    w.inner.flush()?;
    Ok(())
}

/// Writes `bank` to a new file; fails if the file already exists.
pub fn write_bank(path: &Path, bank: &FeatureBank) -> Result<()> {
    let f = OpenOptions::new().write(true).create_new(true).open(path)?;
    write_bank_to(bank, BufWriter::new(f))
}

/// Streaming reader that validates each record as it is decoded.
pub struct BankReader<R> {
    inner: R,
    offset: u64,
    header: BankHeader,
    read: u64,
}

impl<R: Read> BankReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut offset = 0;
        let magic: [u8; 4] = read_bytes(&mut inner, &mut offset, "magic")?;
        if &magic != BANK_MAGIC {
            return Err(BankError::BadMagic { offset: 0, found: magic });
        }
        let version = u32::from_le_bytes(read_bytes(&mut inner, &mut offset, "version")?);
        if version != BANK_VERSION {
            return Err(BankError::Version(version));
        }
        let dim = u32::from_le_bytes(read_bytes(&mut inner, &mut offset, "dim")?) as usize;
        if dim == 0 {
            return Err(BankError::Invalid("bank dim is zero".into()));
        }
        let kind = BankKind::from_code(u32::from_le_bytes(read_bytes(&mut inner, &mut offset, "kind")?))?;
        let count = u64::from_le_bytes(read_bytes(&mut inner, &mut offset, "count")?);
        Ok(Self { inner, offset, header: BankHeader { version, dim, kind, count }, read: 0 })
    }

    pub fn header(&self) -> &BankHeader {
        &self.header
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| BankError::Truncated { offset: self.offset, what })?;
        self.offset += buf.len() as u64;
        Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn next_record(&mut self) -> Result<Record> {
        let d = self.header.dim;
        let index = self.read;
        let rec = match self.header.kind {
            BankKind::Text => {
                let class_id = u32::from_le_bytes(read_bytes(&mut self.inner, &mut self.offset, "class id")?);
                let len = u32::from_le_bytes(read_bytes(&mut self.inner, &mut self.offset, "name length")?);
                let mut name = vec![0u8; len as usize];
                self.inner
                    .read_exact(&mut name)
                    .map_err(|_| BankError::Truncated { offset: self.offset, what: "class name" })?;
                self.offset += len as u64;
                let name = String::from_utf8(name).map_err(|_| BankError::Utf8 { record: index })?;
                let feature = self.f32s(d, "text feature")?;
                Record::Text(TextEntry { class_id, name, feature })
            }
            _ => {
                let image_id = u64::from_le_bytes(read_bytes(&mut self.inner, &mut self.offset, "image id")?);
                let rows = u32::from_le_bytes(read_bytes(&mut self.inner, &mut self.offset, "row count")?) as usize;
                let mut boxes = Vec::with_capacity(rows);
                let mut features = Vec::with_capacity(rows * d);
                for _ in 0..rows {
                    let b = self.f32s(4, "row box")?;
                    boxes.push([b[0], b[1], b[2], b[3]]);
                    features.extend(self.f32s(d, "row feature")?);
                }
                Record::Image(ImageEntry { image_id, boxes, features })
            }
        };
        validate_record(&self.header, index, &rec)?;
        self.read += 1;
        Ok(rec)
    }
}

impl<R: Read> Iterator for BankReader<R> {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read >= self.header.count {
            return None;
        }
        let r = self.next_record();
        if r.is_err() {
            // Stop after the first error.
            self.read = self.header.count;
        }
        Some(r)
    }
}

fn read_bytes<const N: usize, R: Read>(r: &mut R, offset: &mut u64, what: &'static str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| BankError::Truncated { offset: *offset, what })?;
    *offset += N as u64;
    Ok(buf)
}

pub fn read_bank_from<R: Read>(r: R) -> Result<FeatureBank> {
    let reader = BankReader::new(r)?;
    let header = *reader.header();
    let mut bank = FeatureBank { dim: header.dim, kind: header.kind, images: Vec::new(), texts: Vec::new() };
    for rec in reader {
        match rec? {
            Record::Image(e) => bank.images.push(e),
            Record::Text(t) => bank.texts.push(t),
        }
    }
    Ok(bank)
}

pub fn read_bank(path: &Path) -> Result<FeatureBank> {
    read_bank_from(BufReader::new(File::open(path)?))
}

pub fn open_bank(path: &Path) -> Result<BankReader<BufReader<File>>> {
    BankReader::new(BufReader::new(File::open(path)?))
}

/// Bytes one image record occupies on disk.
pub fn image_record_bytes(rows: usize, dim: usize) -> u64 {
    8 + 4 + rows as u64 * (16 + 4 * dim as u64)
}
