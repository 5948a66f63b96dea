//! Binary containers shared by model files, hypersurface archives and
//! perturbation archives.
//!
//! Record archives are written in one streaming pass:
//!
//! ```text
//! magic [4] | version u16 | dtype u8 | tag_count u8 | value_count u8
//! | header_len u32 | header bytes | rank u8 | dims u32×rank
//! | record data*                         (each prod(dims) values in dtype)
//! | index: per record offset u64 | tags u32×tag_count | values f64×value_count
//! | footer: index_offset u64 | record_count u64 | crc32 u32
//! ```
//!
//! The CRC32 (ISO-HDLC) covers every byte before it. Unused tags hold
//! [`NO_TAG`].

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const ARCHIVE_VERSION: u16 = 1;
pub const NO_TAG: u32 = u32::MAX;
const FOOTER: usize = 8 + 8 + 4;

/// Validates `magic | version u16 | body_len u64 | body | crc32` and returns
/// the body.
pub(crate) fn check_envelope(bytes: &[u8], magic: [u8; 4], version: u16) -> Result<&[u8]> {
    let preamble = 4 + 2 + 8;
    check_magic(bytes, magic)?;
    need(bytes, preamble)?;
    check_version(bytes, version)?;
    let body_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    let body_len = usize::try_from(body_len)
        .map_err(|_| Error::Malformed(format!("body length {body_len} does not fit in memory")))?;
    let total = preamble
        .checked_add(body_len)
        .and_then(|n| n.checked_add(4))
        .ok_or_else(|| Error::Malformed("body length overflows".into()))?;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(Error::Malformed(format!(
            "{} bytes after the checksum",
            bytes.len() - total
        )));
    }
    check_crc(&bytes[..total])?;
    Ok(&bytes[preamble..preamble + body_len])
}

fn need(bytes: &[u8], n: usize) -> Result<()> {
    if bytes.len() < n {
        Err(Error::Truncated {
            needed: n,
            available: bytes.len(),
        })
    } else {
        Ok(())
    }
}

fn check_magic(bytes: &[u8], magic: [u8; 4]) -> Result<()> {
    need(bytes, 4)?;
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    Ok(())
}

fn check_version(bytes: &[u8], version: u16) -> Result<()> {
    need(bytes, 6)?;
    let found = u16::from_le_bytes([bytes[4], bytes[5]]);
    if found != version {
        return Err(Error::VersionMismatch {
            expected: version,
            found,
        });
    }
    Ok(())
}

/// Verifies the trailing CRC32 of `bytes`.
fn check_crc(bytes: &[u8]) -> Result<()> {
    let (data, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(data);
    if stored != computed {
        return Err(Error::CrcMismatch { stored, computed });
    }
    Ok(())
}

/// Fixed per-archive layout information.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveLayout {
    pub magic: [u8; 4],
    pub dtype: DType,
    pub tag_count: usize,
    pub value_count: usize,
    /// Kind-specific header bytes.
    pub header: Vec<u8>,
    pub element_shape: Vec<usize>,
}

impl ArchiveLayout {
    pub fn element_len(&self) -> usize {
        self.element_shape.iter().product()
    }

    fn element_bytes(&self) -> usize {
        self.element_len() * self.dtype.size()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordMeta {
    pub tags: Vec<u32>,
    pub values: Vec<f64>,
}

/// Streaming record writer. Records are appended as they arrive; the index
/// and checksum are written by [`ArchiveWriter::finish`].
pub struct ArchiveWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
    offset: u64,
    layout: ArchiveLayout,
    index: Vec<(u64, RecordMeta)>,
    scratch: Vec<u8>,
}

impl ArchiveWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, layout: ArchiveLayout) -> Result<Self> {
        ArchiveWriter::new(BufWriter::new(File::create(path)?), layout)
    }
}

impl<W: Write> ArchiveWriter<W> {
    pub fn new(inner: W, layout: ArchiveLayout) -> Result<Self> {
        if layout.tag_count > u8::MAX as usize || layout.value_count > u8::MAX as usize {
            return Err(Error::invalid("too many per-record fields"));
        }
        let mut w = ArchiveWriter {
            inner,
            hasher: crc32fast::Hasher::new(),
            offset: 0,
            layout,
            index: Vec::new(),
            scratch: Vec::new(),
        };
        let mut head = Vec::new();
        head.extend_from_slice(&w.layout.magic);
        head.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        head.push(w.layout.dtype.tag());
        head.push(w.layout.tag_count as u8);
        head.push(w.layout.value_count as u8);
        head.extend_from_slice(&(w.layout.header.len() as u32).to_le_bytes());
        head.extend_from_slice(&w.layout.header);
        head.push(w.layout.element_shape.len() as u8);
        for &d in &w.layout.element_shape {
            head.extend_from_slice(&(d as u32).to_le_bytes());
        }
        w.emit(&head)?;
        Ok(w)
    }

    fn emit(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes)?;
        self.hasher.update(bytes);
        self.offset += bytes.len() as u64;
        Ok(())
    }

    pub fn layout(&self) -> &ArchiveLayout {
        &self.layout
    }

    pub fn record_count(&self) -> usize {
        self.index.len()
    }

    pub fn push<T: Scalar>(&mut self, data: &Tensor<T>, meta: RecordMeta) -> Result<()> {
        if data.len() != self.layout.element_len() {
            return Err(Error::shape("archive record", data.shape(), &self.layout.element_shape));
        }
        if meta.tags.len() != self.layout.tag_count || meta.values.len() != self.layout.value_count
        {
            return Err(Error::invalid(format!(
                "record carries {} tags / {} values, archive expects {} / {}",
                meta.tags.len(),
                meta.values.len(),
                self.layout.tag_count,
                self.layout.value_count
            )));
        }
        let mut buf = std::mem::take(&mut self.scratch);
        buf.clear();
        match self.layout.dtype {
            DType::F32 => data.data().iter().for_each(|v| (v.as_f64() as f32).write_le(&mut buf)),
            DType::F64 => data.data().iter().for_each(|v| v.as_f64().write_le(&mut buf)),
        }
        let at = self.offset;
        self.emit(&buf)?;
        self.scratch = buf;
        self.index.push((at, meta));
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        let index_offset = self.offset;
        let mut table = Vec::new();
        for (offset, meta) in &self.index {
            table.extend_from_slice(&offset.to_le_bytes());
            for t in &meta.tags {
                table.extend_from_slice(&t.to_le_bytes());
            }
            for v in &meta.values {
                table.extend_from_slice(&v.to_le_bytes());
            }
        }
        table.extend_from_slice(&index_offset.to_le_bytes());
        table.extend_from_slice(&(self.index.len() as u64).to_le_bytes());
        self.emit(&table)?;
        let crc = self.hasher.clone().finalize();
        self.inner.write_all(&crc.to_le_bytes())?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Fully validated, in-memory record archive.
#[derive(Clone, Debug)]
pub struct Archive {
    layout: ArchiveLayout,
    bytes: Vec<u8>,
    records: Vec<(usize, RecordMeta)>,
}

impl Archive {
    pub fn open(path: impl AsRef<Path>, magic: [u8; 4]) -> Result<Self> {
        Archive::from_bytes(std::fs::read(path)?, magic)
    }

    pub fn from_bytes(bytes: Vec<u8>, magic: [u8; 4]) -> Result<Self> {
        check_magic(&bytes, magic)?;
        check_version(&bytes, ARCHIVE_VERSION)?;
        need(&bytes, 13 + FOOTER)?;
        check_crc(&bytes)?;
        let footer = &bytes[bytes.len() - FOOTER..];
        let index_offset = u64::from_le_bytes(footer[..8].try_into().expect("8")) as usize;
        let count = u64::from_le_bytes(footer[8..16].try_into().expect("8")) as usize;

        let dtype = DType::from_tag(bytes[6])
            .ok_or_else(|| Error::Malformed(format!("unknown dtype tag {}", bytes[6])))?;
        let tag_count = bytes[7] as usize;
        let value_count = bytes[8] as usize;
        let header_len = u32::from_le_bytes(bytes[9..13].try_into().expect("4")) as usize;
        let mut pos = 13;
        let header = slice(&bytes, pos, header_len)?.to_vec();
        pos += header_len;
        let rank = slice(&bytes, pos, 1)?[0] as usize;
        pos += 1;
        let dims = slice(&bytes, pos, rank * 4)?;
        let element_shape: Vec<usize> = dims
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4")) as usize)
            .collect();
        pos += rank * 4;
        let layout = ArchiveLayout {
            magic,
            dtype,
            tag_count,
            value_count,
            header,
            element_shape,
        };

        let entry = 8 + 4 * tag_count + 8 * value_count;
        let table_end = bytes.len() - FOOTER;
        if index_offset < pos || index_offset > table_end || (table_end - index_offset) != count * entry {
            return Err(Error::Malformed(format!(
                "index of {count} records does not fit at offset {index_offset}"
            )));
        }
        let element_bytes = layout.element_bytes();
        let mut records = Vec::with_capacity(count);
        for r in 0..count {
            let e = &bytes[index_offset + r * entry..index_offset + (r + 1) * entry];
            let offset = u64::from_le_bytes(e[..8].try_into().expect("8")) as usize;
            if offset < pos || offset + element_bytes > index_offset {
                return Err(Error::Malformed(format!("record {r} points outside the data area")));
            }
            let tags = e[8..8 + 4 * tag_count]
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4")))
                .collect();
            let values = e[8 + 4 * tag_count..]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect();
            records.push((offset, RecordMeta { tags, values }));
        }
        Ok(Archive {
            layout,
            bytes,
            records,
        })
    }

    pub fn layout(&self) -> &ArchiveLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn meta(&self, i: usize) -> &RecordMeta {
        &self.records[i].1
    }

    pub fn metas(&self) -> impl Iterator<Item = &RecordMeta> {
        self.records.iter().map(|r| &r.1)
    }

    /// Record `i` decoded into precision `T`.
    pub fn tensor<T: Scalar>(&self, i: usize) -> Result<Tensor<T>> {
        let (offset, _) = self.records.get(i).ok_or(Error::IndexOutOfRange {
            what: "archive record",
            index: i,
            limit: self.records.len(),
        })?;
        let size = self.layout.dtype.size();
        let raw = &self.bytes[*offset..*offset + self.layout.element_bytes()];
        let data = match self.layout.dtype {
            DType::F32 => raw
                .chunks_exact(size)
                .map(|c| T::of(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw.chunks_exact(size).map(|c| T::of(f64::read_le(c))).collect(),
        };
        Tensor::from_vec(&self.layout.element_shape, data)
    }
}

fn slice(bytes: &[u8], pos: usize, len: usize) -> Result<&[u8]> {
    bytes
        .get(pos..pos + len)
        .ok_or_else(|| Error::Malformed("header overruns the file".into()))
}
