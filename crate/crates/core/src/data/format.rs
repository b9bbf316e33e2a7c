//! MDS1 dataset container: magic, u16 version, u32 record count, then per
//! record id, label byte, tags, and volumes as f32 little-endian payloads.

use std::collections::BTreeMap;
use std::path::Path;

use super::StudyRecord;
use crate::error::{MomeError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MDS1";
const VERSION: u16 = 1;

pub fn write_dataset(records: &[StudyRecord]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.len_u32(records.len())?;
    for r in records {
        w.string(&r.id)?;
        w.u8(r.label);
        w.len_u32(r.tags.len())?;
        for (k, v) in &r.tags {
            w.string(k)?;
            w.string(v)?;
        }
        w.len_u32(r.volumes.len())?;
        for (name, t) in &r.volumes {
            w.string(name)?;
            w.len_u32(t.rank())?;
            for &d in t.shape() {
                w.len_u32(d)?;
            }
            for &v in t.data() {
                let f = v as f32;
                if f64::from(f).to_bits() != v.to_bits() && !(v.is_nan() && f.is_nan()) {
                    return Err(MomeError::invalid(format!(
                        "study {}: {name} value {v} is not representable as f32",
                        r.id
                    )));
                }
                w.f32(f);
            }
        }
    }
    Ok(w.into_inner())
}

pub fn read_dataset(bytes: &[u8]) -> Result<Vec<StudyRecord>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(MomeError::Parse {
            offset: 0,
            message: "not an MDS1 dataset (bad magic)".into(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported dataset version {version}")));
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.string("study id")?;
        let label = r.u8("label")?;
        if label > 1 {
            return Err(r.error(format!("study {id}: label {label} is not 0 or 1")));
        }
        let n_tags = r.u32("tag count")? as usize;
        let mut tags = BTreeMap::new();
        for _ in 0..n_tags {
            let k = r.string("tag key")?;
            let v = r.string("tag value")?;
            tags.insert(k, v);
        }
        let n_vol = r.u32("modality count")? as usize;
        let mut volumes = Vec::with_capacity(n_vol.min(16));
        for _ in 0..n_vol {
            let name = r.string("modality name")?;
            let dims = r.dims(&name)?;
            let n = r.payload_len(&dims, 4, &name)?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from(r.f32(&name)?));
            }
            volumes.push((name, Tensor::new(dims, data)?));
        }
        records.push(StudyRecord {
            id,
            label,
            tags,
            volumes,
        });
    }
    if !r.is_at_end() {
        return Err(r.error("trailing bytes after last record"));
    }
    Ok(records)
}

pub fn save_dataset(records: &[StudyRecord], path: &Path) -> Result<()> {
    std::fs::write(path, write_dataset(records)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<StudyRecord>> {
    read_dataset(&std::fs::read(path)?)
}
