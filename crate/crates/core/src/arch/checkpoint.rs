//! Checkpoint container: magic `MOME`, u16 version, length-prefixed JSON
//! config, u32 parameter count, then per parameter its name, a flag byte
//! (1 = frozen), rank, u32 dims and a little-endian f64 payload.

use std::collections::BTreeMap;
use std::path::Path;

use super::config::MomeConfig;
use super::state::{ModelState, Param};
use crate::error::{MomeError, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MOME";
const VERSION: u16 = 1;

pub fn write_checkpoint(state: &ModelState) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    let json = serde_json::to_string(&state.config).map_err(|e| MomeError::invalid(e.to_string()))?;
    w.string(&json)?;
    w.len_u32(state.params().len())?;
    for (name, p) in state.params() {
        w.string(name)?;
        w.u8(p.frozen as u8);
        w.len_u32(p.tensor.rank())?;
        for &d in p.tensor.shape() {
            w.len_u32(d)?;
        }
        for &v in p.tensor.data() {
            w.f64(v);
        }
    }
    Ok(w.into_inner())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(MomeError::Parse {
            offset: 0,
            message: "not a MOME checkpoint (bad magic)".into(),
        });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let config_at = r.offset();
    let json = r.string("config")?;
    let config: MomeConfig = serde_json::from_str(&json).map_err(|e| MomeError::Parse {
        offset: config_at as u64,
        message: format!("config: {e}"),
    })?;
    let count = r.u32("parameter count")? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let at = r.offset();
        let name = r.string("parameter name")?;
        let frozen = match r.u8("frozen flag")? {
            0 => false,
            1 => true,
            f => return Err(r.error(format!("parameter {name}: bad frozen flag {f}"))),
        };
        let dims = r.dims(&name)?;
        let n = r.payload_len(&dims, 8, &name)?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64(&name)?);
        }
        let tensor = Tensor::new(dims, data)?;
        if params.insert(name.clone(), Param { tensor, frozen }).is_some() {
            return Err(MomeError::Parse {
                offset: at as u64,
                message: format!("duplicate parameter {name}"),
            });
        }
    }
    if !r.is_at_end() {
        return Err(r.error("trailing bytes after last parameter"));
    }
    ModelState::from_params(config, params)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let mut s = ModelState::init(&MomeConfig::tiny()).unwrap();
        s.get_mut("head.b").unwrap().tensor.data_mut()[0] = -0.0;
        s.get_mut("head.b").unwrap().tensor.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let bytes = write_checkpoint(&s).unwrap();
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back.config, s.config);
        for (name, p) in s.params() {
            let q = back.get(name).unwrap();
            assert!(p.tensor.bit_eq(&q.tensor), "{name}");
            assert_eq!(p.frozen, q.frozen);
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let s = ModelState::init(&MomeConfig::tiny()).unwrap();
        let bytes = write_checkpoint(&s).unwrap();
        assert!(matches!(
            read_checkpoint(b"NOPE\x01\x00"),
            Err(MomeError::Parse { offset: 0, .. })
        ));
        let cut = bytes.len() - 3;
        match read_checkpoint(&bytes[..cut]) {
            Err(MomeError::Parse { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("expected parse error, got {other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra).is_err());
    }
}
