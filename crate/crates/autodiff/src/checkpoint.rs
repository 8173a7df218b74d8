//! Parameter checkpoint files.
//!
//! Layout (little-endian): magic `DRCW`, `u32` version, then until end of
//! file a sequence of records `u32 name_len, name bytes, u32 rank,
//! rank × u32 dims, f32 payload`.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DRCW";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(out: &mut W, store: &ParamStore<T>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (_, e) in store.iter() {
        out.write_all(&(e.name.len() as u32).to_le_bytes())?;
        out.write_all(e.name.as_bytes())?;
        out.write_all(&(e.value.rank() as u32).to_le_bytes())?;
        for &d in e.value.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in e.value.data() {
            out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, field: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| truncated(e, field))?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error, field: &'static str) -> AutodiffError {
    if e.kind() == ErrorKind::UnexpectedEof {
        AutodiffError::Format {
            field,
            detail: "file ends inside this field".into(),
        }
    } else {
        AutodiffError::Io(e)
    }
}

/// Reads every record as `(name, tensor)` pairs, in file order.
pub fn read_checkpoint<T: Scalar, R: Read>(input: &mut R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| truncated(e, "magic"))?;
    if &magic != MAGIC {
        return Err(AutodiffError::Format {
            field: "magic",
            detail: format!("expected DRCW, found {magic:?}"),
        });
    }
    let version = read_u32(input, "version")?;
    if version != VERSION {
        return Err(AutodiffError::Format {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let mut out = Vec::new();
    loop {
        let mut len_bytes = [0u8; 4];
        match input.read(&mut len_bytes[..1])? {
            0 => break,
            _ => input
                .read_exact(&mut len_bytes[1..])
                .map_err(|e| truncated(e, "name_len"))?,
        }
        let name_len = u32::from_le_bytes(len_bytes) as usize;
        let mut name = vec![0u8; name_len];
        input
            .read_exact(&mut name)
            .map_err(|e| truncated(e, "name"))?;
        let name = String::from_utf8(name).map_err(|_| AutodiffError::Format {
            field: "name",
            detail: "not valid UTF-8".into(),
        })?;
        let rank = read_u32(input, "rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(AutodiffError::Format {
                field: "rank",
                detail: format!("rank {rank} for `{name}`"),
            });
        }
        let dims = (0..rank)
            .map(|_| read_u32(input, "dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let mut payload = vec![0u8; len * 4];
        input
            .read_exact(&mut payload)
            .map_err(|e| truncated(e, "payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| AutodiffError::Format {
            field: "dims",
            detail: e.to_string(),
        })?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "conv.weight",
            Tensor::new(vec![2, 1, 1, 3], vec![0.5, -1.0, 2.0, 3.25, 0.0, -7.5]).unwrap(),
            true,
        )
        .unwrap();
        s.add("bn.running_var", Tensor::full(&[2], 1.0), false)
            .unwrap();
        s
    }

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let store = sample_store();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &store).unwrap();
        assert_eq!(&buf[..4], b"DRCW");
        let back: Vec<(String, Tensor<f32>)> = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, store.named());
    }

    #[test]
    fn truncated_payload_names_the_field() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &sample_store()).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_checkpoint::<f32, _>(&mut buf.as_slice()).unwrap_err();
        assert!(
            matches!(
                err,
                AutodiffError::Format {
                    field: "payload",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn bad_magic() {
        let err = read_checkpoint::<f32, _>(&mut &b"NOPE\x01\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, AutodiffError::Format { field: "magic", .. }));
    }
}
