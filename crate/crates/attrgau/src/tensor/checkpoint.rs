//! Parameter checkpoint file: a versioned header followed by each named
//! parameter's name, shape, and raw little-endian doubles. Round-trips are
//! byte-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AGAUPRM\0";
const VERSION: u32 = 1;

pub fn write_params<W: Write>(w: &mut W, params: &[(&str, &Tensor)]) -> Result<()> {
    binio::write_header(w, MAGIC, VERSION)?;
    binio::write_u32(w, params.len() as u32)?;
    for (name, tensor) in params {
        binio::write_str(w, name)?;
        binio::write_u32(w, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            binio::write_u64(w, d as u64)?;
        }
        binio::write_f64_slice(w, tensor.values())?;
    }
    Ok(())
}

pub fn read_params<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    binio::expect_header(r, MAGIC, VERSION)?;
    let count = binio::read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = binio::read_str(r)?;
        let ndim = binio::read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(binio::read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = binio::read_f64_vec(r, numel)?;
        let tensor = Tensor::new(shape, values)
            .map_err(|e| Error::Format(format!("checkpoint tensor {name}: {e}")))?;
        out.push((name, tensor));
    }
    Ok(out)
}

pub fn save<P: AsRef<Path>>(path: P, params: &[(&str, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load<P: AsRef<Path>>(path: P) -> Result<Vec<(String, Tensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    read_params(&mut r)
}

/// Serialize to an in-memory buffer; used for byte-exact comparisons.
pub fn to_bytes(params: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_params(&mut buf, params)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_byte_exact() {
        let mut rng = Rng::new(5);
        let a = Tensor::uniform(3, 4, 1.0, &mut rng);
        let b = Tensor::uniform(1, 7, 0.3, &mut rng);
        let params = vec![("embedding", &a), ("bias", &b)];

        let bytes = to_bytes(&params).unwrap();
        let loaded = read_params(&mut bytes.as_slice()).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "embedding");
        assert_eq!(loaded[0].1.values(), a.values());
        assert_eq!(loaded[1].1.shape(), &[1, 7]);

        let reencoded = to_bytes(
            &loaded
                .iter()
                .map(|(n, t)| (n.as_str(), t))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        assert_eq!(bytes, reencoded);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = to_bytes(&[]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            read_params(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn rejects_unknown_version() {
        let mut bytes = to_bytes(&[]).unwrap();
        bytes[8] = 99;
        assert!(matches!(
            read_params(&mut bytes.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
