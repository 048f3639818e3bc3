//! Binary checkpoint blobs: a version string, a JSON config echo, and named
//! f64 parameter arrays. Both the gaze estimator and the grounding model
//! serialize through this format under their own version tags.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

pub const GAZE_VERSION: &str = "gazenlq-gaze-v1";
pub const GROUND_VERSION: &str = "gazenlq-ground-v1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: String,
    pub config_json: String,
    pub params: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        write_str(&mut w, &self.version)?;
        write_str(&mut w, &self.config_json)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, data) in &self.params {
            write_str(&mut w, name)?;
            w.write_u32::<LittleEndian>(data.ndim() as u32)?;
            for d in data.shape() {
                w.write_u32::<LittleEndian>(*d as u32)?;
            }
            for v in data.iter() {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, expected_version: &str) -> Result<Self> {
        let version = read_str(&mut r)?;
        if version != expected_version {
            return Err(Error::VersionMismatch {
                expected: expected_version.to_string(),
                found: version,
            });
        }
        let config_json = read_str(&mut r)?;
        let n = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::CorruptFile("truncated checkpoint".into()))? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let name = read_str(&mut r)?;
            let ndim = r
                .read_u32::<LittleEndian>()
                .map_err(|_| Error::CorruptFile("truncated parameter header".into()))?
                as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>().map_err(|_| {
                    Error::CorruptFile("truncated parameter shape".into())
                })? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.read_f64::<LittleEndian>().map_err(|_| {
                    Error::CorruptFile(format!("truncated parameter data for {name}"))
                })?);
            }
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| Error::CorruptFile(format!("bad parameter shape: {e}")))?;
            params.push((name, arr));
        }
        Ok(Checkpoint { version, config_json, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path, expected_version: &str) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes[..], expected_version)
    }
}

/// Hex SHA-256 of a checkpoint file, recorded by the grounding checkpoint
/// to pin the gaze weights it was trained against.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r
        .read_u32::<LittleEndian>()
        .map_err(|_| Error::CorruptFile("truncated string length".into()))? as usize;
    if len > 1 << 30 {
        return Err(Error::CorruptFile(format!("implausible string length {len}")));
    }
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::CorruptFile("truncated string".into()))?;
    String::from_utf8(bytes).map_err(|_| Error::CorruptFile("string is not UTF-8".into()))
}
