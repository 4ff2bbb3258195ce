//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "LCCKPT\0\0"
//! version u32      CONTAINER_VERSION
//! hlen    u64      length of the JSON header
//! header  hlen     UTF-8 JSON: metadata plus a tensor index
//! blobs            f32 values, concatenated in index order
//! ```
//!
//! Tensors are stored as raw f32 bits, so a save/load round trip is exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, PARAMETERS_VERSION};

pub const MAGIC: &[u8; 8] = b"LCCKPT\0\0";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    parameters_version: u32,
    fingerprint: String,
    generator: GeneratorConfig,
    #[serde(default)]
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Generator config and weights plus optional named auxiliary tensors (the
/// optimizer state) and free-form metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub generator: GeneratorConfig,
    pub fingerprint: String,
    pub parameters: BTreeMap<String, Tensor>,
    pub auxiliary: BTreeMap<String, Tensor>,
    pub extra: serde_json::Value,
}

const PARAM_PREFIX: &str = "param/";
const AUX_PREFIX: &str = "aux/";

impl Checkpoint {
    pub fn from_generator(g: &Generator) -> Result<Self> {
        Ok(Self {
            generator: g.config().clone(),
            fingerprint: g.parameters().fingerprint().to_string(),
            parameters: g.parameters().tensors()?,
            auxiliary: BTreeMap::new(),
            extra: serde_json::Value::Null,
        })
    }

    /// Rebuilds the generator; fails if the stored weights do not belong to
    /// the stored config.
    pub fn to_generator(&self) -> Result<Generator> {
        Generator::with_parameters(self.generator.clone(), &self.fingerprint, &self.parameters)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0;
        let named = self
            .parameters
            .iter()
            .map(|(k, v)| (format!("{PARAM_PREFIX}{k}"), v))
            .chain(self.auxiliary.iter().map(|(k, v)| (format!("{AUX_PREFIX}{k}"), v)));
        for (name, t) in named {
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for v in &values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name,
                shape: t.dims().to_vec(),
                offset,
            });
            offset += values.len();
        }
        let header = Header {
            parameters_version: PARAMETERS_VERSION,
            fingerprint: self.fingerprint.clone(),
            generator: self.generator.clone(),
            extra: self.extra.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;

        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never clobbers a good file
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut write = |bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(&tmp, e));
        write(MAGIC)?;
        write(&CONTAINER_VERSION.to_le_bytes())?;
        write(&(header.len() as u64).to_le_bytes())?;
        write(&header)?;
        write(&blob)?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(bad(&format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
        if header.parameters_version != PARAMETERS_VERSION {
            return Err(bad(&format!(
                "unsupported parameter version {}",
                header.parameters_version
            )));
        }
        let blob = &bytes[header_end..];
        let dev = Device::Cpu;
        let mut parameters = BTreeMap::new();
        let mut auxiliary = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset * 4;
            let end = start + n * 4;
            if end > blob.len() {
                return Err(bad(&format!("tensor {} runs past end of file", e.name)));
            }
            let values: Vec<f32> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(values, e.shape.as_slice(), &dev)?;
            if let Some(name) = e.name.strip_prefix(PARAM_PREFIX) {
                parameters.insert(name.to_string(), t);
            } else if let Some(name) = e.name.strip_prefix(AUX_PREFIX) {
                auxiliary.insert(name.to_string(), t);
            } else {
                return Err(bad(&format!("unexpected tensor {}", e.name)));
            }
        }
        Ok(Self {
            generator: header.generator,
            fingerprint: header.fingerprint,
            parameters,
            auxiliary,
            extra: header.extra,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ProviderSpec;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            encoder_widths: [8, 8, 16, 16],
            sketch_widths: [4, 4, 8, 8, 8, 8],
            ru_blocks: 1,
            cardinality: 4,
            pretrained_provider: ProviderSpec::Null,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn rejects_garbage_and_wrong_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        fs::write(&p, b"hello world, definitely not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Checkpoint(_))));

        let g = Generator::new(tiny()).unwrap();
        let mut ck = Checkpoint::from_generator(&g).unwrap();
        ck.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert!(loaded.to_generator().is_ok());

        ck.fingerprint = "0000".into();
        assert!(matches!(ck.to_generator(), Err(Error::Checkpoint(_))));
        let mut ck = loaded.clone();
        ck.generator.ru_blocks = 2;
        assert!(matches!(ck.to_generator(), Err(Error::Checkpoint(_))));
    }
}
