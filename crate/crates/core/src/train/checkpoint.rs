use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::network::AsaNet;
use crate::nn::Module;
use crate::tensor::{Element, Tensor};

const MAGIC: &[u8; 4] = b"ASAN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Trained parameters plus the run state needed to rebuild the model.
///
/// The binary file holds the parameters; the configuration travels in a
/// TOML sidecar next to it (`<file>.toml`).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub best_miou: f64,
    pub tensors: Vec<NamedTensor>,
    pub config: TrainConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".toml");
    path.with_file_name(name)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

impl Checkpoint {
    pub fn from_model<T: Element>(model: &AsaNet<T>, iteration: u64, best_miou: f64, config: &TrainConfig) -> Self {
        let mut tensors = Vec::new();
        model.visit_params("", &mut |name, t| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
        });
        Checkpoint {
            iteration,
            best_miou,
            tensors,
            config: config.clone(),
        }
    }

    /// Builds the network described by the config and loads the parameters.
    pub fn to_model<T: Element>(&self) -> Result<AsaNet<T>> {
        let mut model = AsaNet::new(&self.config.net, self.config.seed)?;
        let params: HashMap<String, Tensor<T>> = self
            .tensors
            .iter()
            .map(|t| {
                let data = t.data.iter().map(|&v| T::cast_from(f64::from(v))).collect();
                Tensor::from_vec(&t.shape, data).map(|x| (t.name.clone(), x))
            })
            .collect::<Result<_>>()?;
        model.load_params(&params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.iteration.to_le_bytes());
        buf.extend_from_slice(&self.best_miou.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Registry("too many tensors".into()))?;
        buf.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::Registry(format!("parameter name `{}` is too long", t.name)))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Registry(format!("parameter `{}` has too many axes", t.name)))?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Registry(format!("parameter `{}` disagrees with its shape", t.name)));
            }
            buf.extend_from_slice(&name_len.to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::Registry(format!("axis of `{}` too long", t.name)))?;
                buf.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    /// Parses the binary part; `path` is only used for error messages.
    pub fn from_bytes(buf: &[u8], config: TrainConfig, path: &Path) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "missing ASAN header"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let iteration = u64::from_le_bytes(r.array()?);
        let best_miou = f64::from_le_bytes(r.array()?);
        let count = u32::from_le_bytes(r.array()?);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?;
            let rank = r.array::<1>()?[0] as usize;
            let shape = (0..rank)
                .map(|_| Ok(u32::from_le_bytes(r.array()?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::format(path, format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            iteration,
            best_miou,
            tensors,
            config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        fs::write(&side, self.config.to_toml()).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config = TrainConfig::from_toml(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, config, path)
    }
}
