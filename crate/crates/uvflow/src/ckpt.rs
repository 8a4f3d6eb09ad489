//! Self-describing checkpoint container: magic, format version, a raw JSON
//! metadata block, and a named-tensor table (name, dtype, shape, row-major
//! little-endian data). Loading then saving reproduces the file byte for byte;
//! the metadata block is kept as the exact bytes it was read with.

use crate::error::{Result, UvError};
use crate::nn::ParamStore;
use crate::tensor::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC_LANDMARKS: &[u8; 6] = b"UVLMK\0";
pub const MAGIC_DIT: &[u8; 6] = b"UVDIT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn dtype_tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub magic: [u8; 6],
    pub version: u32,
    /// Raw JSON metadata, written back verbatim on save.
    pub meta: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(magic: &[u8; 6], meta: String) -> Self {
        Checkpoint { magic: *magic, version: FORMAT_VERSION, meta, tensors: Vec::new() }
    }

    pub fn meta_value(&self) -> Result<serde_json::Value> {
        serde_json::from_str(&self.meta)
            .map_err(|e| UvError::Runtime(format!("checkpoint metadata is not valid JSON: {e}")))
    }

    pub fn find(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: TensorData::F32(data),
        });
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: TensorData::F64(data),
        });
    }

    /// Adds every parameter of `ps` as an f32 tensor (f64 stores are downcast;
    /// training runs f32 so this is the native width).
    pub fn push_params<S: Scalar>(&mut self, ps: &ParamStore<S>) {
        for (name, value) in ps.iter() {
            let data: Vec<f32> = value.iter().map(|&v| v.to_f64() as f32).collect();
            self.push_f32(name, value.shape(), data);
        }
    }

    /// Copies tensors into an already-constructed store; every parameter must
    /// be present with the exact registered shape.
    pub fn load_params<S: Scalar>(&self, ps: &mut ParamStore<S>) -> Result<()> {
        for id in 0..ps.len() {
            let name = ps.name(id).to_string();
            let t = self.find(&name).ok_or_else(|| {
                UvError::Runtime(format!("checkpoint is missing tensor {name}"))
            })?;
            let expected: Vec<usize> = ps.value(id).shape().to_vec();
            if t.shape != expected {
                return Err(UvError::ShapeMismatch {
                    name,
                    expected,
                    found: t.shape.clone(),
                });
            }
            let arr: ArrayD<S> = match &t.data {
                TensorData::F32(v) => ArrayD::from_shape_vec(
                    IxDyn(&t.shape),
                    v.iter().map(|&x| S::from_f64(x as f64)).collect(),
                )
                .unwrap(),
                TensorData::F64(v) => ArrayD::from_shape_vec(
                    IxDyn(&t.shape),
                    v.iter().map(|&x| S::from_f64(x)).collect(),
                )
                .unwrap(),
            };
            ps.set_value(id, arr);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        let meta = self.meta.as_bytes();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.data.dtype_tag());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => {
                    for &x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F64(v) => {
                    for &x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| UvError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| UvError::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| UvError::io(&tmp, e))?;
            f.sync_all().ok();
        }
        std::fs::rename(&tmp, path).map_err(|e| UvError::io(path, e))?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], path: &Path, expect_magic: &[u8; 6]) -> Result<Self> {
        let err = |why: &str| UvError::Checkpoint { path: path.to_path_buf(), why: why.to_string() };
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(err("truncated file"));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic: [u8; 6] = take(&mut pos, 6)?.try_into().unwrap();
        if &magic != expect_magic {
            return Err(UvError::Checkpoint {
                path: path.to_path_buf(),
                why: format!("bad magic {:?}, expected {:?}", magic, expect_magic),
            });
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(UvError::Checkpoint {
                path: path.to_path_buf(),
                why: format!("unsupported format version {version}"),
            });
        }
        let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let meta = String::from_utf8(take(&mut pos, meta_len)?.to_vec())
            .map_err(|_| err("metadata is not utf-8"))?;
        let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| err("tensor name is not utf-8"))?;
            let dtype = take(&mut pos, 1)?[0];
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype {
                0 => {
                    let raw = take(&mut pos, n * 4)?;
                    TensorData::F32(
                        raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                }
                1 => {
                    let raw = take(&mut pos, n * 8)?;
                    TensorData::F64(
                        raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                    )
                }
                other => {
                    return Err(UvError::Checkpoint {
                        path: path.to_path_buf(),
                        why: format!("unknown dtype tag {other} for tensor {name}"),
                    })
                }
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        if pos != bytes.len() {
            return Err(err("trailing bytes after tensor table"));
        }
        Ok(Checkpoint { magic, version, meta, tensors })
    }

    pub fn load(path: &Path, expect_magic: &[u8; 6]) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| UvError::io(path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| UvError::io(path, e))?;
        Self::from_bytes(&bytes, path, expect_magic)
    }
}
