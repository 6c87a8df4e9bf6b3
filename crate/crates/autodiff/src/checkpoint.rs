//! Parameter checkpoints: a text manifest followed by raw little-endian
//! `f64` payloads in manifest order.
//!
//! ```text
//! VXCKPT1
//! dtype f64
//! meta <key> <value to end of line>
//! param <name> <dims joined by 'x', or 'scalar'>
//! end
//! <payload>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "VXCKPT1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            meta: Vec::new(),
            params,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut header = format!("{MAGIC}\ndtype f64\n");
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(TensorError::Checkpoint(format!("invalid meta entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, t) in self.params.iter() {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(TensorError::Checkpoint(format!("invalid parameter name {name:?}")));
            }
            let dims = if t.rank() == 0 {
                "scalar".to_string()
            } else {
                t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
            };
            header.push_str(&format!("param {name} {dims}\n"));
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for (_, t) in self.params.iter() {
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<_>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(TensorError::Checkpoint("unexpected end of manifest".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(TensorError::Checkpoint("bad magic".into()));
        }
        let dtype = next_line(&mut r)?;
        if dtype != "dtype f64" {
            return Err(TensorError::Checkpoint(format!("unsupported {dtype:?}")));
        }
        let mut meta = Vec::new();
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            if let Some(rest) = l.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = l.strip_prefix("param ") {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| TensorError::Checkpoint(format!("bad param line {l:?}")))?;
                let shape = if dims == "scalar" {
                    Vec::new()
                } else {
                    dims.split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| TensorError::Checkpoint(format!("bad shape {dims:?}")))?
                };
                specs.push((name.to_string(), shape));
            } else {
                return Err(TensorError::Checkpoint(format!("unknown manifest line {l:?}")));
            }
        }
        let mut params = ParamStore::new();
        for (name, shape) in specs {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)
                .map_err(|_| TensorError::Checkpoint("payload size mismatch".into()))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::new(&shape, data)?);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(TensorError::Checkpoint("payload size mismatch".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
