//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CASGNN01"            8 bytes magic
//! u32 version           = 1
//! u32 count             parameter tensors, then per tensor:
//!   u16 name length, UTF-8 name, u8 rank (= 4), 4 x u32 extents, f32 data
//! u32 count             optimizer tensors, same encoding
//!                       (`adam.m.<param>` and `adam.v.<param>`)
//! u64 step
//! u32 length, UTF-8     configuration echo, one `key=value` per line
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Adam, AdamConfig, ParamStore, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"CASGNN01";
pub const VERSION: u32 = 1;

/// Adam first and second moments, one vector per parameter.
pub type Moments = (Vec<Vec<f32>>, Vec<Vec<f32>>);

/// A trained model together with its optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamConfig,
    /// First and second moments per parameter, in parameter order. Empty
    /// when no optimizer state was saved.
    pub moments: Option<Moments>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, params: ParamStore<f32>, optimizer: Option<&Adam<f32>>) -> Self {
        let (adam, moments, step) = match optimizer {
            Some(o) => {
                let (m, v) = o.moments();
                (o.config, Some((m.to_vec(), v.to_vec())), o.step_count())
            }
            None => (AdamConfig::default(), None, 0),
        };
        Self {
            model,
            params,
            adam,
            moments,
            step,
        }
    }

    /// Rebuilds the model structure for the stored parameters.
    pub fn build_model(&self) -> Result<Model> {
        let mut fresh = ParamStore::<f32>::new();
        let model = Model::new(self.model.clone(), &mut fresh)?;
        if fresh.signature() != self.params.signature() {
            return Err(Error::Config(
                "checkpoint parameters do not match the model they describe".into(),
            ));
        }
        Ok(model)
    }

    pub fn optimizer(&self) -> Result<Option<Adam<f32>>> {
        self.moments
            .as_ref()
            .map(|(m, v)| Adam::from_state(self.adam, &self.params, self.step, m.clone(), v.clone()))
            .transpose()
    }

    fn echo(&self) -> String {
        let mut pairs = self.model.to_pairs();
        let a = &self.adam;
        pairs.extend([
            ("adam.lr".to_string(), a.lr.to_string()),
            ("adam.beta1".to_string(), a.beta1.to_string()),
            ("adam.beta2".to_string(), a.beta2.to_string()),
            ("adam.eps".to_string(), a.eps.to_string()),
            ("adam.weight_decay".to_string(), a.weight_decay.to_string()),
        ]);
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            put_tensor(&mut out, name, t.shape(), t.data());
        }
        match &self.moments {
            Some((m, v)) => {
                out.extend_from_slice(&(2 * self.params.len() as u32).to_le_bytes());
                for (kind, moments) in [("m", m), ("v", v)] {
                    for ((_, name, t), data) in self.params.iter().zip(moments) {
                        put_tensor(&mut out, &format!("adam.{kind}.{name}"), t.shape(), data);
                    }
                }
            }
            None => out.extend_from_slice(&0u32.to_le_bytes()),
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        let echo = self.echo();
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(path, 0, "bad magic"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(
                path,
                8,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let params = r.tensors()?;
        let optimizer = r.tensors()?;
        let step = r.u64("step")?;
        let echo_len = r.u32("config length")? as usize;
        let echo_at = r.pos;
        let echo = std::str::from_utf8(r.take(echo_len, "config")?)
            .map_err(|_| Error::format(path, echo_at as u64, "config echo is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, "trailing bytes after config echo"));
        }

        let mut model = ModelConfig::default();
        let mut adam = AdamConfig::default();
        for line in echo.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, echo_at as u64, format!("bad config line `{line}`")))?;
            let known = model
                .set(k, v)
                .and_then(|hit| Ok(hit || set_adam(&mut adam, k, v)?))
                .map_err(|e| Error::format(path, echo_at as u64, e.to_string()))?;
            if !known {
                return Err(Error::format(path, echo_at as u64, format!("unknown config key `{k}`")));
            }
        }

        let mut store = ParamStore::new();
        for (name, t) in params {
            store.insert(name, t)?;
        }
        let moments = if optimizer.is_empty() {
            None
        } else {
            let n = store.len();
            if optimizer.len() != 2 * n {
                return Err(Error::format(
                    path,
                    0,
                    format!("expected {} optimizer tensors, found {}", 2 * n, optimizer.len()),
                ));
            }
            let names: Vec<String> = store.iter().map(|(_, name, _)| name.to_owned()).collect();
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for (i, (name, t)) in optimizer.into_iter().enumerate() {
                let (kind, target) = if i < n { ("m", &mut m) } else { ("v", &mut v) };
                let pname = &names[i % n];
                if name != format!("adam.{kind}.{pname}") {
                    return Err(Error::format(path, 0, format!("unexpected optimizer tensor `{name}`")));
                }
                target.push(t.into_data());
            }
            Some((m, v))
        };
        let ckpt = Self {
            model,
            params: store,
            adam,
            moments,
            step,
        };
        ckpt.build_model().map_err(|e| Error::format(path, 0, e.to_string()))?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn set_adam(a: &mut AdamConfig, key: &str, value: &str) -> Result<bool> {
    let v = || crate::model::parse_num::<f64>(key, value);
    match key {
        "adam.lr" => a.lr = v()?,
        "adam.beta1" => a.beta1 = v()?,
        "adam.beta2" => a.beta2 = v()?,
        "adam.eps" => a.eps = v()?,
        "adam.weight_decay" => a.weight_decay = v()?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: Shape, data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(4);
    for d in shape.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!(
                    "truncated: {what} needs {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let at = self.pos;
        let len = u16::from_le_bytes(self.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::format(self.path, at as u64, "tensor name is not UTF-8"))?
            .to_owned();
        let rank_at = self.pos;
        let rank = self.take(1, "rank")?[0];
        if rank != 4 {
            return Err(Error::format(
                self.path,
                rank_at as u64,
                format!("tensor `{name}` has rank {rank}, expected 4"),
            ));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32("extent")? as usize;
        }
        let shape = Shape::from_dims(dims);
        let data_at = self.pos;
        let raw = self.take(shape.numel() * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(shape, data)
            .map_err(|e| Error::format(self.path, data_at as u64, format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor<f32>)>> {
        let n = self.u32("tensor count")?;
        (0..n).map(|_| self.tensor()).collect()
    }
}
