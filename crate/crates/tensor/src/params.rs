//! Named parameters with their optimizer and spectral-norm state.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{invalid, Result, TensorError};
use crate::init::orthogonal_init;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gradients keyed by parameter path.
pub type ParamGrads = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Adam first moment.
    pub m: Tensor,
    /// Adam second moment.
    pub v: Tensor,
    pub step: u64,
    /// Left singular vector estimate; present iff the weight is spectrally normalized.
    pub sn_u: Option<Vec<f64>>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Self {
            value,
            m,
            v,
            step: 0,
            sn_u: None,
        }
    }
}

/// Parameters and non-trainable buffers, both in path order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, param: Param) -> Result<()> {
        let path = path.into();
        if path.contains('#') {
            return Err(invalid("param", format!("`#` is reserved in paths: {path}")));
        }
        if self.params.contains_key(&path) {
            return Err(invalid("param", format!("duplicate parameter path {path}")));
        }
        self.params.insert(path, param);
        Ok(())
    }

    /// Orthogonally initialized weight, optionally carrying spectral-norm state.
    pub fn add_weight(&mut self, path: impl Into<String>, shape: &[usize], spectral: bool, rng: &mut Rng) -> Result<()> {
        let value = orthogonal_init(shape, rng);
        let mut p = Param::new(value);
        if spectral {
            let (rows, _) = p.value.matrix_dims();
            let mut u = rng.normals(rows);
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            u.iter_mut().for_each(|x| *x /= norm);
            p.sn_u = Some(u);
        }
        self.insert(path, p)
    }

    pub fn add_bias(&mut self, path: impl Into<String>, len: usize) -> Result<()> {
        self.insert(path, Param::new(Tensor::zeros(&[len])))
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.params.get(path).ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.params.get_mut(path).ok_or_else(|| TensorError::UnknownParam(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn value(&self, path: &str) -> Result<&Tensor> {
        Ok(&self.get(path)?.value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn remove_buffer(&mut self, name: &str) -> Option<Tensor> {
        self.buffers.remove(name)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Drops every buffer whose name starts with `prefix`.
    pub fn clear_buffers(&mut self, prefix: &str) {
        self.buffers.retain(|k, _| !k.starts_with(prefix));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction. Parameters absent from `grads`
/// are updated with a zero gradient.
pub fn adam_step(store: &mut ParamStore, grads: &ParamGrads, cfg: &AdamConfig) -> Result<()> {
    for path in grads.keys() {
        store.get(path)?;
    }
    for (path, p) in store.iter_mut() {
        if let Some(g) = grads.get(path) {
            if g.shape() != p.value.shape() {
                return Err(invalid("adam_step", format!("gradient shape mismatch for {path}")));
            }
        }
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let g = grads.get(path).map(|g| g.data());
        let n = p.value.numel();
        let (value, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
        for i in 0..n {
            let gi = g.map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            value[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `shadow ← decay·shadow + (1 − decay)·live` for every parameter. Spectral
/// norm vectors are copied from `live`.
pub fn ema_update(shadow: &mut ParamStore, live: &ParamStore, decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(invalid("ema_update", format!("decay {decay} outside [0, 1]")));
    }
    if shadow.len() != live.len() {
        return Err(TensorError::PathMismatch(format!(
            "{} shadow vs {} live parameters",
            shadow.len(),
            live.len()
        )));
    }
    for ((sp, s), (lp, l)) in shadow.params.iter_mut().zip(live.params.iter()) {
        if sp != lp || s.value.shape() != l.value.shape() {
            return Err(TensorError::PathMismatch(format!("{sp} vs {lp}")));
        }
        for (a, b) in s.value.data_mut().iter_mut().zip(l.value.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
        s.sn_u.clone_from(&l.sn_u);
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"GTTS";
const VERSION: u32 = 1;

struct Record {
    path: String,
    tensor: Tensor,
}

fn write_record(w: &mut impl Write, path: &str, tensor: &Tensor) -> Result<()> {
    w.write_all(&(path.len() as u32).to_le_bytes())?;
    w.write_all(path.as_bytes())?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_record(r: &mut impl Read) -> Result<Record> {
    let len = read_u32(r)? as usize;
    let mut path = vec![0u8; len];
    r.read_exact(&mut path)?;
    let path = String::from_utf8(path).map_err(|e| TensorError::Format(e.to_string()))?;
    let rank = read_u32(r)? as usize;
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let tensor = Tensor::new(&shape, data).map_err(|e| TensorError::Format(format!("{path}: {e}")))?;
    Ok(Record { path, tensor })
}

impl ParamStore {
    /// Serializes values, then Adam moments and step counters, spectral-norm
    /// vectors and buffers, all as `(path, rank, extents, f64 payload)` records.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut records: Vec<(String, Tensor)> = Vec::new();
        for (path, p) in &self.params {
            records.push((path.clone(), p.value.clone()));
        }
        for (path, p) in &self.params {
            records.push((format!("{path}#adam.m"), p.m.clone()));
            records.push((format!("{path}#adam.v"), p.v.clone()));
            records.push((format!("{path}#adam.step"), Tensor::scalar(p.step as f64)));
            if let Some(u) = &p.sn_u {
                records.push((format!("{path}#sn.u"), Tensor::from_vec(u.clone())));
            }
        }
        for (name, t) in &self.buffers {
            records.push((format!("{name}#buffer"), t.clone()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(records.len() as u32).to_le_bytes())?;
        for (path, t) in &records {
            write_record(w, path, t)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(TensorError::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let Record { path, tensor } = read_record(r)?;
            match path.split_once('#') {
                None => store.insert(path, Param::new(tensor))?,
                Some((name, "buffer")) => store.set_buffer(name, tensor),
                Some((name, kind)) => {
                    let p = store
                        .params
                        .get_mut(name)
                        .ok_or_else(|| TensorError::Format(format!("state for unknown parameter {name}")))?;
                    match kind {
                        "adam.m" => p.m = tensor,
                        "adam.v" => p.v = tensor,
                        "adam.step" => p.step = tensor.item() as u64,
                        "sn.u" => p.sn_u = Some(tensor.into_data()),
                        other => return Err(TensorError::Format(format!("unknown record kind {other}"))),
                    }
                }
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}
