//! Named parameter tensors, their binding onto a tape, momentum SGD, and the
//! checkpoint file format.
//!
//! Checkpoint layout (all little-endian):
//!
//! ```text
//! magic b"SLCK"  u32 version  u64 step  u32 config length  config JSON (UTF-8)
//! u32 record count
//! record: u8 kind (0 parameter, 1 momentum), u32 name length, name,
//!         u32 rank, rank x u64 dims, prod(dims) x f64 values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"SLCK";

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Pushes every parameter onto `tape`, as leaves when `trainable` and as
    /// constants otherwise.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    /// Zero-mean Gaussian weight `[fan_in, fan_out]` scaled by
    /// `gain / sqrt(fan_in)` plus a zero bias.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) {
        let normal = Normal::new(0.0, gain / (fan_in as f64).sqrt()).expect("valid normal");
        let w = Tensor::from_fn(&[fan_in, fan_out], |_| T::lit(normal.sample(rng)));
        self.insert(format!("{}.w", prefix), w);
        self.insert(format!("{}.b", prefix), Tensor::zeros(&[fan_out]));
    }

    pub fn init_zero_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{}.w", prefix), Tensor::zeros(&[fan_in, fan_out]));
        self.insert(format!("{}.b", prefix), Tensor::zeros(&[fan_out]));
    }

    pub fn init_layer_norm(&mut self, prefix: &str, width: usize) {
        self.insert(format!("{}.gain", prefix), Tensor::full(&[width], T::one()));
        self.insert(format!("{}.shift", prefix), Tensor::zeros(&[width]));
    }

    pub fn init_vector(&mut self, name: &str, len: usize, scale: f64, rng: &mut ChaCha8Rng) {
        let v = Tensor::from_fn(&[len], |_| T::lit(rng.random_range(-scale..=scale)));
        self.insert(name, v);
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds existing tape handles under the given names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// `x W + b` with `W = prefix.w`, `b = prefix.b`.
    pub fn linear<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = self.get(&format!("{}.w", prefix))?;
        let b = self.get(&format!("{}.b", prefix))?;
        tape.linear(x, w, b)
    }

    pub fn layer_norm<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let g = self.get(&format!("{}.gain", prefix))?;
        let s = self.get(&format!("{}.shift", prefix))?;
        tape.layer_norm(x, g, s)
    }

    /// Two linear maps with a ReLU between them.
    pub fn mlp2<T: Real>(&self, tape: &mut Tape<T>, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(tape, &format!("{}.0", prefix), x)?;
        let h = tape.relu(h);
        self.linear(tape, &format!("{}.1", prefix), h)
    }
}

/// Gradient descent with heavy-ball momentum and global-norm clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub step_size: f64,
    pub momentum: f64,
    pub clip_norm: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(step_size: f64, momentum: f64, clip_norm: f64) -> Self {
        Self {
            step_size,
            momentum,
            clip_norm,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor<T>>) {
        self.velocity = velocity;
    }

    /// Applies one update from accumulated gradients (by parameter name).
    /// Returns the gradient norm before clipping.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let scale = if self.clip_norm > 0.0 && norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        let (mu, lr, scale) = (T::lit(self.momentum), T::lit(self.step_size), T::lit(scale));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv * scale;
                *pv -= lr * *vv;
            }
        }
        Ok(norm)
    }
}

/// Collects gradients of bound parameters by name.
pub fn collect_grads<T: Real>(
    bound: &Bound,
    grads: &Gradients<T>,
    params: &ParamStore<T>,
) -> Result<BTreeMap<String, Tensor<T>>> {
    bound
        .iter()
        .map(|(name, &var)| Ok((name.clone(), grads.get_or_zeros(var, params.get(name)?.shape()))))
        .collect()
}

fn write_tensor<W: Write>(w: &mut W, kind: u8, name: &str, t: &Tensor<impl Real>) -> Result<()> {
    w.write_all(&[kind])?;
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

/// Contents of a checkpoint file.
pub struct Checkpoint<T> {
    pub step: u64,
    /// JSON of the configuration the parameters were trained with.
    pub config_json: String,
    pub params: ParamStore<T>,
    pub momentum: BTreeMap<String, Tensor<T>>,
}

pub fn save_checkpoint<T: Real>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ck.step.to_le_bytes());
    buf.extend_from_slice(&(ck.config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(ck.config_json.as_bytes());
    buf.extend_from_slice(&((ck.params.len() + ck.momentum.len()) as u32).to_le_bytes());
    for (name, t) in ck.params.iter() {
        write_tensor(&mut buf, 0, name, t)?;
    }
    for (name, t) in &ck.momentum {
        write_tensor(&mut buf, 1, name, t)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path)?;
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let mut r = bytes.as_slice();
    let take = |n: usize, r: &mut &[u8]| -> Result<Vec<u8>> {
        if r.len() < n {
            return Err(bad("truncated checkpoint"));
        }
        let mut out = vec![0u8; n];
        r.read_exact(&mut out)?;
        Ok(out)
    };
    let u32_of = |b: Vec<u8>| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let u64_of = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("eight bytes"));
    if take(4, &mut r)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32_of(take(4, &mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(bad("unsupported checkpoint version"));
    }
    let step = u64_of(take(8, &mut r)?);
    let clen = u32_of(take(4, &mut r)?) as usize;
    let config_json = String::from_utf8(take(clen, &mut r)?).map_err(|_| bad("config is not UTF-8"))?;
    let count = u32_of(take(4, &mut r)?);
    let mut params = ParamStore::new();
    let mut momentum = BTreeMap::new();
    for _ in 0..count {
        let kind = take(1, &mut r)?[0];
        let nlen = u32_of(take(4, &mut r)?) as usize;
        let name = String::from_utf8(take(nlen, &mut r)?).map_err(|_| bad("name is not UTF-8"))?;
        let rank = u32_of(take(4, &mut r)?) as usize;
        if rank > 8 {
            return Err(bad("tensor rank too large"));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|_| take(8, &mut r).map(|b| u64_of(b) as usize))
            .collect::<Result<_>>()?;
        let n: usize = shape.iter().product();
        let raw = take(n * 8, &mut r)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("eight bytes"))))
            .collect();
        let t = Tensor::new(shape, data)?;
        match kind {
            0 => params.insert(name, t),
            1 => {
                momentum.insert(name, t);
            }
            _ => return Err(bad("unknown record kind")),
        }
    }
    Ok(Checkpoint {
        step,
        config_json,
        params,
        momentum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamStore::<f32>::new();
        p.init_linear("a", 3, 4, 1.0, &mut rng);
        p.init_layer_norm("ln", 4);
        let mut m = BTreeMap::new();
        m.insert("a.w".to_string(), Tensor::full(&[3, 4], 0.5f32));
        let ck = Checkpoint {
            step: 42,
            config_json: "{}".into(),
            params: p.clone(),
            momentum: m.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.params, p);
        assert_eq!(back.momentum, m);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::vector(vec![3.0, -2.0]));
        let mut opt = Sgd::new(0.1, 0.5, 0.0);
        for _ in 0..100 {
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), p.get("x").unwrap().map(|v| 2.0 * v));
            opt.update(&mut p, &g).unwrap();
        }
        assert!(p.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-6));
    }
}
