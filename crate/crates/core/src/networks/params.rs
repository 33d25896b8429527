use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }

    /// Places every tensor on the tape, as trainable inputs or constants.
    pub fn bind<U: Real>(&self, g: &mut Graph<U>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                let t = t.cast::<U>();
                if trainable {
                    g.input(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

pub(crate) fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: [usize; 4], fan_in: usize, gain: f64) -> Tensor<f32> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()).expect("init shape")
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Named tensors from several sets, prefixed as `<prefix>.<name>`.
pub fn save_tensors(path: &Path, groups: &[(&str, &ParamSet<f32>)], metadata: HashMap<String, String>) -> Result<()> {
    let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (prefix, set) in groups {
        for (name, t) in set.names.iter().zip(&set.tensors) {
            owned.push((format!("{prefix}.{name}"), t.shape().to_vec(), f32_bytes(t.data())));
        }
    }
    let views = owned
        .iter()
        .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(st_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(metadata)).map_err(st_err)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Data(format!("safetensors: {e}"))
}

/// Loads tensors into existing sets, checking names and shapes. Returns
/// the file metadata.
pub fn load_tensors(path: &Path, groups: &mut [(&str, &mut ParamSet<f32>)]) -> Result<HashMap<String, String>> {
    let bytes = std::fs::read(path)?;
    let st = SafeTensors::deserialize(&bytes).map_err(st_err)?;
    for (prefix, set) in groups.iter_mut() {
        for (name, t) in set.names.iter().zip(set.tensors.iter_mut()) {
            let key = format!("{prefix}.{name}");
            let view = st.tensor(&key).map_err(|_| Error::Data(format!("checkpoint lacks tensor {key}")))?;
            if view.dtype() != Dtype::F32 || view.shape() != t.shape() {
                return Err(Error::Data(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    view.shape(),
                    t.shape()
                )));
            }
            for (dst, chunk) in t.data_mut().iter_mut().zip(view.data().chunks_exact(4)) {
                *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
    }
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(st_err)?;
    Ok(meta.metadata().clone().unwrap_or_default())
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ParamSet<f32>,
    v: ParamSet<f32>,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>, lr: f64) -> Self {
        let zeros = |p: &ParamSet<f32>| {
            let mut s = ParamSet::new();
            for (n, t) in p.names.iter().zip(&p.tensors) {
                s.add(n.clone(), Tensor::zeros(t.shape()));
            }
            s
        };
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Option<Tensor<f32>>]) {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (p, m, v) = (params.tensors[i].data_mut(), self.m.tensors[i].data_mut(), self.v.tensors[i].data_mut());
            for k in 0..p.len() {
                let gk = g.data()[k] as f64;
                let mk = self.beta1 * m[k] as f64 + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v[k] as f64 + (1.0 - self.beta2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                p[k] = (p[k] as f64 - self.lr * (mk / c1) / ((vk / c2).sqrt() + self.eps)) as f32;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = HashMap::from([("t".to_string(), self.t.to_string()), ("lr".to_string(), self.lr.to_string())]);
        save_tensors(path, &[("m", &self.m), ("v", &self.v)], meta)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let meta = load_tensors(path, &mut [("m", &mut self.m), ("v", &mut self.v)])?;
        self.t = meta
            .get("t")
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Data("optimizer state lacks step count".into()))?;
        Ok(())
    }
}
