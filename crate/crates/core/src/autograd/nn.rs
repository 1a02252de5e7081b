use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AutogradError, Graph, Tensor, Var};

/// Named learned arrays. Initialization of each entry depends only on the bundle
/// seed and the entry name, so insertion order never changes values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub seed: u64,
    params: BTreeMap<String, Tensor>,
}

fn name_hash(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl ParamBundle {
    pub fn new(seed: u64) -> Self {
        ParamBundle { seed, params: BTreeMap::new() }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(name_hash(name));
        rng
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Copies every entry of `other` under `prefix`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &ParamBundle) {
        for (k, v) in &other.params {
            self.params.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Entries under `prefix`, with the prefix stripped.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamBundle {
        let mut out = ParamBundle::new(self.seed);
        for (k, v) in &self.params {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.params.insert(rest.to_string(), v.clone());
            }
        }
        out
    }

    /// Uniform in `[-scale, scale]`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], scale: f64) {
        let mut rng = self.rng_for(name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("init shape"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::filled(shape, value));
    }

    /// Glorot-uniform weight `[out, in]` as `{prefix}.w` and zero bias `{prefix}.b`.
    pub fn init_dense(&mut self, prefix: &str, input: usize, output: usize) {
        let scale = (6.0 / (input + output) as f64).sqrt();
        self.init_uniform(&format!("{prefix}.w"), &[output, input], scale);
        self.init_const(&format!("{prefix}.b"), &[output], 0.0);
    }

    /// Conv kernel `[out, in, k, k]` as `{prefix}.w` and zero bias `{prefix}.b`.
    pub fn init_conv(&mut self, prefix: &str, input: usize, output: usize, k: usize) {
        let fan = (input * k * k + output * k * k) as f64;
        self.init_uniform(&format!("{prefix}.w"), &[output, input, k, k], (6.0 / fan).sqrt());
        self.init_const(&format!("{prefix}.b"), &[output], 0.0);
    }

    /// Update, reset and candidate blocks of a GRU with `hidden` units.
    pub fn init_gru(&mut self, prefix: &str, input: usize, hidden: usize) {
        for gate in ["z", "r", "h"] {
            let s_in = (6.0 / (input + hidden) as f64).sqrt();
            let s_h = (3.0 / hidden as f64).sqrt();
            self.init_uniform(&format!("{prefix}.w{gate}"), &[hidden, input], s_in);
            self.init_uniform(&format!("{prefix}.u{gate}"), &[hidden, hidden], s_h);
            self.init_const(&format!("{prefix}.b{gate}"), &[hidden], 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

/// `x W^T + b` with weights `{prefix}.w`, `{prefix}.b`.
pub fn dense_layer(g: &mut Graph, p: &ParamBundle, prefix: &str, x: Var) -> Result<Var, AutogradError> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let b = g.param(p, &format!("{prefix}.b"))?;
    g.dense(x, w, Some(b))
}

/// Standard GRU update:
/// `z = σ(Wz x + Uz h + bz)`, `r = σ(Wr x + Ur h + br)`,
/// `h~ = tanh(Wh x + Uh (r ⊙ h) + bh)`, `h' = h + z ⊙ (h~ − h)`.
pub fn gru_cell(g: &mut Graph, p: &ParamBundle, prefix: &str, x: Var, h: Var) -> Result<Var, AutogradError> {
    let gate = |g: &mut Graph, name: &str, hin: Var| -> Result<Var, AutogradError> {
        let w = g.param(p, &format!("{prefix}.w{name}"))?;
        let u = g.param(p, &format!("{prefix}.u{name}"))?;
        let b = g.param(p, &format!("{prefix}.b{name}"))?;
        let a = g.dense(x, w, Some(b))?;
        let c = g.dense(hin, u, None)?;
        g.add(a, c)
    };
    let z_pre = gate(g, "z", h)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, "r", h)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let cand_pre = gate(g, "h", rh)?;
    let cand = g.tanh(cand_pre);
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}
