//! Named parameter storage shared by the model, optimizer and checkpoints.
//!
//! Parameters live outside the autodiff tape as flat `f64` buffers keyed by
//! a path-style name (`"block0.rsa.wq"`). A forward pass binds the entries
//! it touches onto a fresh tape; after `backward` the gradients are read
//! back per [`ParamRef`]. Insertion order is fixed, which gives the
//! optimizer and the checkpoint writer a deterministic iteration order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Stable handle for one parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef(pub(crate) usize);

impl ParamRef {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`. Names must be unique; they become
    /// checkpoint record keys.
    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamRef {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "param {name}: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(
            self.find(name).is_none(),
            "param {name}: duplicate parameter name"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        ParamRef(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, r: ParamRef) -> &ParamEntry {
        &self.entries[r.0]
    }

    pub fn name(&self, r: ParamRef) -> &str {
        &self.entries[r.0].name
    }

    pub fn shape(&self, r: ParamRef) -> &[usize] {
        &self.entries[r.0].shape
    }

    pub fn data(&self, r: ParamRef) -> &[f64] {
        &self.entries[r.0].data
    }

    pub fn data_mut(&mut self, r: ParamRef) -> &mut [f64] {
        &mut self.entries[r.0].data
    }

    pub fn find(&self, name: &str) -> Option<ParamRef> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamRef)
    }

    pub fn refs(&self) -> impl Iterator<Item = ParamRef> + '_ {
        (0..self.entries.len()).map(ParamRef)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamRef, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamRef(i), e))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

// ── initializers ──────────────────────────────────────────────────────────

/// Xavier/Glorot normal draw for a `fan_in x fan_out` weight matrix.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal(rng, fan_in * fan_out, std)
}

/// `n` draws from N(0, std^2) via Box-Muller (two uniforms per pair).
pub fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(std * r * theta.cos());
        if out.len() < n {
            out.push(std * r * theta.sin());
        }
    }
    out
}

pub fn zeros(n: usize) -> Vec<f64> {
    vec![0.0; n]
}

pub fn full(n: usize, v: f64) -> Vec<f64> {
    vec![v; n]
}
