//! Named parameter tensors, checkpoints and optimizers.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{MceError, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{format_list, parse_list, Document};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Appends a parameter and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
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

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Puts every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes `<stem>.bin` (all values as little-endian f64, in store order)
    /// and `<stem>.manifest`, which lists each parameter's shape and offset
    /// followed by the caller's `meta` entries.
    pub fn save(&self, stem: &Path, meta: &Document) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.scalar_count() * 8);
        let mut manifest = Document::new();
        manifest.push("checkpoint", "format", "f64le");
        manifest.push("checkpoint", "parameters", self.len());
        manifest.push("checkpoint", "scalars", self.scalar_count());
        manifest.push("checkpoint", "fingerprint", self.fingerprint());
        let mut offset = 0;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            manifest.push("shapes", name, format_list(t.shape()));
            manifest.push("offsets", name, offset);
            offset += t.len();
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for e in meta.entries() {
            manifest.push(&e.section, &e.key, &e.value);
        }
        std::fs::write(with_ext(stem, "bin"), bytes)?;
        manifest.write(&with_ext(stem, "manifest"))
    }

    pub fn load(stem: &Path) -> Result<(ParamStore, Document)> {
        let manifest = Document::read(&with_ext(stem, "manifest"))?;
        let bytes = std::fs::read(with_ext(stem, "bin"))?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut store = ParamStore::new();
        for e in manifest.entries().iter().filter(|e| e.section == "shapes") {
            let shape: Vec<usize> = parse_list(&e.value)
                .ok_or_else(|| MceError::Parse(format!("bad shape for `{}`", e.key)))?;
            let offset: usize = manifest.parse_value("offsets", &e.key)?;
            let len: usize = shape.iter().product();
            let data = values.get(offset..offset + len).ok_or_else(|| {
                MceError::Parse(format!("checkpoint too short for `{}`", e.key))
            })?;
            store.add(e.key.clone(), Tensor::new(shape, data.to_vec())?);
        }
        if store.scalar_count() != values.len() || bytes.len() % 8 != 0 {
            return Err(MceError::Parse(format!(
                "checkpoint holds {} values, manifest describes {}",
                values.len(),
                store.scalar_count()
            )));
        }
        let expected: String = manifest.require("checkpoint", "fingerprint")?.to_string();
        if store.fingerprint() != expected {
            return Err(MceError::Parse("checkpoint fingerprint mismatch".into()));
        }
        Ok((store, manifest))
    }
}

pub(crate) fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = MceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(MceError::config("train.optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Plain gradient descent or Adam (β₁=0.9, β₂=0.999, ε=1e-8).
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `grads[i]` belongs to parameter `i` of `store`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(MceError::Dimension {
                op: "optimizer",
                lhs: vec![store.len()],
                rhs: vec![grads.len()],
            });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in store.tensors_mut().iter_mut().zip(grads) {
                    for (a, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *a -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - Self::BETA1.powi(t);
                let c2 = 1.0 - Self::BETA2.powi(t);
                for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (a, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = Self::BETA1 * m[j] + (1.0 - Self::BETA1) * d;
                        v[j] = Self::BETA2 * v[j] + (1.0 - Self::BETA2) * d * d;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *a -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.25]).unwrap());
        s.add("a.b", Tensor::vector(vec![0.1, 0.2]));
        s
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        let mut meta = Document::new();
        meta.push("run", "step", 12);
        store().save(&stem, &meta).unwrap();
        let (back, manifest) = ParamStore::load(&stem).unwrap();
        assert_eq!(back, store());
        assert_eq!(manifest.get("run", "step"), Some("12"));
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        store().save(&stem, &Document::new()).unwrap();
        let mut bytes = std::fs::read(with_ext(&stem, "bin")).unwrap();
        bytes[3] ^= 0x40;
        std::fs::write(with_ext(&stem, "bin"), &bytes).unwrap();
        assert!(ParamStore::load(&stem).is_err());
    }

    #[test]
    fn sgd_and_adam_first_steps() {
        let grads = vec![Tensor::filled(&[2, 2], 0.5), Tensor::vector(vec![-1.0, 0.0])];
        let mut s = store();
        Optimizer::new(OptimizerKind::Sgd, 0.1).apply(&mut s, &grads).unwrap();
        assert!((s.tensors()[0].data()[0] - 0.95).abs() < 1e-15);
        assert!((s.tensors()[1].data()[0] - 0.2).abs() < 1e-15);

        // Adam's first step moves each coordinate by lr·sign(g) (up to ε)
        let mut s = store();
        Optimizer::new(OptimizerKind::Adam, 0.01).apply(&mut s, &grads).unwrap();
        assert!((s.tensors()[0].data()[0] - 0.99).abs() < 1e-9);
        assert!((s.tensors()[1].data()[0] - 0.11).abs() < 1e-9);
        assert_eq!(s.tensors()[1].data()[1], 0.2);
    }

    #[test]
    fn fingerprint_tracks_values() {
        let a = store();
        let mut b = store();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.tensors_mut()[1].data_mut()[0] += 1e-12;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
