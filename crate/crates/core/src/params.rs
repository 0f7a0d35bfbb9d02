//! Parameter storage and the binary parameter blob.
//!
//! Blob layout (all integers little-endian):
//!
//! ```text
//! magic "SFPB" | u32 version | u32 entry count
//! per entry: u32 key length | key bytes ("<node id>/<name>") | u32 rank
//!            | rank × u32 dims | u64 offset | u64 length   (offset/length in f32 elements)
//! payload: f32 values
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, ModelGraph};

pub const WEIGHT: &str = "weight";
pub const BIAS: &str = "bias";
pub const GAMMA: &str = "gamma";
pub const BETA: &str = "beta";
pub const RUNNING_MEAN: &str = "running_mean";
pub const RUNNING_VAR: &str = "running_var";

const MAGIC: &[u8; 4] = b"SFPB";
const VERSION: u32 = 1;

/// Named tensors per node id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, BTreeMap<String, Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, node: &str, name: &str) -> Option<&Tensor> {
        self.entries.get(node).and_then(|m| m.get(name))
    }

    pub fn get_mut(&mut self, node: &str, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(node).and_then(|m| m.get_mut(name))
    }

    pub fn require(&self, node: &str, name: &str) -> Result<&Tensor> {
        self.get(node, name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{node}/{name}`")))
    }

    pub fn insert(&mut self, node: &str, name: &str, tensor: Tensor) {
        self.entries
            .entry(node.to_string())
            .or_default()
            .insert(name.to_string(), tensor);
    }

    pub fn node(&self, node: &str) -> Option<&BTreeMap<String, Tensor>> {
        self.entries.get(node)
    }

    pub fn remove_node(&mut self, node: &str) -> Option<BTreeMap<String, Tensor>> {
        self.entries.remove(node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &Tensor)> {
        self.entries
            .iter()
            .flat_map(|(n, m)| m.iter().map(move |(k, t)| (n.as_str(), k.as_str(), t)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .flat_map(|(n, m)| m.iter_mut().map(move |(k, t)| (n.as_str(), k.as_str(), t)))
    }

    /// Trainable element count (running statistics excluded).
    pub fn trainable_len(&self) -> usize {
        self.iter()
            .filter(|(_, name, _)| !is_buffer(name))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for (_, _, t) in self.iter_mut() {
            t.set_grad(None);
        }
    }

    /// Fresh parameters for every parameterised node of `graph`.
    pub fn init_for_graph<R: Rng + ?Sized>(graph: &ModelGraph, rng: &mut R) -> Self {
        let mut store = Self::new();
        for node in graph.iter() {
            init_node(&mut store, node, rng);
        }
        store
    }

    /// Checks that every parameterised node has correctly shaped tensors.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<()> {
        for node in graph.iter() {
            for (name, shape) in expected_shapes(&node.kind) {
                let t = self.require(&node.id, name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::invalid(format!(
                        "parameter `{}/{name}` has shape {:?}, graph expects {shape:?}",
                        node.id,
                        t.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn write_blob<W: Write>(&self, mut w: W) -> Result<()> {
        let entries: Vec<(String, &Tensor)> = self.iter().map(|(n, k, t)| (format!("{n}/{k}"), t)).collect();
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        let mut offset = 0u64;
        for (key, t) in &entries {
            w.write_all(&(key.len() as u32).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&offset.to_le_bytes())?;
            w.write_all(&(t.len() as u64).to_le_bytes())?;
            offset += t.len() as u64;
        }
        for (_, t) in &entries {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_blob<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::parse(0, "magic", "not a parameter blob"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::parse(
                0,
                "version",
                format!("unsupported blob version {version}"),
            ));
        }
        let count = cur.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let klen = cur.u32()? as usize;
            let key =
                String::from_utf8(cur.take(klen)?.to_vec()).map_err(|_| Error::parse(0, "key", "key is not utf-8"))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let offset = cur.u64()? as usize;
            let len = cur.u64()? as usize;
            table.push((key, shape, offset, len));
        }
        let payload = &bytes[cur.pos..];
        let mut store = Self::new();
        for (key, shape, offset, len) in table {
            let (node, name) = key
                .rsplit_once('/')
                .ok_or_else(|| Error::parse(0, "key", format!("malformed key `{key}`")))?;
            let start = offset * 4;
            let end = start + len * 4;
            if end > payload.len() {
                return Err(Error::parse(
                    0,
                    "offset",
                    format!("entry `{key}` runs past the payload"),
                ));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::parse(0, "shape", format!("entry `{key}`: {e}")))?;
            store.insert(node, name, t);
        }
        Ok(store)
    }
}

pub(crate) fn is_buffer(name: &str) -> bool {
    name == RUNNING_MEAN || name == RUNNING_VAR
}

/// Parameter names and shapes a node kind owns.
pub fn expected_shapes(kind: &LayerKind) -> Vec<(&'static str, Vec<usize>)> {
    match *kind {
        LayerKind::Conv {
            kernel,
            in_channels,
            out_channels,
            has_bias,
            ..
        } => {
            let mut v = vec![(WEIGHT, vec![out_channels, in_channels, kernel, kernel])];
            if has_bias {
                v.push((BIAS, vec![out_channels]));
            }
            v
        }
        LayerKind::Batchnorm { channels, .. } => vec![
            (GAMMA, vec![channels]),
            (BETA, vec![channels]),
            (RUNNING_MEAN, vec![channels]),
            (RUNNING_VAR, vec![channels]),
        ],
        LayerKind::Fc {
            in_channels,
            out_channels,
        } => vec![(WEIGHT, vec![out_channels, in_channels]), (BIAS, vec![out_channels])],
        _ => Vec::new(),
    }
}

/// He (fan-in) normal init for weights, zero biases, identity batchnorm.
pub fn init_node<R: Rng + ?Sized>(store: &mut ParamStore, node: &LayerNode, rng: &mut R) {
    for (name, shape) in expected_shapes(&node.kind) {
        let n: usize = shape.iter().product();
        let data = match name {
            WEIGHT => {
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| normal.sample(rng)).collect()
            }
            GAMMA | RUNNING_VAR => vec![1.0; n],
            _ => vec![0.0; n],
        };
        store.insert(&node.id, name, Tensor::new(shape, data).expect("shape from graph"));
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(0, "header", "truncated parameter blob"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}
