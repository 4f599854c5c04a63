use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{frobenius_norm, Tensor};

/// A tensor whose dtype is not one of the float types we merge (integer,
/// boolean, 8-bit float, ...). Carried through untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpaqueTensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// One model's weights: float tensors, opaque tensors and string metadata,
/// all keyed and iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    opaque: BTreeMap<String, OpaqueTensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a float tensor. Names are unique across float and opaque tensors.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        self.check_free(&name)?;
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn insert_opaque(&mut self, name: impl Into<String>, tensor: OpaqueTensor) -> Result<()> {
        let name = name.into();
        self.check_free(&name)?;
        self.opaque.insert(name, tensor);
        Ok(())
    }

    /// Swaps the float tensor stored under an existing name.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<Tensor> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named {name:?}")))?;
        Ok(std::mem::replace(slot, tensor))
    }

    /// Builder-style [`Checkpoint::insert`].
    pub fn with(mut self, name: impl Into<String>, tensor: Tensor) -> Result<Self> {
        self.insert(name, tensor)?;
        Ok(self)
    }

    fn check_free(&self, name: &str) -> Result<()> {
        if self.tensors.contains_key(name) || self.opaque.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name:?}")));
        }
        Ok(())
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn opaque(&self) -> &BTreeMap<String, OpaqueTensor> {
        &self.opaque
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    /// Number of tensors of either kind.
    pub fn len(&self) -> usize {
        self.tensors.len() + self.opaque.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every tensor name, sorted.
    pub fn names(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self
            .tensors
            .keys()
            .chain(self.opaque.keys())
            .map(String::as_str)
            .collect();
        names.sort_unstable();
        names
    }

    /// Float tensors whose names are not excluded, in name order.
    pub fn mergeable<'a>(
        &'a self,
        exclude: &'a ExcludeSet,
    ) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.tensors.iter().filter(move |(name, _)| !exclude.matches(name))
    }

    /// Frobenius norm over the mergeable tensors.
    pub fn mergeable_norm(&self, exclude: &ExcludeSet) -> Result<f64> {
        frobenius_norm(self.mergeable(exclude).map(|(_, t)| t))
    }

    /// 64-bit content hash: the first eight bytes (little-endian) of a
    /// SHA-256 digest over every tensor in name order. Each tensor
    /// contributes its name, dtype string, shape, and payload; float payloads
    /// are hashed as the little-endian bits of their in-memory `f64` values,
    /// opaque payloads as their raw bytes. Metadata is not hashed.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        for name in self.names() {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            if let Some(t) = self.tensors.get(name) {
                hash_header(&mut hasher, t.dtype().as_str(), t.shape());
                for v in t.data() {
                    hasher.update(v.to_bits().to_le_bytes());
                }
            } else if let Some(o) = self.opaque.get(name) {
                hash_header(&mut hasher, &o.dtype, &o.shape);
                hasher.update((o.bytes.len() as u64).to_le_bytes());
                hasher.update(&o.bytes);
            }
        }
        let digest = hasher.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(head)
    }

    /// Equality that compares float payloads by bit pattern, so `-0.0` and
    /// `0.0` differ and NaN equals itself.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.opaque == other.opaque
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.dtype() == b.dtype()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

fn hash_header(hasher: &mut Sha256, dtype: &str, shape: &[usize]) {
    hasher.update((dtype.len() as u64).to_le_bytes());
    hasher.update(dtype.as_bytes());
    hasher.update((shape.len() as u64).to_le_bytes());
    for &dim in shape {
        hasher.update((dim as u64).to_le_bytes());
    }
}

/// Glob patterns naming tensors that must not be merged.
#[derive(Debug, Clone, Default)]
pub struct ExcludeSet {
    patterns: Vec<glob::Pattern>,
}

impl ExcludeSet {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        let patterns = patterns
            .iter()
            .map(|p| {
                glob::Pattern::new(p.as_ref()).map_err(|e| {
                    Error::RecipeInvalid(format!("bad exclude pattern {:?}: {e}", p.as_ref()))
                })
            })
            .collect::<Result<_>>()?;
        Ok(ExcludeSet { patterns })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| p.matches(name))
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }
}
