//! Logical device meshes and per-value sharding specifications.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ir::TensorType;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MeshError {
    #[error("duplicate mesh axis \"{0}\"")]
    DuplicateAxis(String),
    #[error("mesh axis \"{0}\" must have size >= 1")]
    ZeroSize(String),
    #[error("axis \"{0}\" is not declared in the mesh")]
    UnknownAxis(String),
    #[error("dimension {dim} of size {size} is not divisible by axis \"{axis}\" of size {axis_size}")]
    Indivisible { dim: usize, size: usize, axis: String, axis_size: usize },
    #[error("sharding spec has {spec} dims but the tensor has rank {rank}")]
    RankMismatch { spec: usize, rank: usize },
    #[error("axis \"{0}\" used more than once in a sharding spec")]
    RepeatedAxis(String),
}

/// Ordered named axes of a logical device grid.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mesh {
    axes: Vec<(String, usize)>,
}

impl Mesh {
    pub fn new<S: Into<String>>(axes: impl IntoIterator<Item = (S, usize)>) -> Result<Self, MeshError> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, size) in axes {
            let name = name.into();
            if out.iter().any(|(n, _)| *n == name) {
                return Err(MeshError::DuplicateAxis(name));
            }
            if size == 0 {
                return Err(MeshError::ZeroSize(name));
            }
            out.push((name, size));
        }
        Ok(Mesh { axes: out })
    }

    pub fn empty() -> Self {
        Mesh::default()
    }

    pub fn axes(&self) -> &[(String, usize)] {
        &self.axes
    }

    pub fn axis_names(&self) -> impl Iterator<Item = &str> {
        self.axes.iter().map(|(n, _)| n.as_str())
    }

    pub fn axis_size(&self, name: &str) -> Option<usize> {
        self.axes.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
    }

    pub fn axis_index(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|(n, _)| n == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.axis_index(name).is_some()
    }

    pub fn is_empty(&self) -> bool {
        self.axes.is_empty()
    }

    /// Total device count: the product of axis sizes (1 for an empty mesh).
    pub fn device_count(&self) -> usize {
        self.axes.iter().map(|(_, s)| s).product()
    }

    /// All device coordinates in row-major order over the axes.
    pub fn devices(&self) -> Vec<DeviceCoord> {
        let mut out = vec![DeviceCoord(vec![0; self.axes.len()])];
        for (i, (_, size)) in self.axes.iter().enumerate() {
            let mut next = Vec::with_capacity(out.len() * size);
            for c in &out {
                for k in 0..*size {
                    let mut c = c.clone();
                    c.0[i] = k;
                    next.push(c);
                }
            }
            out = next;
        }
        out
    }

    /// Linear index of a coordinate in [`Mesh::devices`] order.
    pub fn linear_index(&self, coord: &DeviceCoord) -> usize {
        let mut idx = 0;
        for (i, (_, size)) in self.axes.iter().enumerate() {
            idx = idx * size + coord.0[i];
        }
        idx
    }
}

/// Device coordinate: one index per mesh axis, in mesh order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DeviceCoord(pub Vec<usize>);

impl DeviceCoord {
    pub fn get(&self, mesh: &Mesh, axis: &str) -> usize {
        self.0[mesh.axis_index(axis).expect("axis declared")]
    }
}

/// Per-dimension axis assignment plus axes over which the value is an
/// unreduced partial sum.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShardingSpec {
    pub dims: Vec<Option<String>>,
    #[serde(default)]
    pub pending_sum: Vec<String>,
}

impl ShardingSpec {
    pub fn replicated(rank: usize) -> Self {
        ShardingSpec { dims: vec![None; rank], pending_sum: Vec::new() }
    }

    pub fn is_replicated(&self) -> bool {
        self.dims.iter().all(Option::is_none) && self.pending_sum.is_empty()
    }

    pub fn dim_of_axis(&self, axis: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.as_deref() == Some(axis))
    }

    pub fn sharded_axes(&self) -> impl Iterator<Item = (usize, &str)> {
        self.dims.iter().enumerate().filter_map(|(i, d)| d.as_deref().map(|a| (i, a)))
    }

    /// Checks the spec against a mesh and tensor rank.
    pub fn validate(&self, mesh: &Mesh, rank: usize) -> Result<(), MeshError> {
        if self.dims.len() != rank {
            return Err(MeshError::RankMismatch { spec: self.dims.len(), rank });
        }
        let mut seen = BTreeSet::new();
        for a in self.dims.iter().flatten().chain(self.pending_sum.iter()) {
            if !mesh.contains(a) {
                return Err(MeshError::UnknownAxis(a.clone()));
            }
            if !seen.insert(a.as_str()) {
                return Err(MeshError::RepeatedAxis(a.clone()));
            }
        }
        Ok(())
    }
}

/// Device count of a mesh.
pub fn device_count(m: &Mesh) -> usize {
    m.device_count()
}

/// Per-device shape of a value with the given global type and sharding.
pub fn local_shape(t: &TensorType, s: &ShardingSpec, m: &Mesh) -> Result<Vec<usize>, MeshError> {
    s.validate(m, t.rank())?;
    let mut shape = t.shape.clone();
    for (dim, axis) in s.sharded_axes() {
        let axis_size = m.axis_size(axis).ok_or_else(|| MeshError::UnknownAxis(axis.to_string()))?;
        if !shape[dim].is_multiple_of(axis_size) {
            return Err(MeshError::Indivisible { dim, size: shape[dim], axis: axis.to_string(), axis_size });
        }
        shape[dim] /= axis_size;
    }
    Ok(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh() -> Mesh {
        Mesh::new([("batch", 2), ("model", 4)]).unwrap()
    }

    #[test]
    fn device_counts() {
        assert_eq!(device_count(&mesh()), 8);
        assert_eq!(device_count(&Mesh::empty()), 1);
        assert_eq!(device_count(&Mesh::new([("shard", 2)]).unwrap()), 2);
    }

    #[test]
    fn local_shapes() {
        let m = Mesh::new([("shard", 2)]).unwrap();
        let spec = ShardingSpec { dims: vec![None, Some("shard".into())], pending_sum: vec![] };
        assert_eq!(local_shape(&TensorType::f32([16, 64]), &spec, &m).unwrap(), vec![16, 32]);
        assert_eq!(local_shape(&TensorType::f32([8, 64]), &ShardingSpec::replicated(2), &m).unwrap(), vec![8, 64]);
        let spec = ShardingSpec { dims: vec![None, Some("model".into())], pending_sum: vec![] };
        let err = local_shape(&TensorType::f32([8, 6]), &spec, &mesh()).unwrap_err();
        assert!(matches!(err, MeshError::Indivisible { dim: 1, axis_size: 4, .. }));
    }

    #[test]
    fn rejects_bad_meshes_and_specs() {
        assert!(Mesh::new([("a", 2), ("a", 2)]).is_err());
        assert!(Mesh::new([("a", 0)]).is_err());
        let spec = ShardingSpec { dims: vec![Some("model".into()), Some("model".into())], pending_sum: vec![] };
        assert!(spec.validate(&mesh(), 2).is_err());
        let spec = ShardingSpec { dims: vec![Some("model".into())], pending_sum: vec!["model".into()] };
        assert!(spec.validate(&mesh(), 1).is_err());
    }

    #[test]
    fn device_enumeration_is_row_major() {
        let m = mesh();
        let devs = m.devices();
        assert_eq!(devs.len(), 8);
        assert_eq!(devs[1], DeviceCoord(vec![0, 1]));
        for (i, d) in devs.iter().enumerate() {
            assert_eq!(m.linear_index(d), i);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn local_elements_sum_matches_replication_factor(
                d0 in 1usize..4, d1 in 1usize..4, shard0 in any::<bool>(), shard1 in any::<bool>()
            ) {
                let m = Mesh::new([("a", 2), ("b", 3)]).unwrap();
                let t = TensorType::f32([d0 * 2, d1 * 3]);
                let spec = ShardingSpec {
                    dims: vec![shard0.then(|| "a".to_string()), shard1.then(|| "b".to_string())],
                    pending_sum: vec![],
                };
                let local = local_shape(&t, &spec, &m).unwrap();
                let local_elems: usize = local.iter().product();
                let sharded: usize = [(shard0, 2), (shard1, 3)].iter().filter(|(s, _)| *s).map(|(_, n)| n).product();
                prop_assert_eq!(local_elems * m.device_count(), t.num_elements() * (m.device_count() / sharded));
                let repl = local_shape(&t, &ShardingSpec::replicated(2), &m).unwrap();
                prop_assert!(local.iter().zip(&repl).all(|(l, r)| l <= r));
            }
        }
    }
}
