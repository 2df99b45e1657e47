//! Dense embedding tables and their binary serialization.
//!
//! On disk a table is little-endian: the magic `EDDA`, a `u32` format
//! version, a `u32` dimension and a `u64` row count, followed by one record
//! per row holding the node kind (`u8`), node id (`u64`) and `dim` values
//! as `f64`.

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::mdgraph::{NodeId, NodeKind};
use crate::scalar::Scalar;

pub const TABLE_MAGIC: [u8; 4] = *b"EDDA";
pub const TABLE_VERSION: u32 = 1;

/// One fixed-dimension vector per node, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    dim: usize,
    nodes: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    data: Vec<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn zeros(dim: usize, nodes: Vec<NodeId>) -> Result<Self> {
        let data = vec![T::zero(); dim * nodes.len()];
        Self::from_rows(dim, nodes, data)
    }

    pub fn from_rows(dim: usize, nodes: Vec<NodeId>, data: Vec<T>) -> Result<Self> {
        if data.len() != dim * nodes.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * nodes.len(),
                found: data.len(),
            });
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (k, &n) in nodes.iter().enumerate() {
            if index.insert(n, k).is_some() {
                return Err(Error::Format(format!("node {n} appears twice in table")));
            }
        }
        Ok(EmbeddingTable {
            dim,
            nodes,
            index,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn position(&self, node: NodeId) -> Option<usize> {
        self.index.get(&node).copied()
    }

    pub fn row(&self, node: NodeId) -> Option<&[T]> {
        self.position(node).map(|k| self.row_at(k))
    }

    pub fn row_at(&self, k: usize) -> &[T] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn row_at_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Copies rows for `nodes` (in that order) into a new row-major buffer.
    pub fn gather(&self, nodes: impl IntoIterator<Item = NodeId>, context: &str) -> Result<Vec<T>> {
        let mut out = Vec::new();
        for n in nodes {
            let row = self.row(n).ok_or_else(|| Error::MissingNode {
                node: n,
                context: context.to_string(),
            })?;
            out.extend_from_slice(row);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingTable<U> {
        EmbeddingTable {
            dim: self.dim,
            nodes: self.nodes.clone(),
            index: self.index.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&TABLE_MAGIC)?;
        w.write_all(&TABLE_VERSION.to_le_bytes())?;
        let dim = u32::try_from(self.dim).map_err(|_| Error::Format("dimension exceeds u32".into()))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.nodes.len() as u64).to_le_bytes())?;
        for (k, n) in self.nodes.iter().enumerate() {
            w.write_all(&[n.kind.code()])?;
            w.write_all(&n.id.to_le_bytes())?;
            for v in self.row_at(k) {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != TABLE_MAGIC {
            return Err(Error::Format("bad magic, not an embedding table".into()));
        }
        let version = read_u32(&mut r)?;
        if version != TABLE_VERSION {
            return Err(Error::Format(format!("unsupported table version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)?;
        let count = usize::try_from(count).map_err(|_| Error::Format("row count overflow".into()))?;
        let mut nodes = Vec::with_capacity(count.min(1 << 20));
        let mut data = Vec::with_capacity((count * dim).min(1 << 24));
        for _ in 0..count {
            let mut kind = [0u8; 1];
            r.read_exact(&mut kind)?;
            let kind = NodeKind::from_code(kind[0])
                .ok_or_else(|| Error::Format(format!("bad node kind byte {}", kind[0])))?;
            let id = read_u64(&mut r)?;
            nodes.push(NodeId { kind, id });
            for _ in 0..dim {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf)?;
                data.push(T::of(f64::from_le_bytes(buf)));
            }
        }
        Self::from_rows(dim, nodes, data)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = EmbeddingTable::from_rows(2, vec![NodeId::item(3)], vec![1.5f64, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"EDDA");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 1);
        assert_eq!(buf[20], 1);
        assert_eq!(u64::from_le_bytes(buf[21..29].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(buf[29..37].try_into().unwrap()), 1.5);
        assert_eq!(buf.len(), 20 + 1 + 8 + 16);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(EmbeddingTable::<f64>::read_from(&b"NOPE"[..]).is_err());
        assert!(EmbeddingTable::from_rows(2, vec![NodeId::user(0)], vec![1.0f64]).is_err());
        assert!(EmbeddingTable::from_rows(1, vec![NodeId::user(0); 2], vec![1.0f64, 2.0]).is_err());
        let t = EmbeddingTable::from_rows(1, vec![NodeId::user(0)], vec![1.0f64]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(EmbeddingTable::<f64>::read_from(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip(
            dim in 0usize..5,
            ids in prop::collection::btree_set((0u8..2, 0u64..1000), 0..20),
            seed in any::<u64>(),
        ) {
            let nodes: Vec<NodeId> = ids
                .into_iter()
                .map(|(k, id)| NodeId { kind: NodeKind::from_code(k).unwrap(), id })
                .collect();
            let data: Vec<f64> = (0..nodes.len() * dim)
                .map(|k| ((seed ^ k as u64) as f64).sin() * 1e3)
                .collect();
            let t = EmbeddingTable::from_rows(dim, nodes, data).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = EmbeddingTable::<f64>::read_from(&buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
