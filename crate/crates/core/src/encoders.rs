//! Graph propagation encoders.
//!
//! GRec is parameter free: each layer maps node embeddings to
//! `alpha * e_v + (1 - alpha) * sum_{n in N(v)} e_n / (sqrt|N_v| sqrt|N_n|)`
//! and the encoder output is the last layer. As a matrix the layer is
//! `alpha I + (1 - alpha) D^-1/2 A D^-1/2`, which is symmetric, so the same
//! routine computes both the forward pass and its adjoint (used for
//! gradients).
//!
//! Under an edge mask the dropped edges are removed from the sum but the
//! normalization keeps the full-graph degrees. A node whose edges are all
//! masked keeps only the residual term.
//!
//! Every output row is computed from a fixed neighbor order, so results are
//! bitwise reproducible.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::mdgraph::{DomainGraph, MultiDomainDataset};
use crate::scalar::{axpy, Scalar};
use crate::table::EmbeddingTable;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GRecConfig {
    pub num_layers: usize,
    /// Weight of the node's own embedding, in `[0, 1]`.
    pub alpha: f64,
}

impl Default for GRecConfig {
    fn default() -> Self {
        GRecConfig {
            num_layers: 2,
            alpha: 0.1,
        }
    }
}

impl GRecConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    GRec,
    Mf,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::GRec => "grec",
            EncoderKind::Mf => "mf",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grec" => Ok(EncoderKind::GRec),
            "mf" => Ok(EncoderKind::Mf),
            other => Err(format!("unknown encoder `{other}` (expected grec or mf)")),
        }
    }
}

/// Subset of a domain graph's edges, indexed by edge id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    keep: Vec<bool>,
}

impl EdgeMask {
    pub fn full(num_edges: usize) -> Self {
        EdgeMask {
            keep: vec![true; num_edges],
        }
    }

    pub fn from_keep(keep: Vec<bool>) -> Self {
        EdgeMask { keep }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn retained(&self, edge: usize) -> bool {
        self.keep[edge]
    }

    pub fn num_retained(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    fn check(&self, graph: &DomainGraph) -> Result<()> {
        if self.keep.len() != graph.num_edges() {
            return Err(Error::DimensionMismatch {
                expected: graph.num_edges(),
                found: self.keep.len(),
            });
        }
        Ok(())
    }
}

/// Per adjacency entry weight `(1 - alpha) / sqrt(deg_v deg_n)`, zero for
/// masked edges.
fn edge_weights<T: Scalar>(graph: &DomainGraph, alpha: T, mask: Option<&EdgeMask>) -> Vec<T> {
    let n = graph.num_nodes();
    let inv_sqrt: Vec<T> = (0..n)
        .map(|v| match graph.degree(v) {
            0 => T::zero(),
            d => T::one() / T::of_usize(d).sqrt(),
        })
        .collect();
    let beta = T::one() - alpha;
    let mut w = Vec::with_capacity(2 * graph.num_edges());
    for v in 0..n {
        for (&u, &e) in graph.neighbors(v).iter().zip(graph.neighbor_edges(v)) {
            let kept = mask.is_none_or(|m| m.retained(e));
            w.push(if kept { beta * inv_sqrt[v] * inv_sqrt[u] } else { T::zero() });
        }
    }
    w
}

/// Applies `num_layers` GRec layers to a row-major `num_nodes x dim` matrix
/// laid out in the graph's local node order.
pub fn propagate<T: Scalar>(
    graph: &DomainGraph,
    x: &[T],
    dim: usize,
    cfg: &GRecConfig,
    mask: Option<&EdgeMask>,
) -> Result<Vec<T>> {
    let n = graph.num_nodes();
    if x.len() != n * dim {
        return Err(Error::DimensionMismatch {
            expected: n * dim,
            found: x.len(),
        });
    }
    if let Some(m) = mask {
        m.check(graph)?;
    }
    cfg.validate()?;
    if cfg.num_layers == 0 || cfg.alpha == 1.0 {
        return Ok(x.to_vec());
    }
    let alpha = T::of(cfg.alpha);
    let weights = edge_weights(graph, alpha, mask);
    let mut cur = x.to_vec();
    let mut next = vec![T::zero(); cur.len()];
    for _ in 0..cfg.num_layers {
        let mut slot = 0;
        for v in 0..n {
            let out = &mut next[v * dim..(v + 1) * dim];
            for (o, c) in out.iter_mut().zip(&cur[v * dim..(v + 1) * dim]) {
                *o = alpha * *c;
            }
            for &u in graph.neighbors(v) {
                let w = weights[slot];
                slot += 1;
                if w != T::zero() {
                    axpy(w, &cur[u * dim..(u + 1) * dim], out);
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// GRec output for a single node, computed on its `num_layers`-hop ball only.
///
/// Agrees with the corresponding row of [`propagate`]; used for point queries
/// where propagating the full graph is wasteful.
pub fn propagate_node<T: Scalar>(
    graph: &DomainGraph,
    x: &[T],
    dim: usize,
    cfg: &GRecConfig,
    mask: Option<&EdgeMask>,
    target: usize,
) -> Result<Vec<T>> {
    let n = graph.num_nodes();
    if x.len() != n * dim {
        return Err(Error::DimensionMismatch {
            expected: n * dim,
            found: x.len(),
        });
    }
    if target >= n {
        return Err(Error::InvalidConfig(format!("local node {target} out of range")));
    }
    if let Some(m) = mask {
        m.check(graph)?;
    }
    cfg.validate()?;
    let row = |v: usize| x[v * dim..(v + 1) * dim].to_vec();
    if cfg.num_layers == 0 || cfg.alpha == 1.0 {
        return Ok(row(target));
    }
    let alpha = T::of(cfg.alpha);
    let beta = T::one() - alpha;
    let inv_sqrt = |v: usize| T::one() / T::of_usize(graph.degree(v)).sqrt();

    // balls[k] = nodes within k hops of target
    let mut balls: Vec<Vec<usize>> = vec![vec![target]];
    let mut seen: HashSet<usize> = HashSet::from([target]);
    for _ in 0..cfg.num_layers {
        let mut next = balls.last().unwrap().clone();
        for &v in balls.last().unwrap() {
            for &u in graph.neighbors(v) {
                if seen.insert(u) {
                    next.push(u);
                }
            }
        }
        balls.push(next);
    }

    let mut layer: HashMap<usize, Vec<T>> = balls[cfg.num_layers].iter().map(|&v| (v, row(v))).collect();
    for l in 1..=cfg.num_layers {
        let mut out = HashMap::with_capacity(balls[cfg.num_layers - l].len());
        for &v in &balls[cfg.num_layers - l] {
            let mut acc: Vec<T> = layer[&v].iter().map(|&c| alpha * c).collect();
            for (&u, &e) in graph.neighbors(v).iter().zip(graph.neighbor_edges(v)) {
                if mask.is_none_or(|m| m.retained(e)) {
                    let w = beta * inv_sqrt(v) * inv_sqrt(u);
                    if w != T::zero() {
                        axpy(w, &layer[&u], &mut acc);
                    }
                }
            }
            out.insert(v, acc);
        }
        layer = out;
    }
    Ok(layer.remove(&target).unwrap())
}

/// GRec on one domain graph. The input table must cover every node of the
/// graph; the output is keyed by the graph's nodes in local order.
pub fn grec_propagate<T: Scalar>(
    graph: &DomainGraph,
    table: &EmbeddingTable<T>,
    cfg: &GRecConfig,
    mask: Option<&EdgeMask>,
) -> Result<EmbeddingTable<T>> {
    let dim = table.dim();
    let x = table.gather(graph.nodes(), &format!("embedding table for domain {}", graph.domain()))?;
    let y = propagate(graph, &x, dim, cfg, mask)?;
    EmbeddingTable::from_rows(dim, graph.nodes().collect(), y)
}

/// Inter-domain encoder on a row-major matrix in the dataset's global order:
/// every domain propagates the same input and each node receives the sum of
/// its rows over the domains that contain it.
pub fn inter_propagate<T: Scalar>(
    dataset: &MultiDomainDataset,
    x: &[T],
    dim: usize,
    cfg: &GRecConfig,
    masks: Option<&[EdgeMask]>,
) -> Result<Vec<T>> {
    if x.len() != dataset.num_nodes() * dim {
        return Err(Error::DimensionMismatch {
            expected: dataset.num_nodes() * dim,
            found: x.len(),
        });
    }
    if let Some(m) = masks {
        if m.len() != dataset.num_domains() {
            return Err(Error::DimensionMismatch {
                expected: dataset.num_domains(),
                found: m.len(),
            });
        }
    }
    let mut out = vec![T::zero(); x.len()];
    let mut local = Vec::new();
    for (d, graph) in dataset.domains().iter().enumerate() {
        let map = dataset.local_to_global(d);
        local.clear();
        for &g in map {
            local.extend_from_slice(&x[g * dim..(g + 1) * dim]);
        }
        let y = propagate(graph, &local, dim, cfg, masks.map(|m| &m[d]))?;
        for (k, &g) in map.iter().enumerate() {
            for (o, v) in out[g * dim..(g + 1) * dim].iter_mut().zip(&y[k * dim..(k + 1) * dim]) {
                *o += *v;
            }
        }
    }
    Ok(out)
}

/// Table-level form of [`inter_propagate`]; output rows follow the dataset's
/// global node order.
pub fn inter_encode<T: Scalar>(
    dataset: &MultiDomainDataset,
    inter_table: &EmbeddingTable<T>,
    cfg: &GRecConfig,
    masks: Option<&[EdgeMask]>,
) -> Result<EmbeddingTable<T>> {
    let dim = inter_table.dim();
    let x = inter_table.gather(dataset.nodes(), "inter-domain embedding table")?;
    let y = inter_propagate(dataset, &x, dim, cfg, masks)?;
    EmbeddingTable::from_rows(dim, dataset.nodes().collect(), y)
}

/// Matrix factorization uses the raw embeddings.
pub fn mf_encode<T: Scalar>(table: &EmbeddingTable<T>) -> EmbeddingTable<T> {
    table.clone()
}
