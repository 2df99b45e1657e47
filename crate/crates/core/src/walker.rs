//! Random-walk node similarity across domains.
//!
//! From every node we run `num_walks` uniform random walks of exactly
//! `walk_length` steps and record the final node of each walk. Restricted to
//! the anchors of a domain pair, these stop counts form a vector per node;
//! two nodes of different domains are similar when their stop-count vectors
//! point the same way (cosine). For each node of one domain we keep its `k`
//! most similar nodes of the other domain.
//!
//! Walk streams are seeded per source node from `(rng_seed, kind, id)`, so the
//! output does not depend on thread count or evaluation order. Only nodes of
//! the source's kind are considered as partners: with an even walk length on
//! a bipartite graph every walk ends on the kind it started from.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mdgraph::{anchors, AnchorSet, DomainGraph, DomainId, MultiDomainDataset, NodeId, NodeKind};
use crate::rng::{stream, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WalkConfig {
    pub walk_length: usize,
    pub num_walks: usize,
    pub rng_seed: u64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            walk_length: 4,
            num_walks: 500,
            rng_seed: 0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walk_length == 0 || self.num_walks == 0 {
            return Err(Error::InvalidConfig("walk_length and num_walks must be at least 1".into()));
        }
        Ok(())
    }
}

/// Stop counts of one source node over the anchors of a domain pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StopCountVector {
    pub source: NodeId,
    pub anchor_pair: (DomainId, DomainId),
    pub counts: Vec<u32>,
}

impl StopCountVector {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }
}

/// Stop node of each walk, as a sorted `(local node, count)` histogram.
/// Walks from an isolated node never complete and are not counted.
pub type StopHistogram = Vec<(usize, u32)>;

pub fn stop_histogram(graph: &DomainGraph, source: usize, cfg: &WalkConfig) -> StopHistogram {
    let node = graph.node(source);
    let mut rng = stream(cfg.rng_seed, &[tag::WALK, node.kind.code() as u64, node.id]);
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    if graph.degree(source) == 0 {
        return Vec::new();
    }
    for _ in 0..cfg.num_walks {
        let mut cur = source;
        for _ in 0..cfg.walk_length {
            let nbrs = graph.neighbors(cur);
            cur = nbrs[rng.random_range(0..nbrs.len())];
        }
        *counts.entry(cur).or_default() += 1;
    }
    counts.into_iter().collect()
}

/// Local index -> anchor position, for one graph.
fn anchor_lookup(graph: &DomainGraph, anchors: &AnchorSet) -> Vec<Option<usize>> {
    let mut lookup = vec![None; graph.num_nodes()];
    for (pos, &a) in anchors.anchors.iter().enumerate() {
        if let Some(l) = graph.local(a) {
            lookup[l] = Some(pos);
        }
    }
    lookup
}

fn project(hist: &StopHistogram, lookup: &[Option<usize>], len: usize) -> Vec<u32> {
    let mut counts = vec![0; len];
    for &(node, c) in hist {
        if let Some(pos) = lookup[node] {
            counts[pos] += c;
        }
    }
    counts
}

/// Walks from `source` on `graph`, counting the walks that stop on each anchor.
pub fn run_walks(
    graph: &DomainGraph,
    source: NodeId,
    anchors: &AnchorSet,
    cfg: &WalkConfig,
) -> Result<StopCountVector> {
    cfg.validate()?;
    let local = graph.local(source).ok_or(Error::NodeNotInDomain {
        node: source,
        domain: graph.domain(),
    })?;
    let hist = stop_histogram(graph, local, cfg);
    Ok(StopCountVector {
        source,
        anchor_pair: anchors.domain_pair,
        counts: project(&hist, &anchor_lookup(graph, anchors), anchors.len()),
    })
}

/// Cosine similarity of two stop-count vectors; zero if either is all-zero.
pub fn node_similarity(cu: &StopCountVector, cv: &StopCountVector) -> Result<f64> {
    if cu.anchor_pair != cv.anchor_pair || cu.counts.len() != cv.counts.len() {
        return Err(Error::AnchorMismatch);
    }
    let (mut uv, mut uu, mut vv) = (0u64, 0u64, 0u64);
    for (&a, &b) in cu.counts.iter().zip(&cv.counts) {
        let (a, b) = (a as u64, b as u64);
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0 || vv == 0 {
        return Ok(0.0);
    }
    let s = uv as f64 / ((uu as f64).sqrt() * (vv as f64).sqrt());
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarPair {
    pub u: NodeId,
    pub v: NodeId,
    pub similarity: f64,
}

/// Mined pairs `(u in d, v in d')` for one ordered domain pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarPairSet {
    pub domain_pair: (DomainId, DomainId),
    pub pairs: Vec<SimilarPair>,
}

impl SimilarPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Stop histograms of every node of every domain.
#[derive(Clone, Debug)]
pub struct WalkProfiles {
    cfg: WalkConfig,
    per_domain: Vec<Vec<StopHistogram>>,
}

impl WalkProfiles {
    pub fn compute(dataset: &MultiDomainDataset, cfg: &WalkConfig) -> Result<Self> {
        cfg.validate()?;
        let per_domain = dataset
            .domains()
            .iter()
            .map(|g| {
                (0..g.num_nodes())
                    .into_par_iter()
                    .map(|v| stop_histogram(g, v, cfg))
                    .collect()
            })
            .collect();
        Ok(WalkProfiles { cfg: *cfg, per_domain })
    }

    pub fn config(&self) -> &WalkConfig {
        &self.cfg
    }

    pub fn histogram(&self, d: DomainId, local: usize) -> &StopHistogram {
        &self.per_domain[d][local]
    }

    /// Stop-count vector of a node from the cached walks; identical to
    /// [`run_walks`] with the same config.
    pub fn stop_counts(
        &self,
        dataset: &MultiDomainDataset,
        d: DomainId,
        node: NodeId,
        anchors: &AnchorSet,
    ) -> Result<StopCountVector> {
        let g = dataset.domain(d)?;
        let local = g.local(node).ok_or(Error::NodeNotInDomain { node, domain: d })?;
        Ok(StopCountVector {
            source: node,
            anchor_pair: anchors.domain_pair,
            counts: project(&self.per_domain[d][local], &anchor_lookup(g, anchors), anchors.len()),
        })
    }
}

/// L2-normalized sparse stop vector over anchor positions, ascending.
type SparseUnit = Vec<(usize, f64)>;

fn normalized(hist: &StopHistogram, lookup: &[Option<usize>]) -> SparseUnit {
    let mut acc: BTreeMap<usize, u64> = BTreeMap::new();
    for &(node, c) in hist {
        if let Some(pos) = lookup[node] {
            *acc.entry(pos).or_default() += c as u64;
        }
    }
    let norm = (acc.values().map(|&c| c * c).sum::<u64>() as f64).sqrt();
    acc.into_iter().map(|(p, c)| (p, c as f64 / norm)).collect()
}

/// Top-`k` partners in `d_prime` for every node of `d`, from cached walks.
pub fn mine_pairs_with(
    dataset: &MultiDomainDataset,
    profiles: &WalkProfiles,
    d: DomainId,
    d_prime: DomainId,
    k: usize,
) -> Result<SimilarPairSet> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let anchor_set = anchors(dataset, d, d_prime)?;
    let mut out = SimilarPairSet {
        domain_pair: (d, d_prime),
        pairs: Vec::new(),
    };
    if anchor_set.is_empty() {
        return Ok(out);
    }
    let (gs, gt) = (dataset.domain(d)?, dataset.domain(d_prime)?);
    let (ls, lt) = (anchor_lookup(gs, &anchor_set), anchor_lookup(gt, &anchor_set));
    let src: Vec<SparseUnit> = (0..gs.num_nodes())
        .map(|v| normalized(&profiles.per_domain[d][v], &ls))
        .collect();
    let dst: Vec<SparseUnit> = (0..gt.num_nodes())
        .map(|v| normalized(&profiles.per_domain[d_prime][v], &lt))
        .collect();

    // Inverted index: anchor position -> (target local, weight), ascending local.
    // Accumulating a source's entries in ascending anchor order reproduces the
    // dense dot product bit for bit.
    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); anchor_set.len()];
    for (v, vec) in dst.iter().enumerate() {
        for &(p, w) in vec {
            inverted[p].push((v, w));
        }
    }

    let per_source: Vec<Vec<SimilarPair>> = (0..gs.num_nodes())
        .into_par_iter()
        .map(|u| {
            let su = &src[u];
            if su.is_empty() {
                return Vec::new();
            }
            let kind = gs.node(u).kind;
            let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
            for &(p, wu) in su {
                for &(v, wv) in &inverted[p] {
                    *scores.entry(v).or_insert(0.0) += wu * wv;
                }
            }
            let mut cands: Vec<(f64, NodeId)> = scores
                .into_iter()
                .map(|(v, s)| (s.min(1.0), gt.node(v)))
                .filter(|(s, n)| *s > 0.0 && n.kind == kind)
                .collect();
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            cands.truncate(k);
            cands
                .into_iter()
                .map(|(s, v)| SimilarPair {
                    u: gs.node(u),
                    v,
                    similarity: s,
                })
                .collect()
        })
        .collect();
    out.pairs = per_source.into_iter().flatten().collect();
    Ok(out)
}

/// Walks and mines pairs for a single ordered domain pair.
pub fn mine_pairs(
    dataset: &MultiDomainDataset,
    d: DomainId,
    d_prime: DomainId,
    k: usize,
    cfg: &WalkConfig,
) -> Result<SimilarPairSet> {
    let profiles = WalkProfiles::compute(dataset, cfg)?;
    mine_pairs_with(dataset, &profiles, d, d_prime, k)
}

/// Pairs for every ordered pair of distinct domains, sorted by domain pair.
pub fn mine_all_pairs(dataset: &MultiDomainDataset, k: usize, cfg: &WalkConfig) -> Result<Vec<SimilarPairSet>> {
    let profiles = WalkProfiles::compute(dataset, cfg)?;
    let w = dataset.num_domains();
    let mut out = Vec::new();
    for d in 0..w {
        for e in 0..w {
            if d != e {
                out.push(mine_pairs_with(dataset, &profiles, d, e, k)?);
            }
        }
    }
    Ok(out)
}

/// Writes `d<TAB>d'<TAB>kind<TAB>u<TAB>v<TAB>similarity` lines.
pub fn write_pairs<'a>(mut w: impl Write, sets: impl IntoIterator<Item = &'a SimilarPairSet>) -> Result<()> {
    for set in sets {
        let (d, e) = set.domain_pair;
        for p in &set.pairs {
            writeln!(w, "{d}\t{e}\t{}\t{}\t{}\t{}", p.u.kind.as_str(), p.u.id, p.v.id, p.similarity)?;
        }
    }
    Ok(())
}

/// Reads pair lines back, grouped by ordered domain pair.
pub fn read_pairs(r: impl BufRead) -> Result<Vec<SimilarPairSet>> {
    let mut grouped: BTreeMap<(DomainId, DomainId), Vec<SimilarPair>> = BTreeMap::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse { line: k + 1, message };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let num = |s: &str| s.trim().parse::<u64>().map_err(|_| bad(format!("`{s}` is not an integer")));
        let d = num(f[0])? as DomainId;
        let e = num(f[1])? as DomainId;
        let kind: NodeKind = f[2].parse().map_err(bad)?;
        let u = NodeId { kind, id: num(f[3])? };
        let v = NodeId { kind, id: num(f[4])? };
        let similarity: f64 = f[5].trim().parse().map_err(|_| bad(format!("bad similarity `{}`", f[5])))?;
        grouped.entry((d, e)).or_default().push(SimilarPair { u, v, similarity });
    }
    Ok(grouped
        .into_iter()
        .map(|(domain_pair, pairs)| SimilarPairSet { domain_pair, pairs })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdgraph::{ingest, Interaction};
    use proptest::prelude::*;

    fn sc(counts: &[u32]) -> StopCountVector {
        StopCountVector {
            source: NodeId::user(0),
            anchor_pair: (0, 1),
            counts: counts.to_vec(),
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((node_similarity(&sc(&[3, 1, 0]), &sc(&[3, 1, 0])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(node_similarity(&sc(&[0, 0, 0]), &sc(&[1, 2, 3])).unwrap(), 0.0);
        assert_eq!(node_similarity(&sc(&[1, 2, 3]), &sc(&[0, 0, 0])).unwrap(), 0.0);
        let s = node_similarity(&sc(&[3, 1, 0]), &sc(&[1, 1, 1])).unwrap();
        assert!((s - 4.0 / (10f64.sqrt() * 3f64.sqrt())).abs() < 1e-15);
        assert!((s - 0.73030).abs() < 1e-5);
        assert!(matches!(node_similarity(&sc(&[1, 2]), &sc(&[1, 2, 3])), Err(Error::AnchorMismatch)));
        let mut other = sc(&[1, 2, 3]);
        other.anchor_pair = (0, 2);
        assert!(matches!(node_similarity(&sc(&[1, 2, 3]), &other), Err(Error::AnchorMismatch)));
    }

    #[test]
    fn single_edge_walks_return_to_source() {
        // u0 - i0 in domain 0, u0 also in domain 1
        let data = ingest([Interaction::new(0, 0, 0), Interaction::new(1, 0, 1)]).unwrap();
        let a = anchors(&data, 0, 1).unwrap();
        let cfg = WalkConfig { walk_length: 4, num_walks: 37, rng_seed: 5 };
        let c = run_walks(data.domain(0).unwrap(), NodeId::user(0), &a, &cfg).unwrap();
        assert_eq!(c.counts, vec![37]);
        // odd length from the item always ends on u0 as well
        let odd = WalkConfig { walk_length: 3, ..cfg };
        let c = run_walks(data.domain(0).unwrap(), NodeId::item(0), &a, &odd).unwrap();
        assert_eq!(c.counts, vec![37]);
    }

    #[test]
    fn unreachable_anchors_give_zero_vector() {
        // domain 0 has two components; the anchor u0 is not reachable from u5
        let data = ingest([
            Interaction::new(0, 0, 0),
            Interaction::new(0, 5, 7),
            Interaction::new(1, 0, 1),
        ])
        .unwrap();
        let a = anchors(&data, 0, 1).unwrap();
        let c = run_walks(data.domain(0).unwrap(), NodeId::user(5), &a, &WalkConfig::default()).unwrap();
        assert!(c.is_zero());
    }

    #[test]
    fn cached_profiles_match_direct_walks() {
        let data = ingest([
            Interaction::new(0, 0, 0),
            Interaction::new(0, 1, 0),
            Interaction::new(0, 1, 1),
            Interaction::new(1, 0, 3),
            Interaction::new(1, 1, 3),
        ])
        .unwrap();
        let cfg = WalkConfig { num_walks: 50, ..Default::default() };
        let profiles = WalkProfiles::compute(&data, &cfg).unwrap();
        let a = anchors(&data, 0, 1).unwrap();
        for n in data.domain(0).unwrap().nodes() {
            assert_eq!(
                profiles.stop_counts(&data, 0, n, &a).unwrap(),
                run_walks(data.domain(0).unwrap(), n, &a, &cfg).unwrap()
            );
        }
    }

    #[test]
    fn disjoint_domains_mine_nothing() {
        let data = ingest([Interaction::new(0, 0, 0), Interaction::new(1, 1, 1)]).unwrap();
        let set = mine_pairs(&data, 0, 1, 1, &WalkConfig::default()).unwrap();
        assert!(set.is_empty());
        assert!(mine_pairs(&data, 0, 1, 0, &WalkConfig::default()).is_err());
    }

    #[test]
    fn identical_profile_is_top1() {
        let data = ingest([
            Interaction::new(0, 0, 0),
            Interaction::new(1, 0, 0),
            Interaction::new(1, 9, 5),
        ])
        .unwrap();
        let set = mine_pairs(&data, 0, 1, 1, &WalkConfig::default()).unwrap();
        // u0 and i0 are anchors; every walk from u0 ends at u0 in both domains
        let top = set.pairs.iter().find(|p| p.u == NodeId::user(0)).unwrap();
        assert_eq!(top.v, NodeId::user(0));
        assert_eq!(top.similarity, 1.0);
    }

    #[test]
    fn pair_file_round_trip() {
        let sets = vec![
            SimilarPairSet {
                domain_pair: (0, 1),
                pairs: vec![SimilarPair { u: NodeId::user(3), v: NodeId::user(4), similarity: 0.1 + 0.2 }],
            },
            SimilarPairSet {
                domain_pair: (1, 0),
                pairs: vec![SimilarPair { u: NodeId::item(7), v: NodeId::item(8), similarity: 1.0 }],
            },
        ];
        let mut buf = Vec::new();
        write_pairs(&mut buf, &sets).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "0\t1\tuser\t3\t4\t0.30000000000000004\n1\t0\titem\t7\t8\t1\n"
        );
        assert_eq!(read_pairs(&buf[..]).unwrap(), sets);
        assert!(read_pairs("0\t1\tuser\t3\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn similarity_is_bounded_symmetric_and_scale_free(
            a in prop::collection::vec(0u32..50, 6),
            b in prop::collection::vec(0u32..50, 6),
            m in 1u32..20,
        ) {
            let (ca, cb) = (sc(&a), sc(&b));
            let s = node_similarity(&ca, &cb).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, node_similarity(&cb, &ca).unwrap());
            let scaled = sc(&b.iter().map(|x| x * m).collect::<Vec<_>>());
            prop_assert!((node_similarity(&ca, &scaled).unwrap() - s).abs() < 1e-12);
        }
    }
}
