//! The disentangled model: one inter-domain embedding table shared by every
//! domain, one intra-domain table per domain, and one alignment projection
//! matrix per domain.
//!
//! A node's representation in domain `d` is the inter-domain encoder output
//! followed by the intra-domain encoder output of `d` (inter first, always).
//! Scores are inner products of representations.
//!
//! Row order is fixed: the inter table follows the dataset's global node
//! order and `intra[d]` follows the local order of domain `d`. A model is
//! only valid for datasets with the same node sets, see
//! [`EdModel::check_compatible`].
//!
//! Either half may be disabled by giving it dimension zero; the ablation
//! variants are built that way.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::encoders::{inter_propagate, propagate, propagate_node, EdgeMask, EncoderKind, GRecConfig};
use crate::error::{Error, Result};
use crate::mdgraph::{DomainId, MultiDomainDataset, NodeId, NodeKind};
use crate::rng::{stream, tag};
use crate::scalar::{dot, Scalar};
use crate::table::EmbeddingTable;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub inter_dim: usize,
    pub intra_dim: usize,
    /// Output dimension of the alignment projections.
    pub align_dim: usize,
    pub encoder: EncoderKind,
    pub grec: GRecConfig,
    /// Half-width of the uniform initializer. `None` uses `1/sqrt(dim)` of
    /// the table being initialized (`1/sqrt(intra_dim)` for projections).
    pub init_scale: Option<f64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            inter_dim: 64,
            intra_dim: 64,
            align_dim: 64,
            encoder: EncoderKind::GRec,
            grec: GRecConfig::default(),
            init_scale: None,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.inter_dim == 0 && self.intra_dim == 0 {
            return Err(Error::InvalidConfig("at least one embedding dimension must be positive".into()));
        }
        if let Some(s) = self.init_scale {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!("init scale must be finite and non-negative, got {s}")));
            }
        }
        self.grec.validate()
    }

    pub fn repr_dim(&self) -> usize {
        self.inter_dim + self.intra_dim
    }
}

/// Identifies one trainable parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamBlock {
    Inter,
    Intra(DomainId),
    Proj(DomainId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EdModel<T> {
    spec: ModelSpec,
    inter: EmbeddingTable<T>,
    intra: Vec<EmbeddingTable<T>>,
    /// Row-major `intra_dim x align_dim`.
    proj: Vec<Vec<T>>,
}

/// Concatenated inter/intra representation of one node in one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Representation<T>(pub Vec<T>);

impl<T: Scalar> Representation<T> {
    pub fn dot(&self, other: &Self) -> T {
        dot(&self.0, &other.0)
    }
}

fn uniform_fill<T: Scalar>(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<T> {
    (0..len)
        .map(|_| {
            if scale == 0.0 {
                T::zero()
            } else {
                T::of(rng.random_range(-scale..=scale))
            }
        })
        .collect()
}

impl<T: Scalar> EdModel<T> {
    /// Random initialization. Inter, intra and projection blocks draw from
    /// independent streams derived from `seed`.
    pub fn init(spec: ModelSpec, dataset: &MultiDomainDataset, seed: u64) -> Result<Self> {
        spec.validate()?;
        let scale = |dim: usize| {
            spec.init_scale
                .unwrap_or(if dim == 0 { 0.0 } else { 1.0 / (dim as f64).sqrt() })
        };
        let nodes: Vec<NodeId> = dataset.nodes().collect();
        let mut rng = stream(seed, &[tag::INIT, 0]);
        let inter = EmbeddingTable::from_rows(
            spec.inter_dim,
            nodes.clone(),
            uniform_fill(&mut rng, nodes.len() * spec.inter_dim, scale(spec.inter_dim)),
        )?;
        let mut intra = Vec::with_capacity(dataset.num_domains());
        let mut proj = Vec::with_capacity(dataset.num_domains());
        for g in dataset.domains() {
            let d = g.domain() as u64;
            let mut rng = stream(seed, &[tag::INIT, 1, d]);
            intra.push(EmbeddingTable::from_rows(
                spec.intra_dim,
                g.nodes().collect(),
                uniform_fill(&mut rng, g.num_nodes() * spec.intra_dim, scale(spec.intra_dim)),
            )?);
            let mut rng = stream(seed, &[tag::INIT, 2, d]);
            proj.push(uniform_fill(&mut rng, spec.intra_dim * spec.align_dim, scale(spec.intra_dim)));
        }
        Ok(EdModel { spec, inter, intra, proj })
    }

    /// Assembles a model from explicit parts, checking shapes.
    pub fn from_parts(
        spec: ModelSpec,
        inter: EmbeddingTable<T>,
        intra: Vec<EmbeddingTable<T>>,
        proj: Vec<Vec<T>>,
    ) -> Result<Self> {
        spec.validate()?;
        if inter.dim() != spec.inter_dim {
            return Err(Error::DimensionMismatch { expected: spec.inter_dim, found: inter.dim() });
        }
        if intra.len() != proj.len() {
            return Err(Error::DimensionMismatch { expected: intra.len(), found: proj.len() });
        }
        for t in &intra {
            if t.dim() != spec.intra_dim {
                return Err(Error::DimensionMismatch { expected: spec.intra_dim, found: t.dim() });
            }
        }
        for p in &proj {
            if p.len() != spec.intra_dim * spec.align_dim {
                return Err(Error::DimensionMismatch {
                    expected: spec.intra_dim * spec.align_dim,
                    found: p.len(),
                });
            }
        }
        Ok(EdModel { spec, inter, intra, proj })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_domains(&self) -> usize {
        self.intra.len()
    }

    pub fn inter(&self) -> &EmbeddingTable<T> {
        &self.inter
    }

    pub fn intra(&self, d: DomainId) -> &EmbeddingTable<T> {
        &self.intra[d]
    }

    pub fn intra_tables(&self) -> &[EmbeddingTable<T>] {
        &self.intra
    }

    pub fn inter_mut(&mut self) -> &mut EmbeddingTable<T> {
        &mut self.inter
    }

    pub fn intra_mut(&mut self, d: DomainId) -> &mut EmbeddingTable<T> {
        &mut self.intra[d]
    }

    pub fn proj(&self, d: DomainId) -> &[T] {
        &self.proj[d]
    }

    pub fn proj_mut(&mut self, d: DomainId) -> &mut [T] {
        &mut self.proj[d]
    }

    /// Block order used by gradients and optimizer state: inter, every
    /// intra table, every projection.
    pub fn block_ids(&self) -> Vec<ParamBlock> {
        let w = self.num_domains();
        std::iter::once(ParamBlock::Inter)
            .chain((0..w).map(ParamBlock::Intra))
            .chain((0..w).map(ParamBlock::Proj))
            .collect()
    }

    pub fn blocks(&self) -> Vec<&[T]> {
        std::iter::once(self.inter.data())
            .chain(self.intra.iter().map(|t| t.data()))
            .chain(self.proj.iter().map(Vec::as_slice))
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [T]> {
        std::iter::once(self.inter.data_mut())
            .chain(self.intra.iter_mut().map(|t| t.data_mut()))
            .chain(self.proj.iter_mut().map(Vec::as_mut_slice))
            .collect()
    }

    pub fn block(&self, id: ParamBlock) -> &[T] {
        match id {
            ParamBlock::Inter => self.inter.data(),
            ParamBlock::Intra(d) => self.intra[d].data(),
            ParamBlock::Proj(d) => &self.proj[d],
        }
    }

    pub fn block_mut(&mut self, id: ParamBlock) -> &mut [T] {
        match id {
            ParamBlock::Inter => self.inter.data_mut(),
            ParamBlock::Intra(d) => self.intra[d].data_mut(),
            ParamBlock::Proj(d) => &mut self.proj[d],
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Sum of squares of every trainable scalar.
    pub fn l2_norm_sq(&self) -> T {
        self.blocks().iter().flat_map(|b| b.iter()).map(|&v| v * v).sum()
    }

    pub fn cast<U: Scalar>(&self) -> EdModel<U> {
        EdModel {
            spec: self.spec.clone(),
            inter: self.inter.cast(),
            intra: self.intra.iter().map(EmbeddingTable::cast).collect(),
            proj: self.proj.iter().map(|p| p.iter().map(|v| U::of(v.as_f64())).collect()).collect(),
        }
    }

    /// Errors unless table rows line up with the dataset's node orders.
    pub fn check_compatible(&self, dataset: &MultiDomainDataset) -> Result<()> {
        if self.num_domains() != dataset.num_domains() {
            return Err(Error::InvalidConfig(format!(
                "model has {} domains, dataset has {}",
                self.num_domains(),
                dataset.num_domains()
            )));
        }
        if !self.inter.nodes().iter().copied().eq(dataset.nodes()) {
            return Err(Error::InvalidConfig("inter table rows do not match dataset nodes".into()));
        }
        for (t, g) in self.intra.iter().zip(dataset.domains()) {
            if !t.nodes().iter().copied().eq(g.nodes()) {
                return Err(Error::InvalidConfig(format!(
                    "intra table of domain {} does not match its graph",
                    g.domain()
                )));
            }
        }
        Ok(())
    }

    /// Encoder outputs for every node of every domain.
    pub fn encode(&self, dataset: &MultiDomainDataset, masks: Option<&[EdgeMask]>) -> Result<Encoded<T>> {
        let all: Vec<DomainId> = (0..dataset.num_domains()).collect();
        self.encode_domains(dataset, masks, &all)
    }

    /// Encoder outputs with intra outputs computed only for `domains`; other
    /// entries of `Encoded::intra` are left empty.
    pub fn encode_domains(
        &self,
        dataset: &MultiDomainDataset,
        masks: Option<&[EdgeMask]>,
        domains: &[DomainId],
    ) -> Result<Encoded<T>> {
        self.check_compatible(dataset)?;
        let inter = match (self.spec.encoder, self.spec.inter_dim) {
            (_, 0) => Vec::new(),
            (EncoderKind::Mf, _) => self.inter.data().to_vec(),
            (EncoderKind::GRec, dim) => inter_propagate(dataset, self.inter.data(), dim, &self.spec.grec, masks)?,
        };
        let mut intra = vec![Vec::new(); dataset.num_domains()];
        for &d in domains {
            let g = dataset.domain(d)?;
            intra[d] = match (self.spec.encoder, self.spec.intra_dim) {
                (_, 0) => Vec::new(),
                (EncoderKind::Mf, _) => self.intra[d].data().to_vec(),
                (EncoderKind::GRec, dim) => {
                    propagate(g, self.intra[d].data(), dim, &self.spec.grec, masks.map(|m| &m[d]))?
                }
            };
        }
        Ok(Encoded {
            inter_dim: self.spec.inter_dim,
            intra_dim: self.spec.intra_dim,
            inter,
            intra,
        })
    }

    /// Representation of one node, computed from its neighborhood only.
    pub fn represent(
        &self,
        dataset: &MultiDomainDataset,
        node: NodeId,
        d: DomainId,
        masks: Option<&[EdgeMask]>,
    ) -> Result<Representation<T>> {
        self.check_compatible(dataset)?;
        let graph = dataset.domain(d)?;
        let local = graph.local(node).ok_or(Error::NodeNotInDomain { node, domain: d })?;
        let cfg = &self.spec.grec;
        let mut z = Vec::with_capacity(self.spec.repr_dim());

        let gi = dataset.global_index(node).expect("domain node is in the dataset");
        let di = self.spec.inter_dim;
        match self.spec.encoder {
            EncoderKind::Mf => z.extend_from_slice(self.inter.row_at(gi)),
            EncoderKind::GRec => {
                let mut acc = vec![T::zero(); di];
                if di > 0 {
                    for &w in dataset.domains_of_index(gi) {
                        let g = dataset.domain(w)?;
                        let x: Vec<T> = dataset
                            .local_to_global(w)
                            .iter()
                            .flat_map(|&k| self.inter.row_at(k).iter().copied())
                            .collect();
                        let lw = g.local(node).expect("node listed in domain");
                        let y = propagate_node(g, &x, di, cfg, masks.map(|m| &m[w]), lw)?;
                        for (a, b) in acc.iter_mut().zip(y) {
                            *a += b;
                        }
                    }
                }
                z.extend(acc);
            }
        }
        match self.spec.encoder {
            EncoderKind::Mf => z.extend_from_slice(self.intra[d].row_at(local)),
            EncoderKind::GRec => {
                if self.spec.intra_dim > 0 {
                    z.extend(propagate_node(
                        graph,
                        self.intra[d].data(),
                        self.spec.intra_dim,
                        cfg,
                        masks.map(|m| &m[d]),
                        local,
                    )?);
                }
            }
        }
        Ok(Representation(z))
    }

    pub fn score(&self, dataset: &MultiDomainDataset, user: NodeId, item: NodeId, d: DomainId) -> Result<T> {
        if user.kind != NodeKind::User || item.kind != NodeKind::Item {
            return Err(Error::InvalidConfig(format!("score expects (user, item), got ({user}, {item})")));
        }
        let zu = self.represent(dataset, user, d, None)?;
        let zi = self.represent(dataset, item, d, None)?;
        Ok(zu.dot(&zi))
    }

    /// Top-`n` items of domain `d` for `user`, excluding `exclude`.
    pub fn recommend_topn(
        &self,
        dataset: &MultiDomainDataset,
        user: u64,
        d: DomainId,
        n: usize,
        exclude: &HashSet<u64>,
    ) -> Result<Vec<(u64, T)>> {
        let enc = self.encode_domains(dataset, None, &[d])?;
        enc.recommend_topn(dataset, user, d, n, exclude)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = BTreeMap::new();
        manifest.insert("format".to_string(), "edda-checkpoint-1".to_string());
        manifest.insert("encoder".to_string(), self.spec.encoder.as_str().to_string());
        manifest.insert("inter_dim".to_string(), self.spec.inter_dim.to_string());
        manifest.insert("intra_dim".to_string(), self.spec.intra_dim.to_string());
        manifest.insert("align_dim".to_string(), self.spec.align_dim.to_string());
        manifest.insert("num_layers".to_string(), self.spec.grec.num_layers.to_string());
        manifest.insert("alpha".to_string(), self.spec.grec.alpha.to_string());
        manifest.insert("num_domains".to_string(), self.num_domains().to_string());
        manifest.insert("inter".to_string(), "inter.emb".to_string());
        self.inter.save(dir.join("inter.emb"))?;
        for d in 0..self.num_domains() {
            let intra = format!("intra_{d}.emb");
            let proj = format!("proj_{d}.emb");
            self.intra[d].save(dir.join(&intra))?;
            self.proj_table(d)?.save(dir.join(&proj))?;
            manifest.insert(format!("intra.{d}"), intra);
            manifest.insert(format!("proj.{d}"), proj);
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
        writeln!(f, "# projection files store matrix row r as node (user, r)")?;
        for (k, v) in &manifest {
            writeln!(f, "{k} = {v}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let kv = parse_key_values(&text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("bad `{k}` in checkpoint manifest")))
        };
        if get("format")? != "edda-checkpoint-1" {
            return Err(Error::Format("unknown checkpoint format".into()));
        }
        let spec = ModelSpec {
            inter_dim: num("inter_dim")?,
            intra_dim: num("intra_dim")?,
            align_dim: num("align_dim")?,
            encoder: get("encoder")?.parse().map_err(Error::Format)?,
            grec: GRecConfig {
                num_layers: num("num_layers")?,
                alpha: get("alpha")?
                    .parse()
                    .map_err(|_| Error::Format("bad `alpha` in checkpoint manifest".into()))?,
            },
            init_scale: None,
        };
        let w = num("num_domains")?;
        let inter = EmbeddingTable::load(dir.join(get("inter")?))?;
        let mut intra = Vec::with_capacity(w);
        let mut proj = Vec::with_capacity(w);
        for d in 0..w {
            intra.push(EmbeddingTable::load(dir.join(get(&format!("intra.{d}"))?))?);
            let p: EmbeddingTable<T> = EmbeddingTable::load(dir.join(get(&format!("proj.{d}"))?))?;
            proj.push(p.into_data());
        }
        Self::from_parts(spec, inter, intra, proj)
    }

    fn proj_table(&self, d: DomainId) -> Result<EmbeddingTable<T>> {
        let rows = (0..self.spec.intra_dim as u64).map(NodeId::user).collect();
        EmbeddingTable::from_rows(self.spec.align_dim, rows, self.proj[d].clone())
    }
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: k + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        out.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

/// Encoder outputs: the inter part in global node order, the intra part per
/// domain in local node order.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub inter_dim: usize,
    pub intra_dim: usize,
    pub inter: Vec<T>,
    pub intra: Vec<Vec<T>>,
}

impl<T: Scalar> Encoded<T> {
    pub fn inter_row(&self, global: usize) -> &[T] {
        &self.inter[global * self.inter_dim..(global + 1) * self.inter_dim]
    }

    pub fn intra_row(&self, d: DomainId, local: usize) -> &[T] {
        &self.intra[d][local * self.intra_dim..(local + 1) * self.intra_dim]
    }

    /// Score from local indices in domain `d`.
    pub fn score_local(&self, dataset: &MultiDomainDataset, d: DomainId, u: usize, i: usize) -> T {
        let map = dataset.local_to_global(d);
        dot(self.inter_row(map[u]), self.inter_row(map[i])) + dot(self.intra_row(d, u), self.intra_row(d, i))
    }

    pub fn representation(&self, dataset: &MultiDomainDataset, node: NodeId, d: DomainId) -> Result<Representation<T>> {
        let g = dataset.domain(d)?;
        let local = g.local(node).ok_or(Error::NodeNotInDomain { node, domain: d })?;
        let gi = dataset.local_to_global(d)[local];
        let mut z = self.inter_row(gi).to_vec();
        z.extend_from_slice(self.intra_row(d, local));
        Ok(Representation(z))
    }

    pub fn recommend_topn(
        &self,
        dataset: &MultiDomainDataset,
        user: u64,
        d: DomainId,
        n: usize,
        exclude: &HashSet<u64>,
    ) -> Result<Vec<(u64, T)>> {
        let g = dataset.domain(d)?;
        let node = NodeId::user(user);
        let u = g.local(node).ok_or(Error::NodeNotInDomain { node, domain: d })?;
        let mut scored: Vec<(u64, T)> = g
            .items()
            .iter()
            .enumerate()
            .filter(|(_, id)| !exclude.contains(id))
            .map(|(k, &id)| (id, self.score_local(dataset, d, u, g.item_local(k))))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        scored.truncate(n);
        Ok(scored)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdgraph::{ingest, Interaction};

    fn toy() -> MultiDomainDataset {
        ingest([
            Interaction::new(0, 0, 0),
            Interaction::new(0, 1, 0),
            Interaction::new(0, 1, 1),
            Interaction::new(0, 2, 2),
            Interaction::new(1, 1, 5),
            Interaction::new(1, 3, 5),
            Interaction::new(1, 3, 6),
        ])
        .unwrap()
    }

    fn small_spec(encoder: EncoderKind) -> ModelSpec {
        ModelSpec {
            inter_dim: 3,
            intra_dim: 2,
            align_dim: 2,
            encoder,
            grec: GRecConfig::default(),
            init_scale: None,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let data = toy();
        let a = EdModel::<f64>::init(small_spec(EncoderKind::GRec), &data, 11).unwrap();
        let b = EdModel::<f64>::init(small_spec(EncoderKind::GRec), &data, 11).unwrap();
        let c = EdModel::<f64>::init(small_spec(EncoderKind::GRec), &data, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.inter().data(), c.inter().data());
        assert_ne!(a.intra(0).data(), c.intra(0).data());
        // intra tables of different domains come from different streams
        assert_ne!(&a.intra(0).data()[..4], &a.intra(1).data()[..4]);
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.inter().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_scale_gives_zero_model() {
        let data = toy();
        let spec = ModelSpec { init_scale: Some(0.0), ..small_spec(EncoderKind::GRec) };
        let m = EdModel::<f64>::init(spec, &data, 3).unwrap();
        assert!(m.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn parameter_blocks_partition_the_model() {
        let data = toy();
        let m = EdModel::<f64>::init(small_spec(EncoderKind::GRec), &data, 1).unwrap();
        let expected = data.num_nodes() * 3
            + data.domains().iter().map(|g| g.num_nodes() * 2).sum::<usize>()
            + 2 * 2 * 2;
        assert_eq!(m.num_params(), expected);
        assert_eq!(m.block_ids().len(), 1 + 2 * data.num_domains());
        let ids = m.block_ids();
        let sizes: usize = ids.iter().map(|&b| m.block(b).len()).sum();
        assert_eq!(sizes, expected);
    }

    #[test]
    fn mf_representation_is_raw_concatenation() {
        let data = toy();
        let m = EdModel::<f64>::init(small_spec(EncoderKind::Mf), &data, 5).unwrap();
        let node = NodeId::user(1);
        let z = m.represent(&data, node, 1, None).unwrap();
        let mut want = m.inter().row(node).unwrap().to_vec();
        want.extend_from_slice(m.intra(1).row(node).unwrap());
        assert_eq!(z.0, want);
    }

    #[test]
    fn zero_layer_grec_matches_mf_for_single_domain_nodes() {
        let data = toy();
        let grec = ModelSpec { grec: GRecConfig { num_layers: 0, alpha: 0.1 }, ..small_spec(EncoderKind::GRec) };
        let g = EdModel::<f64>::init(grec, &data, 5).unwrap();
        let m = EdModel::<f64>::init(small_spec(EncoderKind::Mf), &data, 5).unwrap();
        for node in [NodeId::user(0), NodeId::item(0), NodeId::item(1)] {
            assert_eq!(g.represent(&data, node, 0, None).unwrap(), m.represent(&data, node, 0, None).unwrap());
        }
        // alpha = 1 behaves the same way
        let a1 = ModelSpec { grec: GRecConfig { num_layers: 2, alpha: 1.0 }, ..small_spec(EncoderKind::GRec) };
        let a1 = EdModel::<f64>::init(a1, &data, 5).unwrap();
        assert_eq!(
            a1.score(&data, NodeId::user(0), NodeId::item(1), 0).unwrap(),
            m.score(&data, NodeId::user(0), NodeId::item(1), 0).unwrap()
        );
    }

    #[test]
    fn two_node_domain_representation() {
        let data = ingest([Interaction::new(0, 0, 0)]).unwrap();
        let spec = ModelSpec {
            inter_dim: 2,
            intra_dim: 2,
            align_dim: 2,
            encoder: EncoderKind::GRec,
            grec: GRecConfig { num_layers: 1, alpha: 0.1 },
            init_scale: None,
        };
        let nodes = vec![NodeId::user(0), NodeId::item(0)];
        let inter = EmbeddingTable::from_rows(2, nodes.clone(), vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let intra = EmbeddingTable::from_rows(2, nodes, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let m = EdModel::from_parts(spec, inter, vec![intra], vec![vec![0.0; 4]]).unwrap();
        let zu = m.represent(&data, NodeId::user(0), 0, None).unwrap();
        let want = [0.1, 0.9, 0.2, 1.8];
        for (a, b) in zu.0.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let zi = m.represent(&data, NodeId::item(0), 0, None).unwrap();
        let s = m.score(&data, NodeId::user(0), NodeId::item(0), 0).unwrap();
        assert!((s - zu.dot(&zi)).abs() < 1e-15);
        assert!(matches!(
            m.represent(&data, NodeId::user(9), 0, None),
            Err(Error::NodeNotInDomain { .. })
        ));
    }

    #[test]
    fn per_node_and_batch_representations_agree() {
        let data = toy();
        for enc in [EncoderKind::GRec, EncoderKind::Mf] {
            let m = EdModel::<f64>::init(small_spec(enc), &data, 9).unwrap();
            let batch = m.encode(&data, None).unwrap();
            for g in data.domains() {
                for n in g.nodes() {
                    let a = m.represent(&data, n, g.domain(), None).unwrap();
                    let b = batch.representation(&data, n, g.domain()).unwrap();
                    for (x, y) in a.0.iter().zip(&b.0) {
                        assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn score_hand_dot_product() {
        assert_eq!(Representation(vec![1.0, 2.0]).dot(&Representation(vec![3.0, -1.0])), 1.0);
        let z = Representation(vec![0.5, -2.0, 3.0]);
        assert_eq!(z.dot(&z), 0.25 + 4.0 + 9.0);
        assert_eq!(Representation(vec![1.0, 0.0]).dot(&Representation(vec![0.0, 7.0])), 0.0);
    }

    #[test]
    fn topn_matches_brute_force_sort() {
        // three items; MF with hand-set embeddings, intra disabled
        let data = ingest([
            Interaction::new(0, 0, 10),
            Interaction::new(0, 0, 11),
            Interaction::new(0, 1, 12),
        ])
        .unwrap();
        let spec = ModelSpec { inter_dim: 1, intra_dim: 0, align_dim: 0, encoder: EncoderKind::Mf, ..Default::default() };
        let nodes: Vec<NodeId> = data.nodes().collect();
        // users 0,1 then items 10,11,12
        let inter = EmbeddingTable::from_rows(1, nodes, vec![1.0, 1.0, 0.5, 2.0, 0.5]).unwrap();
        let intra = vec![EmbeddingTable::zeros(0, data.domain(0).unwrap().nodes().collect()).unwrap()];
        let m = EdModel::from_parts(spec, inter, intra, vec![vec![]]).unwrap();
        let ranked = m.recommend_topn(&data, 0, 0, 10, &HashSet::new()).unwrap();
        assert_eq!(ranked, vec![(11, 2.0), (10, 0.5), (12, 0.5)]);
        let top1 = m.recommend_topn(&data, 0, 0, 1, &HashSet::new()).unwrap();
        assert_eq!(top1, vec![(11, 2.0)]);
        let none = m.recommend_topn(&data, 0, 0, 3, &[10, 11, 12].into_iter().collect()).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = toy();
        let m = EdModel::<f64>::init(small_spec(EncoderKind::GRec), &data, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = EdModel::<f64>::load(dir.path()).unwrap();
        assert_eq!(back, m);
        back.check_compatible(&data).unwrap();
        let other = ingest([Interaction::new(0, 0, 0)]).unwrap();
        assert!(back.check_compatible(&other).is_err());
    }
}
