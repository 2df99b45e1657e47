//! Multi-domain interaction data.
//!
//! A dataset is a list of bipartite user-item graphs, one per domain. Users and
//! items are identified by integer ids that are global across domains: the same
//! id in two domains is the same entity, and such shared entities are the
//! anchors that connect domains.
//!
//! Every [`DomainGraph`] numbers its nodes locally, users first (ascending id)
//! followed by items (ascending id). Adjacency is stored once in CSR form over
//! that local numbering, so the user->item and item->user views are the same
//! arrays and are consistent by construction.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub type DomainId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    User,
    Item,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::User => "user",
            NodeKind::Item => "item",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            NodeKind::User => 0,
            NodeKind::Item => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(NodeKind::User),
            1 => Some(NodeKind::Item),
            _ => None,
        }
    }
}

impl std::str::FromStr for NodeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "user" | "u" => Ok(NodeKind::User),
            "item" | "i" => Ok(NodeKind::Item),
            other => Err(format!("unknown node kind `{other}`")),
        }
    }
}

/// A user or item. Ordering is by kind (users first) and then by id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub kind: NodeKind,
    pub id: u64,
}

impl NodeId {
    pub const fn user(id: u64) -> Self {
        NodeId { kind: NodeKind::User, id }
    }

    pub const fn item(id: u64) -> Self {
        NodeId { kind: NodeKind::Item, id }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NodeKind::User => write!(f, "u{}", self.id),
            NodeKind::Item => write!(f, "i{}", self.id),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Interaction {
    pub domain: DomainId,
    pub user: u64,
    pub item: u64,
}

impl Interaction {
    pub fn new(domain: DomainId, user: u64, item: u64) -> Self {
        Interaction { domain, user, item }
    }
}

/// Immutable bipartite interaction graph of one domain.
#[derive(Clone, Debug)]
pub struct DomainGraph {
    domain: DomainId,
    users: Vec<u64>,
    items: Vec<u64>,
    user_pos: HashMap<u64, usize>,
    item_pos: HashMap<u64, usize>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    neighbor_edges: Vec<usize>,
    /// `(user_local, item_local)` in local node numbering, sorted; the
    /// position of an edge in this list is its edge id.
    edges: Vec<(usize, usize)>,
}

impl DomainGraph {
    /// Builds the graph spanned by `pairs` of `(user, item)` ids. Duplicates
    /// are dropped; only nodes with at least one interaction are present.
    pub fn new(domain: DomainId, pairs: impl IntoIterator<Item = (u64, u64)>) -> Self {
        let set: BTreeSet<(u64, u64)> = pairs.into_iter().collect();
        let users: BTreeSet<u64> = set.iter().map(|p| p.0).collect();
        let items: BTreeSet<u64> = set.iter().map(|p| p.1).collect();
        Self::assemble(domain, users.into_iter().collect(), items.into_iter().collect(), set)
    }

    /// Builds a graph over an explicit node set, which may contain nodes that
    /// have no edge in `pairs`. Used for training graphs derived from a split,
    /// where held-out nodes must keep their identity.
    pub fn with_nodes(
        domain: DomainId,
        users: impl IntoIterator<Item = u64>,
        items: impl IntoIterator<Item = u64>,
        pairs: impl IntoIterator<Item = (u64, u64)>,
    ) -> Result<Self> {
        let users: BTreeSet<u64> = users.into_iter().collect();
        let items: BTreeSet<u64> = items.into_iter().collect();
        let set: BTreeSet<(u64, u64)> = pairs.into_iter().collect();
        for &(u, i) in &set {
            if !users.contains(&u) {
                return Err(Error::MissingNode {
                    node: NodeId::user(u),
                    context: format!("node set of domain {domain}"),
                });
            }
            if !items.contains(&i) {
                return Err(Error::MissingNode {
                    node: NodeId::item(i),
                    context: format!("node set of domain {domain}"),
                });
            }
        }
        Ok(Self::assemble(domain, users.into_iter().collect(), items.into_iter().collect(), set))
    }

    fn assemble(
        domain: DomainId,
        users: Vec<u64>,
        items: Vec<u64>,
        pairs: BTreeSet<(u64, u64)>,
    ) -> Self {
        let user_pos: HashMap<u64, usize> = users.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        let item_pos: HashMap<u64, usize> = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let nu = users.len();
        let n = nu + items.len();

        // BTreeSet iteration yields pairs sorted by user id then item id, which is
        // also sorted by local index.
        let edges: Vec<(usize, usize)> = pairs
            .iter()
            .map(|(u, i)| (user_pos[u], nu + item_pos[i]))
            .collect();

        let mut degree = vec![0usize; n];
        for &(u, i) in &edges {
            degree[u] += 1;
            degree[i] += 1;
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut cursor = offsets[..n].to_vec();
        let mut neighbors = vec![0; 2 * edges.len()];
        let mut neighbor_edges = vec![0; 2 * edges.len()];
        for (e, &(u, i)) in edges.iter().enumerate() {
            neighbors[cursor[u]] = i;
            neighbor_edges[cursor[u]] = e;
            cursor[u] += 1;
            neighbors[cursor[i]] = u;
            neighbor_edges[cursor[i]] = e;
            cursor[i] += 1;
        }

        DomainGraph {
            domain,
            users,
            items,
            user_pos,
            item_pos,
            offsets,
            neighbors,
            neighbor_edges,
            edges,
        }
    }

    pub fn domain(&self) -> DomainId {
        self.domain
    }

    pub fn users(&self) -> &[u64] {
        &self.users
    }

    pub fn items(&self) -> &[u64] {
        &self.items
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.users.len() + self.items.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Node at a local index.
    pub fn node(&self, local: usize) -> NodeId {
        let nu = self.users.len();
        if local < nu {
            NodeId::user(self.users[local])
        } else {
            NodeId::item(self.items[local - nu])
        }
    }

    /// Local index of a node, if the node belongs to this domain.
    pub fn local(&self, node: NodeId) -> Option<usize> {
        match node.kind {
            NodeKind::User => self.user_pos.get(&node.id).copied(),
            NodeKind::Item => self.item_pos.get(&node.id).map(|k| k + self.users.len()),
        }
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.local(node).is_some()
    }

    /// Local index of the `k`-th item.
    pub fn item_local(&self, k: usize) -> usize {
        self.users.len() + k
    }

    pub fn is_user(&self, local: usize) -> bool {
        local < self.users.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.num_nodes()).map(|k| self.node(k))
    }

    pub fn degree(&self, local: usize) -> usize {
        self.offsets[local + 1] - self.offsets[local]
    }

    pub fn neighbors(&self, local: usize) -> &[usize] {
        &self.neighbors[self.offsets[local]..self.offsets[local + 1]]
    }

    /// Edge ids aligned with [`DomainGraph::neighbors`].
    pub fn neighbor_edges(&self, local: usize) -> &[usize] {
        &self.neighbor_edges[self.offsets[local]..self.offsets[local + 1]]
    }

    /// Edges as `(user_local, item_local)`; the index is the edge id.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Interactions as `(user id, item id)` pairs, sorted.
    pub fn interactions(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let nu = self.users.len();
        self.edges
            .iter()
            .map(move |&(u, i)| (self.users[u], self.items[i - nu]))
    }

    pub fn has_edge(&self, user: u64, item: u64) -> bool {
        match (self.user_pos.get(&user), self.item_pos.get(&item)) {
            (Some(&u), Some(&i)) => {
                let target = self.users.len() + i;
                self.neighbors(u).binary_search(&target).is_ok()
            }
            _ => false,
        }
    }
}

/// The full set of domains plus a global numbering of every user and item.
///
/// Global indices place all users (ascending id) before all items (ascending
/// id); this is the row order of the inter-domain embedding table.
#[derive(Clone, Debug)]
pub struct MultiDomainDataset {
    domains: Vec<DomainGraph>,
    users: Vec<u64>,
    items: Vec<u64>,
    user_pos: HashMap<u64, usize>,
    item_pos: HashMap<u64, usize>,
    local_to_global: Vec<Vec<usize>>,
    node_domains: Vec<Vec<DomainId>>,
}

impl MultiDomainDataset {
    /// Wraps prebuilt graphs. Graph `k` must carry domain id `k` and have at
    /// least one edge.
    pub fn from_graphs(domains: Vec<DomainGraph>) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::NoDomains);
        }
        for (k, g) in domains.iter().enumerate() {
            if g.domain() != k {
                return Err(Error::InvalidConfig(format!(
                    "graph at position {k} carries domain id {}",
                    g.domain()
                )));
            }
            if g.num_edges() == 0 {
                return Err(Error::EmptyDomain(k));
            }
        }
        let users: BTreeSet<u64> = domains.iter().flat_map(|g| g.users().iter().copied()).collect();
        let items: BTreeSet<u64> = domains.iter().flat_map(|g| g.items().iter().copied()).collect();
        let users: Vec<u64> = users.into_iter().collect();
        let items: Vec<u64> = items.into_iter().collect();
        let user_pos: HashMap<u64, usize> = users.iter().enumerate().map(|(k, &u)| (u, k)).collect();
        let item_pos: HashMap<u64, usize> = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let nu = users.len();

        let mut node_domains = vec![Vec::new(); users.len() + items.len()];
        let local_to_global = domains
            .iter()
            .map(|g| {
                let map: Vec<usize> = g
                    .users()
                    .iter()
                    .map(|u| user_pos[u])
                    .chain(g.items().iter().map(|i| nu + item_pos[i]))
                    .collect();
                for &gi in &map {
                    node_domains[gi].push(g.domain());
                }
                map
            })
            .collect();

        Ok(MultiDomainDataset {
            domains,
            users,
            items,
            user_pos,
            item_pos,
            local_to_global,
            node_domains,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domains(&self) -> &[DomainGraph] {
        &self.domains
    }

    pub fn domain(&self, d: DomainId) -> Result<&DomainGraph> {
        self.domains.get(d).ok_or(Error::UnknownDomain(d))
    }

    /// Number of distinct users and items over all domains.
    pub fn num_nodes(&self) -> usize {
        self.users.len() + self.items.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.domains.iter().map(DomainGraph::num_edges).sum()
    }

    pub fn global_index(&self, node: NodeId) -> Option<usize> {
        match node.kind {
            NodeKind::User => self.user_pos.get(&node.id).copied(),
            NodeKind::Item => self.item_pos.get(&node.id).map(|k| k + self.users.len()),
        }
    }

    pub fn global_node(&self, index: usize) -> NodeId {
        let nu = self.users.len();
        if index < nu {
            NodeId::user(self.users[index])
        } else {
            NodeId::item(self.items[index - nu])
        }
    }

    /// All nodes in global order.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.num_nodes()).map(|k| self.global_node(k))
    }

    /// Global index of every local node of domain `d`.
    pub fn local_to_global(&self, d: DomainId) -> &[usize] {
        &self.local_to_global[d]
    }

    /// Domains containing the node at a global index, ascending.
    pub fn domains_of_index(&self, index: usize) -> &[DomainId] {
        &self.node_domains[index]
    }

    pub fn domains_of(&self, node: NodeId) -> &[DomainId] {
        match self.global_index(node) {
            Some(k) => &self.node_domains[k],
            None => &[],
        }
    }

    /// All interactions, ordered by domain then (user, item).
    pub fn interactions(&self) -> impl Iterator<Item = Interaction> + '_ {
        self.domains.iter().flat_map(|g| {
            g.interactions()
                .map(move |(u, i)| Interaction::new(g.domain(), u, i))
        })
    }
}

/// Builds a dataset from interaction records, dropping duplicates.
///
/// Domain ids must be dense from zero: every id below the largest one must
/// carry at least one interaction.
pub fn ingest(records: impl IntoIterator<Item = Interaction>) -> Result<MultiDomainDataset> {
    let mut per_domain: Vec<Vec<(u64, u64)>> = Vec::new();
    for r in records {
        if r.domain >= per_domain.len() {
            per_domain.resize_with(r.domain + 1, Vec::new);
        }
        per_domain[r.domain].push((r.user, r.item));
    }
    if per_domain.is_empty() {
        return Err(Error::NoDomains);
    }
    if let Some(d) = per_domain.iter().position(Vec::is_empty) {
        return Err(Error::EmptyDomain(d));
    }
    let graphs = per_domain
        .into_iter()
        .enumerate()
        .map(|(d, pairs)| DomainGraph::new(d, pairs))
        .collect();
    MultiDomainDataset::from_graphs(graphs)
}

/// Parses the tab-separated interaction format:
/// `domain_id<TAB>user_id<TAB>item_id[<TAB>ignored...]`, `#` starts a comment
/// line, blank lines are skipped. Line numbers in errors are 1-based.
pub fn read_interactions(reader: impl BufRead) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let mut next = |name: &str| -> Result<u64> {
            let raw = fields.next().ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("missing {name} field"),
            })?;
            raw.trim().parse::<u64>().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("{name} `{raw}` is not a non-negative integer"),
            })
        };
        let domain = next("domain_id")?;
        let user = next("user_id")?;
        let item = next("item_id")?;
        let domain = usize::try_from(domain).map_err(|_| Error::Parse {
            line: line_no,
            message: "domain_id out of range".into(),
        })?;
        out.push(Interaction::new(domain, user, item));
    }
    Ok(out)
}

pub fn write_interactions<'a>(
    mut writer: impl Write,
    records: impl IntoIterator<Item = &'a Interaction>,
) -> Result<()> {
    for r in records {
        writeln!(writer, "{}\t{}\t{}", r.domain, r.user, r.item)?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<MultiDomainDataset> {
    let file = std::fs::File::open(path)?;
    ingest(read_interactions(std::io::BufReader::new(file))?)
}

/// Nodes shared by two domains, sorted by kind then id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    pub domain_pair: (DomainId, DomainId),
    pub anchors: Vec<NodeId>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn position(&self, node: NodeId) -> Option<usize> {
        self.anchors.binary_search(&node).ok()
    }
}

fn sorted_intersection(a: &[u64], b: &[u64]) -> Vec<u64> {
    let (mut x, mut y) = (0, 0);
    let mut out = Vec::new();
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[x]);
                x += 1;
                y += 1;
            }
        }
    }
    out
}

fn union_size(a: &[u64], b: &[u64]) -> usize {
    a.len() + b.len() - sorted_intersection(a, b).len()
}

/// Anchors of a domain pair. The result does not depend on argument order.
pub fn anchors(dataset: &MultiDomainDataset, d: DomainId, d_prime: DomainId) -> Result<AnchorSet> {
    if d == d_prime {
        return Err(Error::InvalidConfig(format!(
            "anchors need two distinct domains, got {d} twice"
        )));
    }
    let (a, b) = (d.min(d_prime), d.max(d_prime));
    let (ga, gb) = (dataset.domain(a)?, dataset.domain(b)?);
    let anchors = sorted_intersection(ga.users(), gb.users())
        .into_iter()
        .map(NodeId::user)
        .chain(sorted_intersection(ga.items(), gb.items()).into_iter().map(NodeId::item))
        .collect();
    Ok(AnchorSet {
        domain_pair: (a, b),
        anchors,
    })
}

/// Shared nodes over the union of nodes of two domains, users and items pooled.
pub fn overlap_ratio(dataset: &MultiDomainDataset, d: DomainId, d_prime: DomainId) -> Result<f64> {
    let (ga, gb) = (dataset.domain(d)?, dataset.domain(d_prime)?);
    let shared = sorted_intersection(ga.users(), gb.users()).len()
        + sorted_intersection(ga.items(), gb.items()).len();
    let union = union_size(ga.users(), gb.users()) + union_size(ga.items(), gb.items());
    Ok(if union == 0 { 0.0 } else { shared as f64 / union as f64 })
}

/// Same ratio restricted to one node kind.
pub fn kind_overlap_ratio(
    dataset: &MultiDomainDataset,
    d: DomainId,
    d_prime: DomainId,
    kind: NodeKind,
) -> Result<f64> {
    let (ga, gb) = (dataset.domain(d)?, dataset.domain(d_prime)?);
    let (a, b) = match kind {
        NodeKind::User => (ga.users(), gb.users()),
        NodeKind::Item => (ga.items(), gb.items()),
    };
    let union = union_size(a, b);
    Ok(if union == 0 {
        0.0
    } else {
        sorted_intersection(a, b).len() as f64 / union as f64
    })
}
