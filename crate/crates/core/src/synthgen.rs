//! Synthetic multi-domain datasets with known structure.
//!
//! Every user and item entity owns a shared latent vector, used in every
//! domain it belongs to, and an independent domain-specific latent per
//! domain. The affinity of a pair in domain `d` is
//! `shared_weight * <a_u, a_i> + (1 - shared_weight) * <b_u^d, b_i^d>` and
//! the interaction probability is `sigmoid(scale * affinity + c_d)`, with
//! `c_d` set by bisection so the probabilities sum to the domain's
//! interaction budget. Exactly `budget` distinct pairs are then drawn: one
//! per user and one per otherwise uncovered item first, so no node is
//! isolated, and the rest by weighted sampling without replacement.
//!
//! Overlap between domains `d` and `e` is a Jaccard target per node kind:
//! `|U_d & U_e| / |U_d | U_e|` is the target rounded to whole entities.
//! Entities shared by every domain are reused for all pairs, extra entities
//! are shared by one pair only.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::edmodel::parse_key_values;
use crate::error::{Error, Result};
use crate::mdgraph::{ingest, write_interactions, DomainId, Interaction, MultiDomainDataset, NodeKind};
use crate::rng::{stream, tag};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub interactions: Vec<usize>,
    /// Symmetric `W x W` Jaccard targets; the diagonal is ignored.
    pub overlap: Vec<Vec<f64>>,
    pub shared_dim: usize,
    pub specific_dim: usize,
    pub shared_weight: f64,
    /// Multiplier on the affinity before the logistic link.
    pub affinity_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Spec with the same overlap target for every domain pair.
    pub fn uniform(
        users: Vec<usize>,
        items: Vec<usize>,
        interactions: Vec<usize>,
        overlap: f64,
        shared_weight: f64,
        seed: u64,
    ) -> Self {
        let w = users.len();
        SynthSpec {
            users,
            items,
            interactions,
            overlap: overlap_matrix(w, overlap),
            shared_dim: 8,
            specific_dim: 8,
            shared_weight,
            affinity_scale: 4.0,
            seed,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.users.len()
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.num_domains();
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if w == 0 {
            return bad("at least one domain is required".into());
        }
        if self.items.len() != w || self.interactions.len() != w {
            return bad("users, items and interactions need one entry per domain".into());
        }
        if self.overlap.len() != w || self.overlap.iter().any(|r| r.len() != w) {
            return bad(format!("overlap must be a {w} x {w} matrix"));
        }
        for d in 0..w {
            for e in 0..w {
                let f = self.overlap[d][e];
                if d != e && !(0.0..=1.0).contains(&f) {
                    return bad(format!("overlap {d}-{e} = {f} is outside [0, 1]"));
                }
                if self.overlap[d][e] != self.overlap[e][d] {
                    return bad(format!("overlap {d}-{e} is not symmetric"));
                }
            }
            if self.users[d] == 0 || self.items[d] == 0 {
                return bad(format!("domain {d} needs users and items"));
            }
            if self.interactions[d] == 0 {
                return bad(format!("domain {d} needs a positive interaction budget"));
            }
        }
        if !(0.0..=1.0).contains(&self.shared_weight) {
            return bad(format!("shared_weight {} is outside [0, 1]", self.shared_weight));
        }
        if !(self.affinity_scale >= 0.0 && self.affinity_scale.is_finite()) {
            return bad("affinity_scale must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Parses `key = value` text. Per-domain keys take comma-separated lists;
    /// `overlap` sets every pair and `overlap.D.E` overrides one pair.
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::InvalidConfig(format!("synth spec lacks `{k}`")));
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::InvalidConfig(format!("bad entry `{s}` in `{k}`"))))
                .collect()
        };
        let num = |k: &str, default: f64| -> Result<f64> {
            match kv.get(k) {
                None => Ok(default),
                Some(v) => v.parse().map_err(|_| Error::InvalidConfig(format!("bad `{k}`"))),
            }
        };
        let users = list("users")?;
        let w = users.len();
        let base = num("overlap", 0.0)?;
        let mut overlap = overlap_matrix(w, base);
        for (k, v) in &kv {
            if let Some(rest) = k.strip_prefix("overlap.") {
                let ids: Vec<usize> = rest.split('.').filter_map(|s| s.parse().ok()).collect();
                let f: f64 = v.parse().map_err(|_| Error::InvalidConfig(format!("bad `{k}`")))?;
                match ids[..] {
                    [d, e] if d < w && e < w && d != e => {
                        overlap[d][e] = f;
                        overlap[e][d] = f;
                    }
                    _ => return Err(Error::InvalidConfig(format!("bad overlap key `{k}`"))),
                }
            }
        }
        let known = [
            "users",
            "items",
            "interactions",
            "overlap",
            "shared_dim",
            "specific_dim",
            "shared_weight",
            "affinity_scale",
            "seed",
        ];
        if let Some(k) = kv.keys().find(|k| !known.contains(&k.as_str()) && !k.starts_with("overlap.")) {
            return Err(Error::InvalidConfig(format!("unknown synth spec key `{k}`")));
        }
        let spec = SynthSpec {
            users,
            items: list("items")?,
            interactions: list("interactions")?,
            overlap,
            shared_dim: num("shared_dim", 8.0)? as usize,
            specific_dim: num("specific_dim", 8.0)? as usize,
            shared_weight: num("shared_weight", 0.5)?,
            affinity_scale: num("affinity_scale", 4.0)?,
            seed: kv
                .get("seed")
                .map(|s| s.parse().map_err(|_| Error::InvalidConfig("bad `seed`".into())))
                .transpose()?
                .unwrap_or(0),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical `key = value` form; [`SynthSpec::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        s += &format!("users = {}\n", join(&self.users));
        s += &format!("items = {}\n", join(&self.items));
        s += &format!("interactions = {}\n", join(&self.interactions));
        for d in 0..self.num_domains() {
            for e in d + 1..self.num_domains() {
                s += &format!("overlap.{d}.{e} = {}\n", self.overlap[d][e]);
            }
        }
        s += &format!("shared_dim = {}\n", self.shared_dim);
        s += &format!("specific_dim = {}\n", self.specific_dim);
        s += &format!("shared_weight = {}\n", self.shared_weight);
        s += &format!("affinity_scale = {}\n", self.affinity_scale);
        s += &format!("seed = {}\n", self.seed);
        s
    }
}

/// `f` off the diagonal, zero on it.
fn overlap_matrix(w: usize, f: f64) -> Vec<Vec<f64>> {
    (0..w).map(|d| (0..w).map(|e| if d == e { 0.0 } else { f }).collect()).collect()
}

/// Generator latents, kept for analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub shared: BTreeMap<(NodeKind, u64), Vec<f64>>,
    pub specific: BTreeMap<(DomainId, NodeKind, u64), Vec<f64>>,
    pub intercepts: Vec<f64>,
}

impl GroundTruth {
    /// One line per latent: `shared kind id v1,v2,..` or
    /// `specific domain kind id v1,v2,..`, tab separated.
    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        let vals = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        for (d, c) in self.intercepts.iter().enumerate() {
            writeln!(w, "intercept\t{d}\t{c}")?;
        }
        for ((kind, id), v) in &self.shared {
            writeln!(w, "shared\t{}\t{id}\t{}", kind.as_str(), vals(v))?;
        }
        for ((d, kind, id), v) in &self.specific {
            writeln!(w, "specific\t{d}\t{}\t{id}\t{}", kind.as_str(), vals(v))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Synthetic {
    pub spec: SynthSpec,
    pub interactions: Vec<Interaction>,
    pub dataset: MultiDomainDataset,
    pub truth: GroundTruth,
}

impl Synthetic {
    /// Writes `interactions.tsv`, `synth_spec.txt` and `latents.tsv`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("interactions.tsv"))?);
        write_interactions(&mut f, &self.interactions)?;
        f.flush()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("synth_spec.txt"))?);
        writeln!(f, "# synthetic dataset")?;
        f.write_all(self.spec.to_text().as_bytes())?;
        for (d, g) in self.dataset.domains().iter().enumerate() {
            writeln!(f, "realized.{d} = {} users, {} items, {} interactions", g.num_users(), g.num_items(), g.num_edges())?;
        }
        f.flush()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("latents.tsv"))?);
        self.truth.write_tsv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Entity ids of each domain, per kind, realizing the overlap targets.
fn assign_entities(sizes: &[usize], overlap: &[Vec<f64>], kind: &str) -> Result<Vec<Vec<u64>>> {
    let w = sizes.len();
    let mut target = vec![vec![0usize; w]; w];
    for d in 0..w {
        for e in d + 1..w {
            let f = overlap[d][e];
            let s = (f * (sizes[d] + sizes[e]) as f64 / (1.0 + f)).round() as usize;
            if s > sizes[d].min(sizes[e]) {
                return Err(Error::Infeasible(format!(
                    "{kind} overlap {f} between domains {d} and {e} needs {s} shared {kind}s"
                )));
            }
            target[d][e] = s;
            target[e][d] = s;
        }
    }
    let common = if w < 2 {
        0
    } else {
        (0..w)
            .flat_map(|d| (d + 1..w).map(move |e| (d, e)))
            .map(|(d, e)| target[d][e])
            .min()
            .unwrap_or(0)
    };
    let mut next = 0u64;
    let mut ids: Vec<Vec<u64>> = vec![(0..common as u64).collect(); w];
    next += common as u64;
    for d in 0..w {
        for e in d + 1..w {
            for _ in common..target[d][e] {
                ids[d].push(next);
                ids[e].push(next);
                next += 1;
            }
        }
    }
    for (d, own) in ids.iter_mut().enumerate() {
        if own.len() > sizes[d] {
            return Err(Error::Infeasible(format!(
                "domain {d} needs {} shared {kind}s but has only {}",
                own.len(),
                sizes[d]
            )));
        }
        while own.len() < sizes[d] {
            own.push(next);
            next += 1;
        }
        own.sort_unstable();
    }
    Ok(ids)
}

fn latent(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    if dim == 0 {
        return Vec::new();
    }
    // Unit-variance inner products between independent vectors.
    let std = (dim as f64).powf(-0.25);
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    crate::scalar::dot(a, b)
}

/// Intercept `c` with `sum sigmoid(l + c) = target`.
fn calibrate(logits: &[f64], target: f64) -> f64 {
    let mass = |c: f64| logits.iter().map(|&l| (l + c).sigmoid()).sum::<f64>();
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Picks one index with probability proportional to `weights`.
fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        if x < w {
            return k;
        }
        x -= w;
    }
    weights.len() - 1
}

pub fn generate(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let w = spec.num_domains();
    for d in 0..w {
        let cells = spec.users[d] * spec.items[d];
        if spec.interactions[d] > cells {
            return Err(Error::Infeasible(format!(
                "domain {d}: {} interactions exceed {} user-item pairs",
                spec.interactions[d], cells
            )));
        }
    }
    let users = assign_entities(&spec.users, &spec.overlap, "user")?;
    let items = assign_entities(&spec.items, &spec.overlap, "item")?;

    let mut truth = GroundTruth {
        shared: BTreeMap::new(),
        specific: BTreeMap::new(),
        intercepts: Vec::with_capacity(w),
    };
    for (kind, ids) in [(NodeKind::User, &users), (NodeKind::Item, &items)] {
        let all: BTreeSet<u64> = ids.iter().flatten().copied().collect();
        for id in all {
            let mut rng = stream(spec.seed, &[tag::SYNTH, 0, kind.code() as u64, id]);
            truth.shared.insert((kind, id), latent(&mut rng, spec.shared_dim));
        }
        for (d, own) in ids.iter().enumerate() {
            for &id in own {
                let mut rng = stream(spec.seed, &[tag::SYNTH, 1, d as u64, kind.code() as u64, id]);
                truth.specific.insert((d, kind, id), latent(&mut rng, spec.specific_dim));
            }
        }
    }

    let sw = spec.shared_weight;
    let mut interactions = Vec::new();
    for d in 0..w {
        let (us, is) = (&users[d], &items[d]);
        let (nu, ni) = (us.len(), is.len());
        let mut logits = Vec::with_capacity(nu * ni);
        for &u in us {
            let au = &truth.shared[&(NodeKind::User, u)];
            let bu = &truth.specific[&(d, NodeKind::User, u)];
            for &i in is {
                let ai = &truth.shared[&(NodeKind::Item, i)];
                let bi = &truth.specific[&(d, NodeKind::Item, i)];
                let aff = sw * dot(au, ai) + (1.0 - sw) * dot(bu, bi);
                logits.push(spec.affinity_scale * aff);
            }
        }
        let c = calibrate(&logits, spec.interactions[d] as f64);
        truth.intercepts.push(c);
        let p: Vec<f64> = logits.iter().map(|&l| (l + c).sigmoid().max(1e-300)).collect();

        let mut rng = stream(spec.seed, &[tag::SYNTH, 2, d as u64]);
        let mut chosen = vec![false; nu * ni];
        let mut item_covered = vec![false; ni];
        for u in 0..nu {
            let i = weighted_pick(&p[u * ni..(u + 1) * ni], &mut rng);
            chosen[u * ni + i] = true;
            item_covered[i] = true;
        }
        for i in 0..ni {
            if !item_covered[i] {
                let col: Vec<f64> = (0..nu).map(|u| p[u * ni + i]).collect();
                let u = weighted_pick(&col, &mut rng);
                chosen[u * ni + i] = true;
            }
        }
        let seeded = chosen.iter().filter(|&&c| c).count();
        let budget = spec.interactions[d];
        if seeded > budget {
            return Err(Error::Infeasible(format!(
                "domain {d}: covering every user and item takes {seeded} interactions, budget is {budget}"
            )));
        }
        // Efraimidis-Spirakis: the largest ln(U) / p keys form a weighted
        // sample without replacement.
        let mut keyed: Vec<(f64, usize)> = (0..nu * ni)
            .filter(|&k| !chosen[k])
            .map(|k| {
                let r: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (r.ln() / p[k], k)
            })
            .collect();
        let rest = budget - seeded;
        if rest > 0 {
            keyed.select_nth_unstable_by(rest - 1, |a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, k) in &keyed[..rest] {
                chosen[k] = true;
            }
        }
        for (k, _) in chosen.iter().enumerate().filter(|(_, &c)| c) {
            interactions.push(Interaction::new(d, us[k / ni], is[k % ni]));
        }
    }
    let dataset = ingest(interactions.iter().copied())?;
    Ok(Synthetic {
        spec: spec.clone(),
        interactions,
        dataset,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdgraph::kind_overlap_ratio;

    fn three_domains(seed: u64) -> SynthSpec {
        SynthSpec::uniform(vec![60, 60, 20], vec![40, 40, 15], vec![600, 600, 80], 0.1, 0.7, seed)
    }

    #[test]
    fn counts_are_exact() {
        let s = generate(&three_domains(1)).unwrap();
        for (d, g) in s.dataset.domains().iter().enumerate() {
            assert_eq!(g.num_edges(), s.spec.interactions[d]);
            assert_eq!(g.num_users(), s.spec.users[d]);
            assert_eq!(g.num_items(), s.spec.items[d]);
        }
    }

    #[test]
    fn overlap_within_rounding() {
        let spec = SynthSpec::uniform(vec![100, 80, 30], vec![50, 70, 20], vec![900, 900, 200], 0.2, 0.5, 3);
        let s = generate(&spec).unwrap();
        for d in 0..3 {
            for e in d + 1..3 {
                for (kind, sizes) in [(NodeKind::User, &spec.users), (NodeKind::Item, &spec.items)] {
                    let r = kind_overlap_ratio(&s.dataset, d, e, kind).unwrap();
                    let (a, b) = (sizes[d] as f64, sizes[e] as f64);
                    let s_exact = 0.2 * (a + b) / 1.2;
                    // one entity of rounding either way
                    let lo = (s_exact - 0.5) / (a + b - s_exact + 0.5);
                    let hi = (s_exact + 0.5) / (a + b - s_exact - 0.5);
                    assert!(r >= lo - 1e-12 && r <= hi + 1e-12, "{d}-{e} {kind:?}: {r}");
                }
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate(&three_domains(5)).unwrap();
        let b = generate(&three_domains(5)).unwrap();
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.truth, b.truth);
        let c = generate(&three_domains(6)).unwrap();
        assert_ne!(a.interactions, c.interactions);
    }

    #[test]
    fn shared_entities_reuse_latents() {
        let s = generate(&three_domains(2)).unwrap();
        let shared_users: Vec<u64> = {
            let g0 = s.dataset.domain(0).unwrap();
            let g1 = s.dataset.domain(1).unwrap();
            g0.users().iter().copied().filter(|u| g1.users().contains(u)).collect()
        };
        assert!(!shared_users.is_empty());
        for u in shared_users {
            assert!(s.truth.shared.contains_key(&(NodeKind::User, u)));
            assert_ne!(s.truth.specific[&(0, NodeKind::User, u)], s.truth.specific[&(1, NodeKind::User, u)]);
        }
    }

    #[test]
    fn infeasible_specs() {
        let mut spec = three_domains(0);
        spec.interactions[2] = 10; // cannot cover 20 users
        assert!(matches!(generate(&spec), Err(Error::Infeasible(_))));
        let mut spec = three_domains(0);
        spec.interactions[0] = 60 * 40 + 1;
        assert!(matches!(generate(&spec), Err(Error::Infeasible(_))));
        // Full overlap of a big and a small domain needs more shared users than the small one has.
        let spec = SynthSpec::uniform(vec![50, 5], vec![10, 10], vec![100, 20], 1.0, 0.5, 0);
        assert!(matches!(generate(&spec), Err(Error::Infeasible(_))));
    }

    #[test]
    fn full_overlap_shares_everything() {
        let spec = SynthSpec::uniform(vec![20, 20], vec![10, 10], vec![80, 80], 1.0, 1.0, 4);
        let s = generate(&spec).unwrap();
        let (g0, g1) = (s.dataset.domain(0).unwrap(), s.dataset.domain(1).unwrap());
        assert_eq!(g0.users(), g1.users());
        assert_eq!(g0.items(), g1.items());
    }

    #[test]
    fn spec_text_round_trip() {
        let mut spec = three_domains(9);
        spec.overlap[0][2] = 0.05;
        spec.overlap[2][0] = 0.05;
        let back = SynthSpec::parse(&spec.to_text()).unwrap();
        assert_eq!(back, spec);
        assert!(SynthSpec::parse("users = 1\nitems = 1\ninteractions = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn calibration_hits_budget() {
        let logits: Vec<f64> = (0..1000).map(|k| (k as f64 * 0.37).sin() * 3.0).collect();
        let c = calibrate(&logits, 123.0);
        let mass: f64 = logits.iter().map(|&l| (l + c).sigmoid()).sum();
        assert!((mass - 123.0).abs() < 1e-6);
    }
}
