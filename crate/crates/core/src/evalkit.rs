//! Train/validation/test splitting, ranking metrics and domain statistics.
//!
//! Every (user, domain) interaction list is split on its own with the
//! requested ratios, so each user keeps at least one training interaction.
//! Training graphs keep the full node set of their domain: held-out users
//! and items stay in the model, only their edges are hidden.
//!
//! Each held-out positive becomes an [`EvalCase`] with 10 sampled items the
//! user never interacted with in that domain. Recall@1 asks whether the
//! positive outranks all 10. AUC is computed per user over all of the user's
//! held-out positives against the union of the user's sampled negatives, and
//! averaged over users.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::edmodel::{EdModel, Encoded};
use crate::error::{Error, Result};
use crate::mdgraph::{DomainGraph, DomainId, MultiDomainDataset, NodeId};
use crate::rng::{stream, tag};
use crate::scalar::Scalar;

pub const NUM_NEGATIVES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Train,
    Validation,
    Test,
}

impl Part {
    fn code(self) -> u64 {
        self as u64
    }
}

/// Result of [`split`]. `train` is a dataset over the same nodes as the
/// source; `validation[d]` and `test[d]` hold `(user, item)` pairs.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: MultiDomainDataset,
    pub validation: Vec<Vec<(u64, u64)>>,
    pub test: Vec<Vec<(u64, u64)>>,
    pub ratios: (u32, u32, u32),
    pub seed: u64,
}

impl SplitDataset {
    pub fn held_out(&self, part: Part) -> &[Vec<(u64, u64)>] {
        match part {
            Part::Validation => &self.validation,
            Part::Test => &self.test,
            Part::Train => panic!("training interactions live in the train dataset"),
        }
    }

    /// Every positive item of `user` in domain `d`, across all parts.
    fn positives(&self, d: DomainId) -> BTreeMap<u64, BTreeSet<u64>> {
        let mut out: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        let g = &self.train.domains()[d];
        for (u, i) in g.interactions().chain(self.validation[d].iter().copied()).chain(self.test[d].iter().copied()) {
            out.entry(u).or_default().insert(i);
        }
        out
    }
}

/// Largest-remainder apportionment of `n` by `ratios`; ties go to the
/// earlier part. At least one element lands in the first part when `n > 0`.
pub fn split_counts(n: usize, ratios: (u32, u32, u32)) -> [usize; 3] {
    let r = [ratios.0 as u64, ratios.1 as u64, ratios.2 as u64];
    let total: u64 = r.iter().sum();
    let mut counts = [0usize; 3];
    let mut rem = [0u64; 3];
    for k in 0..3 {
        let q = n as u64 * r[k];
        counts[k] = (q / total) as usize;
        rem[k] = q % total;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    if n > 0 && counts[0] == 0 {
        let k = if counts[2] >= counts[1] { 2 } else { 1 };
        counts[k] -= 1;
        counts[0] += 1;
    }
    counts
}

/// Per-user, per-domain random split, deterministic under `seed`.
pub fn split(dataset: &MultiDomainDataset, ratios: (u32, u32, u32), seed: u64) -> Result<SplitDataset> {
    if ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(Error::InvalidConfig("split ratios must be positive".into()));
    }
    let mut train_graphs = Vec::with_capacity(dataset.num_domains());
    let mut validation = Vec::with_capacity(dataset.num_domains());
    let mut test = Vec::with_capacity(dataset.num_domains());
    for g in dataset.domains() {
        let d = g.domain();
        let mut by_user: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for (u, i) in g.interactions() {
            by_user.entry(u).or_default().push(i);
        }
        let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
        for (u, mut items) in by_user {
            let mut rng = stream(seed, &[tag::SPLIT, d as u64, u]);
            items.shuffle(&mut rng);
            let [a, b, _] = split_counts(items.len(), ratios);
            for (k, &i) in items.iter().enumerate() {
                let dst = if k < a {
                    &mut tr
                } else if k < a + b {
                    &mut va
                } else {
                    &mut te
                };
                dst.push((u, i));
            }
        }
        va.sort_unstable();
        te.sort_unstable();
        train_graphs.push(DomainGraph::with_nodes(d, g.users().to_vec(), g.items().to_vec(), tr)?);
        validation.push(va);
        test.push(te);
    }
    Ok(SplitDataset {
        train: MultiDomainDataset::from_graphs(train_graphs)?,
        validation,
        test,
        ratios,
        seed,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCase {
    pub domain: DomainId,
    pub user: u64,
    pub positive: u64,
    pub negatives: Vec<u64>,
}

/// Draws `NUM_NEGATIVES` distinct items of `g` outside `exclude`.
fn sample_negatives(g: &DomainGraph, exclude: &BTreeSet<u64>, rng: &mut impl Rng) -> Option<Vec<u64>> {
    let items = g.items();
    let eligible = items.len() - exclude.len();
    if eligible < NUM_NEGATIVES {
        return None;
    }
    if eligible < 4 * NUM_NEGATIVES {
        let mut pool: Vec<u64> = items.iter().copied().filter(|i| !exclude.contains(i)).collect();
        let (chosen, _) = pool.partial_shuffle(rng, NUM_NEGATIVES);
        return Some(chosen.to_vec());
    }
    let mut chosen = Vec::with_capacity(NUM_NEGATIVES);
    let mut seen = HashSet::with_capacity(NUM_NEGATIVES);
    while chosen.len() < NUM_NEGATIVES {
        let i = items[rng.random_range(0..items.len())];
        if !exclude.contains(&i) && seen.insert(i) {
            chosen.push(i);
        }
    }
    Some(chosen)
}

/// Evaluation cases of one part, per domain.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub part: Part,
    pub seed: u64,
    pub cases: Vec<Vec<EvalCase>>,
}

impl EvalSet {
    /// Negatives are drawn per (user, positive) from a stream keyed by the
    /// evaluation seed, so every model sees the same cases.
    pub fn build(split: &SplitDataset, part: Part, seed: u64) -> Self {
        let held = split.held_out(part);
        let mut cases = Vec::with_capacity(held.len());
        for (d, pairs) in held.iter().enumerate() {
            let g = &split.train.domains()[d];
            let positives = split.positives(d);
            let mut out = Vec::with_capacity(pairs.len());
            let mut skipped = BTreeSet::new();
            for &(u, i) in pairs {
                let mut rng = stream(seed, &[tag::EVAL, part.code(), d as u64, u, i]);
                match sample_negatives(g, &positives[&u], &mut rng) {
                    Some(negatives) => out.push(EvalCase {
                        domain: d,
                        user: u,
                        positive: i,
                        negatives,
                    }),
                    None => {
                        skipped.insert(u);
                    }
                }
            }
            if !skipped.is_empty() {
                log::warn!(
                    "domain {d}: {} users have fewer than {NUM_NEGATIVES} un-interacted items and are not evaluated",
                    skipped.len()
                );
            }
            cases.push(out);
        }
        EvalSet { part, seed, cases }
    }

    pub fn num_cases(&self) -> usize {
        self.cases.iter().map(Vec::len).sum()
    }
}

/// Scores of one case: the positive and each negative, with item ids for
/// tie breaking.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCase {
    pub user: u64,
    pub positive: (u64, f64),
    pub negatives: Vec<(u64, f64)>,
}

/// Hit iff every negative scores lower, or equal with a larger item id.
pub fn recall_at_1_case(case: &ScoredCase) -> bool {
    let (pi, ps) = case.positive;
    case.negatives
        .iter()
        .all(|&(ni, ns)| ns < ps || (ns == ps && ni > pi))
}

pub fn recall_at_1_scores(cases: &[ScoredCase]) -> Option<f64> {
    if cases.is_empty() {
        return None;
    }
    let hits = cases.iter().filter(|c| recall_at_1_case(c)).count();
    Some(hits as f64 / cases.len() as f64)
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half, from ranks of the pooled scores.
pub fn auc_two_sample(pos: &[f64], neg: &[f64]) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Sum of mid-ranks (1-based) of the positives.
    let mut rank_sum = 0.0;
    let mut k = 0;
    while k < all.len() {
        let mut j = k;
        while j + 1 < all.len() && all[j + 1].0 == all[k].0 {
            j += 1;
        }
        let mid = (k + j + 2) as f64 / 2.0;
        rank_sum += mid * all[k..=j].iter().filter(|e| e.1).count() as f64;
        k = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Per-user AUC averaged over users. A user's negatives are the union of
/// the negatives of their cases.
pub fn auc_scores(cases: &[ScoredCase]) -> Option<f64> {
    let mut by_user: BTreeMap<u64, (Vec<f64>, BTreeMap<u64, f64>)> = BTreeMap::new();
    for c in cases {
        let e = by_user.entry(c.user).or_default();
        e.0.push(c.positive.1);
        for &(i, s) in &c.negatives {
            e.1.insert(i, s);
        }
    }
    let per_user: Vec<f64> = by_user
        .values()
        .filter_map(|(pos, neg)| auc_two_sample(pos, &neg.values().copied().collect::<Vec<_>>()))
        .collect();
    if per_user.is_empty() {
        return None;
    }
    Some(per_user.iter().sum::<f64>() / per_user.len() as f64)
}

fn score_cases<T: Scalar>(enc: &Encoded<T>, dataset: &MultiDomainDataset, cases: &[EvalCase]) -> Result<Vec<ScoredCase>> {
    cases
        .par_iter()
        .map(|c| {
            let g = dataset.domain(c.domain)?;
            let u = g.local(NodeId::user(c.user)).ok_or(Error::NodeNotInDomain {
                node: NodeId::user(c.user),
                domain: c.domain,
            })?;
            let score = |item: u64| -> Result<f64> {
                let node = NodeId::item(item);
                let i = g.local(node).ok_or(Error::NodeNotInDomain { node, domain: c.domain })?;
                Ok(enc.score_local(dataset, c.domain, u, i).as_f64())
            };
            Ok(ScoredCase {
                user: c.user,
                positive: (c.positive, score(c.positive)?),
                negatives: c
                    .negatives
                    .iter()
                    .map(|&n| Ok((n, score(n)?)))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainMetrics {
    pub domain: DomainId,
    pub auc: f64,
    pub recall_at_1: f64,
    pub num_cases: usize,
}

/// Metrics of every domain plus their unweighted average.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub domains: Vec<DomainMetrics>,
}

impl EvalReport {
    pub fn avg_auc(&self) -> f64 {
        mean(self.domains.iter().map(|m| m.auc))
    }

    pub fn avg_recall_at_1(&self) -> f64 {
        mean(self.domains.iter().map(|m| m.recall_at_1))
    }

    pub fn write_tsv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "domain\tAUC\tRecall@1\tnum_cases")?;
        for m in &self.domains {
            writeln!(w, "{}\t{:.6}\t{:.6}\t{}", m.domain, m.auc, m.recall_at_1, m.num_cases)?;
        }
        let total: usize = self.domains.iter().map(|m| m.num_cases).sum();
        writeln!(w, "AVG\t{:.6}\t{:.6}\t{}", self.avg_auc(), self.avg_recall_at_1(), total)?;
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores `cases` with `model` on the training graphs of `split`.
pub fn evaluate<T: Scalar>(model: &EdModel<T>, split: &SplitDataset, cases: &EvalSet) -> Result<EvalReport> {
    let enc = model.encode(&split.train, None)?;
    evaluate_encoded(&enc, &split.train, cases)
}

pub fn evaluate_encoded<T: Scalar>(enc: &Encoded<T>, train: &MultiDomainDataset, cases: &EvalSet) -> Result<EvalReport> {
    let mut domains = Vec::with_capacity(cases.cases.len());
    for (d, cs) in cases.cases.iter().enumerate() {
        let scored = score_cases(enc, train, cs)?;
        domains.push(DomainMetrics {
            domain: d,
            auc: auc_scores(&scored).unwrap_or(f64::NAN),
            recall_at_1: recall_at_1_scores(&scored).unwrap_or(f64::NAN),
            num_cases: scored.len(),
        });
    }
    Ok(EvalReport { domains })
}

/// AUC of domain `d` over `cases`.
pub fn auc<T: Scalar>(model: &EdModel<T>, split: &SplitDataset, cases: &EvalSet, d: DomainId) -> Result<f64> {
    let enc = model.encode_domains(&split.train, None, &[d])?;
    let cs = cases.cases.get(d).ok_or(Error::UnknownDomain(d))?;
    auc_scores(&score_cases(&enc, &split.train, cs)?)
        .ok_or_else(|| Error::InvalidConfig(format!("domain {d} has no evaluation cases")))
}

pub fn recall_at_1<T: Scalar>(model: &EdModel<T>, split: &SplitDataset, cases: &EvalSet, d: DomainId) -> Result<f64> {
    let enc = model.encode_domains(&split.train, None, &[d])?;
    let cs = cases.cases.get(d).ok_or(Error::UnknownDomain(d))?;
    recall_at_1_scores(&score_cases(&enc, &split.train, cs)?)
        .ok_or_else(|| Error::InvalidConfig(format!("domain {d} has no evaluation cases")))
}

/// Share of all interactions that belong to domain `d`.
pub fn domain_size(dataset: &MultiDomainDataset, d: DomainId) -> Result<f64> {
    let g = dataset.domain(d)?;
    Ok(g.num_edges() as f64 / dataset.num_interactions() as f64)
}

/// Interactions of `d`'s users in other domains, per interaction of `d`.
pub fn out_of_domain_interaction(dataset: &MultiDomainDataset, d: DomainId) -> Result<f64> {
    let g = dataset.domain(d)?;
    let mut outside = 0usize;
    for &u in g.users() {
        for other in dataset.domains() {
            if other.domain() == d {
                continue;
            }
            if let Some(l) = other.local(NodeId::user(u)) {
                outside += other.degree(l);
            }
        }
    }
    if g.num_edges() == 0 {
        return Ok(0.0);
    }
    Ok(outside as f64 / g.num_edges() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdgraph::{ingest, Interaction};
    use proptest::prelude::*;

    fn one_user(n: u64) -> MultiDomainDataset {
        let mut recs: Vec<Interaction> = (0..n).map(|i| Interaction::new(0, 0, i)).collect();
        recs.extend((0..20).map(|i| Interaction::new(0, 1, 100 + i)));
        ingest(recs).unwrap()
    }

    #[test]
    fn split_counts_examples() {
        assert_eq!(split_counts(10, (7, 1, 2)), [7, 1, 2]);
        assert_eq!(split_counts(1, (7, 1, 2)), [1, 0, 0]);
        assert_eq!(split_counts(0, (7, 1, 2)), [0, 0, 0]);
        assert_eq!(split_counts(3, (7, 1, 2)), [2, 0, 1]);
        for n in 0..200 {
            let c = split_counts(n, (7, 1, 2));
            assert_eq!(c.iter().sum::<usize>(), n);
            assert!(n == 0 || c[0] >= 1);
        }
    }

    #[test]
    fn split_one_user() {
        let ds = one_user(10);
        let s = split(&ds, (7, 1, 2), 3).unwrap();
        let u0 = |v: &Vec<(u64, u64)>| v.iter().filter(|p| p.0 == 0).count();
        let g = &s.train.domains()[0];
        assert_eq!(g.interactions().filter(|p| p.0 == 0).count(), 7);
        assert_eq!(u0(&s.validation[0]), 1);
        assert_eq!(u0(&s.test[0]), 2);
        // held-out items stay in the graph
        assert_eq!(g.num_items(), ds.domains()[0].num_items());

        let single = split(&one_user(1), (7, 1, 2), 3).unwrap();
        assert!(single.train.domains()[0].has_edge(0, 0));
        let again = split(&ds, (7, 1, 2), 3).unwrap();
        assert_eq!(again.test, s.test);
        assert_eq!(again.validation, s.validation);
    }

    #[test]
    fn cases_respect_constraints() {
        let ds = one_user(30);
        let s = split(&ds, (7, 1, 2), 1).unwrap();
        let set = EvalSet::build(&s, Part::Test, 4);
        let pos: BTreeSet<u64> = (0..30).collect();
        for c in &set.cases[0] {
            assert_eq!(c.negatives.len(), NUM_NEGATIVES);
            let uniq: BTreeSet<u64> = c.negatives.iter().copied().collect();
            assert_eq!(uniq.len(), NUM_NEGATIVES);
            if c.user == 0 {
                assert!(uniq.iter().all(|i| !pos.contains(i)));
            }
            assert!(!uniq.contains(&c.positive));
        }
        let again = EvalSet::build(&s, Part::Test, 4);
        assert_eq!(again.cases, set.cases);
    }

    fn case(user: u64, p: f64, negs: &[f64]) -> ScoredCase {
        ScoredCase {
            user,
            positive: (1000, p),
            negatives: negs.iter().enumerate().map(|(k, &s)| (k as u64, s)).collect(),
        }
    }

    #[test]
    fn metric_examples() {
        let c = case(0, 5.0, &[1.0; 10]);
        assert_eq!(auc_scores(&[c.clone()]), Some(1.0));
        assert_eq!(recall_at_1_scores(&[c]), Some(1.0));
        let c = case(0, 0.0, &[1.0; 10]);
        assert_eq!(recall_at_1_scores(&[c]), Some(0.0));
        let c = case(0, 1.0, &[1.0; 10]);
        assert_eq!(auc_scores(&[c.clone()]), Some(0.5));
        // tie with lower-id negatives is a miss
        assert_eq!(recall_at_1_scores(&[c]), Some(0.0));
        // 3 positives, 3 negatives, one inversion: 8/9
        assert!((auc_two_sample(&[3.0, 4.0, 5.0], &[0.0, 1.0, 3.5]).unwrap() - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn random_scores_recall_is_one_in_eleven() {
        let mut rng = stream(42, &[]);
        let cases: Vec<ScoredCase> = (0..100_000)
            .map(|k| ScoredCase {
                user: k,
                positive: (0, rand::Rng::random(&mut rng)),
                negatives: (1..=10).map(|i| (i, rand::Rng::random(&mut rng))).collect(),
            })
            .collect();
        let r = recall_at_1_scores(&cases).unwrap();
        assert!((r - 1.0 / 11.0).abs() < 0.01, "{r}");
    }

    #[test]
    fn domain_statistics() {
        let mut recs = Vec::new();
        recs.extend((0..30).map(|i| Interaction::new(0, i, 0)));
        recs.extend((0..70).map(|i| Interaction::new(1, 100 + i, 0)));
        let ds = ingest(recs).unwrap();
        assert!((domain_size(&ds, 0).unwrap() - 0.3).abs() < 1e-15);
        assert!((domain_size(&ds, 1).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(out_of_domain_interaction(&ds, 0).unwrap(), 0.0);

        let ds = ingest(vec![
            Interaction::new(0, 0, 0),
            Interaction::new(0, 0, 1),
            Interaction::new(1, 0, 0),
            Interaction::new(1, 0, 1),
            Interaction::new(2, 0, 2),
            Interaction::new(2, 0, 3),
        ])
        .unwrap();
        assert_eq!(out_of_domain_interaction(&ds, 0).unwrap(), 2.0);
        let single = ingest(vec![Interaction::new(0, 0, 0)]).unwrap();
        assert_eq!(domain_size(&single, 0).unwrap(), 1.0);
        assert_eq!(out_of_domain_interaction(&single, 0).unwrap(), 0.0);
    }

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for &p in pos {
            for &n in neg {
                s += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    proptest! {
        #[test]
        fn rank_auc_matches_pairwise(
            pos in prop::collection::vec(0u8..6, 1..20),
            neg in prop::collection::vec(0u8..6, 1..20),
        ) {
            let p: Vec<f64> = pos.iter().map(|&v| v as f64).collect();
            let n: Vec<f64> = neg.iter().map(|&v| v as f64).collect();
            let a = auc_two_sample(&p, &n).unwrap();
            prop_assert!((a - brute_auc(&p, &n)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
            // strictly monotone transform
            let pt: Vec<f64> = p.iter().map(|v| (v * 0.5).exp()).collect();
            let nt: Vec<f64> = n.iter().map(|v| (v * 0.5).exp()).collect();
            prop_assert_eq!(auc_two_sample(&pt, &nt).unwrap(), a);
        }
    }
}
