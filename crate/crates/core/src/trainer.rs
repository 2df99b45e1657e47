//! Objective, analytic gradients and the Adam training loop.
//!
//! The objective of a batch is
//! `L_BPR + beta * L_align + lambda * sum(theta^2)` where `L_BPR` sums
//! `-ln sigmoid(s(u, i+) - s(u, i-))` over the batch triplets and `L_align`
//! sums `||e_u W_d - e_v W_d'||^2` over mined cross-domain pairs, using the
//! input (not propagated) intra embeddings.
//!
//! Both encoders are linear in their input, so the gradient with respect to
//! an embedding table is the adjoint of the encoder applied to the gradient
//! with respect to its output. GRec is self-adjoint, which lets the backward
//! pass reuse the forward routines.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::edmodel::{EdModel, ParamBlock};
use crate::encoders::{inter_propagate, propagate, EdgeMask, EncoderKind};
use crate::error::{Error, Result};
use crate::mdgraph::{DomainGraph, DomainId, MultiDomainDataset, NodeId};
use crate::rng::{stream, tag};
use crate::scalar::{axpy, dot, Scalar};
use crate::walker::SimilarPairSet;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub edge_dropout: f64,
    pub epochs: usize,
    /// Partners kept per node when mining pairs.
    pub k: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Epochs without validation improvement before stopping. Only used when
    /// the callbacks report a validation metric; 0 disables early stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.03,
            lambda: 1e-4,
            learning_rate: 0.001,
            batch_size: 8092,
            edge_dropout: 0.3,
            epochs: 200,
            k: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            patience: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return bad("edge_dropout must lie in [0, 1)");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub domain: DomainId,
    pub user: NodeId,
    pub pos_item: NodeId,
    pub neg_item: NodeId,
}

/// Triplet in local indices of its domain.
#[derive(Clone, Copy, Debug)]
struct LocalTriplet {
    d: DomainId,
    u: usize,
    pos: usize,
    neg: usize,
}

/// Alignment pair in local indices.
#[derive(Clone, Copy, Debug)]
struct LocalPair {
    d: DomainId,
    u: usize,
    e: DomainId,
    v: usize,
}

/// One gradient buffer per parameter block, in [`EdModel::block_ids`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub ids: Vec<ParamBlock>,
    pub blocks: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &EdModel<T>) -> Self {
        Gradients {
            ids: model.block_ids(),
            blocks: model.blocks().iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn block(&self, id: ParamBlock) -> &[T] {
        let k = self.ids.iter().position(|&b| b == id).expect("block exists");
        &self.blocks[k]
    }

    fn block_mut(&mut self, id: ParamBlock) -> &mut [T] {
        let k = self.ids.iter().position(|&b| b == id).expect("block exists");
        &mut self.blocks[k]
    }

    pub fn norm_sq(&self) -> T {
        self.blocks.iter().flatten().map(|&g| g * g).sum()
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &EdModel<T>) -> Self {
        let zeros: Vec<Vec<T>> = model.blocks().iter().map(|b| vec![T::zero(); b.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Loss terms of one evaluation of the objective. `align` is already scaled
/// to estimate the full alignment sum; `reg` is the unweighted squared norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts<T> {
    pub bpr: T,
    pub align: T,
    pub reg: T,
}

impl<T: Scalar> LossParts<T> {
    pub fn total(&self, cfg: &TrainConfig) -> T {
        self.bpr + T::of(cfg.beta) * self.align + T::of(cfg.lambda) * self.reg
    }
}

/// Draws a negative item for local user `u` by rejection. `None` when the
/// user has interacted with every item.
fn sample_negative(g: &DomainGraph, u: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    let ni = g.num_items();
    if g.degree(u) >= ni {
        return None;
    }
    let nbrs = g.neighbors(u);
    loop {
        let cand = g.item_local(rng.random_range(0..ni));
        if nbrs.binary_search(&cand).is_err() {
            return Some(cand);
        }
    }
}

/// `count` triplets of domain `d`: a uniform observed `(u, i+)` and a uniform
/// unobserved `i-`. Interactions of users that cover every item are skipped.
pub fn sample_triplets(
    dataset: &MultiDomainDataset,
    d: DomainId,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Triplet>> {
    let g = dataset.domain(d)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    if g.num_items() < 2 || g.num_edges() == 0 {
        return Err(Error::InvalidConfig(format!(
            "domain {d} needs at least one interaction and two items to sample triplets"
        )));
    }
    let eligible: Vec<usize> = (0..g.num_edges())
        .filter(|&e| g.degree(g.edges()[e].0) < g.num_items())
        .collect();
    warn_saturated(g);
    if eligible.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (u, pos) = g.edges()[eligible[rng.random_range(0..eligible.len())]];
        let neg = sample_negative(g, u, rng).expect("eligible user has a negative");
        out.push(Triplet {
            domain: d,
            user: g.node(u),
            pos_item: g.node(pos),
            neg_item: g.node(neg),
        });
    }
    Ok(out)
}

fn warn_saturated(g: &DomainGraph) {
    for u in 0..g.num_users() {
        if g.degree(u) >= g.num_items() {
            log::warn!(
                "user {} interacts with every item of domain {}; skipped for negative sampling",
                g.node(u),
                g.domain()
            );
        }
    }
}

/// Bernoulli edge mask: each edge kept with probability `1 - ratio`.
pub fn edge_dropout(graph: &DomainGraph, ratio: f64, rng: &mut ChaCha8Rng) -> EdgeMask {
    if ratio <= 0.0 {
        return EdgeMask::full(graph.num_edges());
    }
    EdgeMask::from_keep((0..graph.num_edges()).map(|_| rng.random::<f64>() >= ratio).collect())
}

/// `sum -ln sigmoid(pos - neg)`.
pub fn bpr_loss<T: Scalar>(scores_pos: &[T], scores_neg: &[T]) -> Result<T> {
    if scores_pos.len() != scores_neg.len() {
        return Err(Error::DimensionMismatch {
            expected: scores_pos.len(),
            found: scores_neg.len(),
        });
    }
    Ok(scores_pos.iter().zip(scores_neg).map(|(&p, &n)| (n - p).softplus()).sum())
}

fn localize_triplets(dataset: &MultiDomainDataset, triplets: &[Triplet]) -> Result<Vec<LocalTriplet>> {
    triplets
        .iter()
        .map(|t| {
            let g = dataset.domain(t.domain)?;
            let loc = |n: NodeId| g.local(n).ok_or(Error::NodeNotInDomain { node: n, domain: t.domain });
            Ok(LocalTriplet {
                d: t.domain,
                u: loc(t.user)?,
                pos: loc(t.pos_item)?,
                neg: loc(t.neg_item)?,
            })
        })
        .collect()
}

fn localize_pairs<T: Scalar>(model: &EdModel<T>, pairs: &[SimilarPairSet]) -> Result<Vec<LocalPair>> {
    let mut out = Vec::new();
    for set in pairs {
        let (d, e) = set.domain_pair;
        if d >= model.num_domains() || e >= model.num_domains() {
            return Err(Error::UnknownDomain(d.max(e)));
        }
        for p in &set.pairs {
            let find = |dom: DomainId, n: NodeId| {
                model.intra(dom).position(n).ok_or_else(|| Error::MissingNode {
                    node: n,
                    context: format!("intra-domain table of domain {dom}"),
                })
            };
            out.push(LocalPair {
                d,
                u: find(d, p.u)?,
                e,
                v: find(e, p.v)?,
            });
        }
    }
    Ok(out)
}

fn project_row<T: Scalar>(e: &[T], w: &[T], out_dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); out_dim];
    for (r, &x) in e.iter().enumerate() {
        axpy(x, &w[r * out_dim..(r + 1) * out_dim], &mut out);
    }
    out
}

/// `sum ||e_u W_d - e_v W_d'||^2` over every pair of every set.
pub fn alignment_loss<T: Scalar>(model: &EdModel<T>, pairs: &[SimilarPairSet]) -> Result<T> {
    let local = localize_pairs(model, pairs)?;
    Ok(align_terms(model, &local, T::one(), None))
}

/// Weighted alignment sum; accumulates its gradient into `grads` if given.
fn align_terms<T: Scalar>(
    model: &EdModel<T>,
    pairs: &[LocalPair],
    weight: T,
    mut grads: Option<&mut Gradients<T>>,
) -> T {
    let (di, da) = (model.spec().intra_dim, model.spec().align_dim);
    if di == 0 || da == 0 {
        return T::zero();
    }
    let two = T::of(2.0);
    let mut loss = T::zero();
    for p in pairs {
        let eu = model.intra(p.d).row_at(p.u);
        let ev = model.intra(p.e).row_at(p.v);
        let (wd, we) = (model.proj(p.d), model.proj(p.e));
        let a = project_row(eu, wd, da);
        let b = project_row(ev, we, da);
        let diff: Vec<T> = a.iter().zip(&b).map(|(&x, &y)| x - y).collect();
        loss += weight * dot(&diff, &diff);
        if let Some(g) = grads.as_deref_mut() {
            let c = two * weight;
            // d/d e_u = c * diff W_d^T, d/d W_d = c * e_u^T diff; v side negated.
            {
                let ge = &mut g.block_mut(ParamBlock::Intra(p.d))[p.u * di..(p.u + 1) * di];
                for r in 0..di {
                    ge[r] += c * dot(&diff, &wd[r * da..(r + 1) * da]);
                }
            }
            {
                let gw = g.block_mut(ParamBlock::Proj(p.d));
                for r in 0..di {
                    axpy(c * eu[r], &diff, &mut gw[r * da..(r + 1) * da]);
                }
            }
            {
                let ge = &mut g.block_mut(ParamBlock::Intra(p.e))[p.v * di..(p.v + 1) * di];
                for r in 0..di {
                    ge[r] -= c * dot(&diff, &we[r * da..(r + 1) * da]);
                }
            }
            {
                let gw = g.block_mut(ParamBlock::Proj(p.e));
                for r in 0..di {
                    axpy(-c * ev[r], &diff, &mut gw[r * da..(r + 1) * da]);
                }
            }
        }
    }
    loss
}

/// Loss parts and, when `want_grad`, the gradient of
/// `bpr + beta * align_weight * align + lambda * reg`.
fn objective<T: Scalar>(
    model: &EdModel<T>,
    dataset: &MultiDomainDataset,
    triplets: &[LocalTriplet],
    pairs: &[LocalPair],
    align_weight: T,
    cfg: &TrainConfig,
    masks: Option<&[EdgeMask]>,
    want_grad: bool,
) -> Result<(LossParts<T>, Option<Gradients<T>>)> {
    let domains: Vec<DomainId> = triplets.iter().map(|t| t.d).collect::<BTreeSet<_>>().into_iter().collect();
    let enc = model.encode_domains(dataset, masks, &domains)?;
    let (dx, dy) = (model.spec().inter_dim, model.spec().intra_dim);

    let mut grads = want_grad.then(|| Gradients::zeros_like(model));
    // Gradients with respect to encoder outputs.
    let mut g_inter = if want_grad { vec![T::zero(); enc.inter.len()] } else { Vec::new() };
    let mut g_intra: Vec<Vec<T>> = enc
        .intra
        .iter()
        .map(|y| if want_grad { vec![T::zero(); y.len()] } else { Vec::new() })
        .collect();

    let mut bpr = T::zero();
    for t in triplets {
        let map = dataset.local_to_global(t.d);
        let (gu, gp, gn) = (map[t.u], map[t.pos], map[t.neg]);
        let x = enc.score_local(dataset, t.d, t.u, t.pos) - enc.score_local(dataset, t.d, t.u, t.neg);
        bpr += (-x).softplus();
        if !want_grad {
            continue;
        }
        let g = -(-x).sigmoid();
        if dx > 0 {
            let fu = enc.inter_row(gu).to_vec();
            let fp = enc.inter_row(gp).to_vec();
            let fnn = enc.inter_row(gn).to_vec();
            let row = |k: usize| k * dx..(k + 1) * dx;
            for c in 0..dx {
                g_inter[row(gu)][c] += g * (fp[c] - fnn[c]);
            }
            axpy(g, &fu, &mut g_inter[row(gp)]);
            axpy(-g, &fu, &mut g_inter[row(gn)]);
        }
        if dy > 0 {
            let yu = enc.intra_row(t.d, t.u).to_vec();
            let yp = enc.intra_row(t.d, t.pos).to_vec();
            let yn = enc.intra_row(t.d, t.neg).to_vec();
            let gy = &mut g_intra[t.d];
            let row = |k: usize| k * dy..(k + 1) * dy;
            for c in 0..dy {
                gy[row(t.u)][c] += g * (yp[c] - yn[c]);
            }
            axpy(g, &yu, &mut gy[row(t.pos)]);
            axpy(-g, &yu, &mut gy[row(t.neg)]);
        }
    }

    let beta = T::of(cfg.beta);
    let lambda = T::of(cfg.lambda);
    let align = align_terms(
        model,
        pairs,
        align_weight,
        if cfg.beta != 0.0 { grads.as_mut() } else { None },
    );
    let reg = model.l2_norm_sq();

    if let Some(grads) = grads.as_mut() {
        // align_terms wrote d(align)/d theta; weight it by beta.
        if cfg.beta != 0.0 {
            for b in grads.blocks.iter_mut() {
                for v in b.iter_mut() {
                    *v *= beta;
                }
            }
        }
        let cfg_grec = &model.spec().grec;
        if dx > 0 {
            let back = match model.spec().encoder {
                EncoderKind::Mf => g_inter,
                EncoderKind::GRec => inter_propagate(dataset, &g_inter, dx, cfg_grec, masks)?,
            };
            for (a, b) in grads.block_mut(ParamBlock::Inter).iter_mut().zip(back) {
                *a += b;
            }
        }
        if dy > 0 {
            for &d in &domains {
                let gy = std::mem::take(&mut g_intra[d]);
                let back = match model.spec().encoder {
                    EncoderKind::Mf => gy,
                    EncoderKind::GRec => {
                        propagate(dataset.domain(d)?, &gy, dy, cfg_grec, masks.map(|m| &m[d]))?
                    }
                };
                for (a, b) in grads.block_mut(ParamBlock::Intra(d)).iter_mut().zip(back) {
                    *a += b;
                }
            }
        }
        if cfg.lambda != 0.0 {
            let two_lambda = T::of(2.0) * lambda;
            for (g, p) in grads.blocks.iter_mut().zip(model.blocks()) {
                axpy(two_lambda, p, g);
            }
        }
    }
    Ok((LossParts { bpr, align, reg }, grads))
}

/// `L_BPR + beta * L_align + lambda * ||theta||^2`.
pub fn total_loss<T: Scalar>(
    model: &EdModel<T>,
    dataset: &MultiDomainDataset,
    triplets: &[Triplet],
    pairs: &[SimilarPairSet],
    cfg: &TrainConfig,
    masks: Option<&[EdgeMask]>,
) -> Result<T> {
    Ok(loss_parts(model, dataset, triplets, pairs, cfg, masks)?.total(cfg))
}

pub fn loss_parts<T: Scalar>(
    model: &EdModel<T>,
    dataset: &MultiDomainDataset,
    triplets: &[Triplet],
    pairs: &[SimilarPairSet],
    cfg: &TrainConfig,
    masks: Option<&[EdgeMask]>,
) -> Result<LossParts<T>> {
    let lt = localize_triplets(dataset, triplets)?;
    let lp = localize_pairs(model, pairs)?;
    let (parts, _) = objective(model, dataset, &lt, &lp, T::one(), cfg, masks, false)?;
    Ok(parts)
}

/// Exact gradient of [`total_loss`] with respect to every parameter.
pub fn gradients<T: Scalar>(
    model: &EdModel<T>,
    dataset: &MultiDomainDataset,
    triplets: &[Triplet],
    pairs: &[SimilarPairSet],
    cfg: &TrainConfig,
    masks: Option<&[EdgeMask]>,
) -> Result<Gradients<T>> {
    let lt = localize_triplets(dataset, triplets)?;
    let lp = localize_pairs(model, pairs)?;
    let (_, g) = objective(model, dataset, &lt, &lp, T::one(), cfg, masks, true)?;
    Ok(g.expect("gradient requested"))
}

/// One Adam update with bias correction.
pub fn adam_step<T: Scalar>(
    model: &mut EdModel<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.ids != model.block_ids() || state.m.len() != grads.blocks.len() {
        return Err(Error::InvalidConfig("gradient blocks do not match the model".into()));
    }
    state.step += 1;
    let (b1, b2) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2));
    let one = T::one();
    let t = state.step as i32;
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.adam_eps);
    for (k, params) in model.blocks_mut().into_iter().enumerate() {
        let g = &grads.blocks[k];
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        if g.len() != params.len() || m.len() != params.len() {
            return Err(Error::DimensionMismatch {
                expected: params.len(),
                found: g.len(),
            });
        }
        for j in 0..params.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            params[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-epoch training record. Loss columns are means over the epoch's
/// batches of the per-batch objective terms.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bpr: f64,
    pub align: f64,
    pub total: f64,
    pub val_auc: Option<f64>,
    pub val_recall: Option<f64>,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tL_BPR\tL_align\tL_total\tval_AUC\tval_Recall@1\twall_ms";

    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.bpr,
            self.align,
            self.total,
            opt(self.val_auc),
            opt(self.val_recall),
            self.wall_ms
        )
    }
}

/// Hooks invoked by [`train`].
pub trait TrainCallbacks<T: Scalar> {
    /// Validation `(AUC, Recall@1)` of the current model, if available.
    fn validate(&mut self, _model: &EdModel<T>) -> Result<Option<(f64, f64)>> {
        Ok(None)
    }

    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> TrainCallbacks<T> for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept; 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct Batch {
    d: DomainId,
    edges: Vec<usize>,
}

/// Per-domain batches interleaved proportionally to domain size: batch `j`
/// of `n_d` batches is placed at `(j + 0.5) / n_d`.
fn epoch_batches(dataset: &MultiDomainDataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Batch> {
    let mut keyed = Vec::new();
    for g in dataset.domains() {
        let mut edges: Vec<usize> = (0..g.num_edges()).collect();
        for k in (1..edges.len()).rev() {
            edges.swap(k, rng.random_range(0..=k));
        }
        let n = edges.len().div_ceil(batch_size);
        for (j, chunk) in edges.chunks(batch_size).enumerate() {
            keyed.push(((2 * j + 1) as f64 / (2 * n) as f64, g.domain(), chunk.to_vec()));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, d, edges)| Batch { d, edges }).collect()
}

/// Trains `model` in place on `dataset` (the training graphs).
///
/// Each epoch uses every training interaction once as a positive. Per batch
/// a fresh dropout mask is drawn for every domain, shared by the inter and
/// intra encoders. The alignment term uses every pair when there are at most
/// `10 * batch_size` of them and otherwise `batch_size` pairs drawn with
/// replacement, rescaled so the estimate is unbiased.
///
/// With validation available and `patience > 0`, training stops after
/// `patience` epochs without a better validation AUC and the best parameters
/// are restored. On a non-finite loss the model is left as it was before the
/// failing step.
pub fn train<T: Scalar>(
    model: &mut EdModel<T>,
    dataset: &MultiDomainDataset,
    pairs: &[SimilarPairSet],
    cfg: &TrainConfig,
    callbacks: &mut dyn TrainCallbacks<T>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_compatible(dataset)?;
    let all_pairs = localize_pairs(model, pairs)?;
    for g in dataset.domains() {
        warn_saturated(g);
    }
    let mut rng = stream(cfg.seed, &[tag::TRAIN]);
    let mut adam = AdamState::new(model);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, EdModel<T>)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let batches = epoch_batches(dataset, cfg.batch_size, &mut rng);
        let (mut sum_bpr, mut sum_align, mut sum_total) = (0.0, 0.0, 0.0);
        let mut counted = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let g = dataset.domain(batch.d)?;
            let mut triplets = Vec::with_capacity(batch.edges.len());
            for &e in &batch.edges {
                let (u, pos) = g.edges()[e];
                if let Some(neg) = sample_negative(g, u, &mut rng) {
                    triplets.push(LocalTriplet { d: batch.d, u, pos, neg });
                }
            }
            if triplets.is_empty() {
                continue;
            }
            let masks: Vec<EdgeMask> = dataset
                .domains()
                .iter()
                .map(|g| edge_dropout(g, cfg.edge_dropout, &mut rng))
                .collect();
            let (batch_pairs, weight) = if cfg.beta == 0.0 || all_pairs.len() <= 10 * cfg.batch_size {
                (all_pairs.clone(), 1.0)
            } else {
                let picked = (0..cfg.batch_size)
                    .map(|_| all_pairs[rng.random_range(0..all_pairs.len())])
                    .collect();
                (picked, all_pairs.len() as f64 / cfg.batch_size as f64)
            };
            let batch_pairs = if cfg.beta == 0.0 { Vec::new() } else { batch_pairs };
            let (parts, grads) = objective(
                model,
                dataset,
                &triplets,
                &batch_pairs,
                T::of(weight),
                cfg,
                Some(&masks),
                true,
            )?;
            let total = parts.total(cfg);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    domain: batch.d,
                    bpr: parts.bpr.as_f64(),
                    align: parts.align.as_f64(),
                    reg: parts.reg.as_f64(),
                });
            }
            adam_step(model, &grads.expect("gradient requested"), &mut adam, cfg)?;
            sum_bpr += parts.bpr.as_f64();
            sum_align += parts.align.as_f64();
            sum_total += total.as_f64();
            counted += 1;
        }
        let n = counted.max(1) as f64;
        let val = callbacks.validate(model)?;
        let record = EpochRecord {
            epoch,
            bpr: sum_bpr / n,
            align: sum_align / n,
            total: sum_total / n,
            val_auc: val.map(|v| v.0),
            val_recall: val.map(|v| v.1),
            wall_ms: start.elapsed().as_millis() as u64,
        };
        callbacks.on_epoch(&record)?;
        log.push(record);

        if let Some((auc, _)) = val {
            if cfg.patience > 0 {
                let improved = best.as_ref().is_none_or(|(b, _, _)| auc > *b);
                if improved {
                    best = Some((auc, epoch, model.clone()));
                } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *model = params;
            epoch
        }
        None => log.len(),
    };
    Ok(TrainOutcome {
        log,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edmodel::ModelSpec;
    use crate::encoders::GRecConfig;
    use crate::mdgraph::{ingest, Interaction};
    use crate::walker::SimilarPair;

    fn toy() -> MultiDomainDataset {
        ingest(vec![
            Interaction::new(0, 0, 0),
            Interaction::new(0, 0, 1),
            Interaction::new(0, 1, 1),
            Interaction::new(0, 1, 2),
            Interaction::new(1, 0, 0),
            Interaction::new(1, 2, 3),
            Interaction::new(1, 2, 0),
        ])
        .unwrap()
    }

    fn spec(dim: usize) -> ModelSpec {
        ModelSpec {
            inter_dim: dim,
            intra_dim: dim,
            align_dim: dim,
            encoder: EncoderKind::GRec,
            grec: GRecConfig::default(),
            init_scale: None,
        }
    }

    #[test]
    fn bpr_values() {
        let n = 4;
        let l = bpr_loss(&vec![0.3f64; n], &vec![0.3; n]).unwrap();
        assert!((l - n as f64 * 2f64.ln()).abs() < 1e-12);
        let l = bpr_loss(&[1.5f64], &[0.5]).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for x in [0.0, 1.0, 10.0, 100.0, 1000.0] {
            let l = bpr_loss(&[x], &[0.0f64]).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(bpr_loss(&[1.0f64], &[]).is_err());
    }

    #[test]
    fn forced_triplet_and_empty_count() {
        let ds = ingest(vec![Interaction::new(0, 0, 0), Interaction::new(0, 1, 1)]).unwrap();
        let mut rng = stream(1, &[]);
        for t in sample_triplets(&ds, 0, 50, &mut rng).unwrap() {
            let expect = if t.user.id == 0 { 1 } else { 0 };
            assert_eq!(t.neg_item, NodeId::item(expect));
        }
        assert!(sample_triplets(&ds, 0, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn saturated_users_are_skipped() {
        let ds = ingest(vec![
            Interaction::new(0, 0, 0),
            Interaction::new(0, 0, 1),
            Interaction::new(0, 1, 0),
        ])
        .unwrap();
        let mut rng = stream(2, &[]);
        let ts = sample_triplets(&ds, 0, 100, &mut rng).unwrap();
        assert_eq!(ts.len(), 100);
        assert!(ts.iter().all(|t| t.user == NodeId::user(1) && t.neg_item == NodeId::item(1)));
    }

    #[test]
    fn alignment_hand_value() {
        let ds = toy();
        let mut m = EdModel::<f64>::init(
            ModelSpec {
                inter_dim: 1,
                intra_dim: 2,
                align_dim: 2,
                ..spec(1)
            },
            &ds,
            0,
        )
        .unwrap();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        m.proj_mut(0).copy_from_slice(&eye);
        m.proj_mut(1).copy_from_slice(&eye);
        let u0 = m.intra(0).position(NodeId::user(0)).unwrap();
        let u2 = m.intra(1).position(NodeId::user(2)).unwrap();
        m.intra_mut(0).row_at_mut(u0).copy_from_slice(&[1.0, 0.0]);
        m.intra_mut(1).row_at_mut(u2).copy_from_slice(&[0.0, 2.0]);
        let pairs = vec![SimilarPairSet {
            domain_pair: (0, 1),
            pairs: vec![SimilarPair {
                u: NodeId::user(0),
                v: NodeId::user(2),
                similarity: 1.0,
            }],
        }];
        assert!((alignment_loss(&m, &pairs).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(alignment_loss(&m, &[]).unwrap(), 0.0);
        let missing = vec![SimilarPairSet {
            domain_pair: (0, 1),
            pairs: vec![SimilarPair {
                u: NodeId::user(9),
                v: NodeId::user(2),
                similarity: 1.0,
            }],
        }];
        assert!(alignment_loss(&m, &missing).is_err());
    }

    #[test]
    fn loss_decomposition() {
        let ds = toy();
        let m = EdModel::<f64>::init(spec(3), &ds, 5).unwrap();
        let mut rng = stream(3, &[]);
        let ts = sample_triplets(&ds, 0, 6, &mut rng).unwrap();
        let pairs = crate::walker::mine_all_pairs(&ds, 1, &Default::default()).unwrap();
        let cfg0 = TrainConfig {
            beta: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let local = localize_triplets(&ds, &ts).unwrap();
        let enc = m.encode(&ds, None).unwrap();
        let (p, n): (Vec<f64>, Vec<f64>) = local
            .iter()
            .map(|t| (enc.score_local(&ds, t.d, t.u, t.pos), enc.score_local(&ds, t.d, t.u, t.neg)))
            .unzip();
        let bpr = bpr_loss(&p, &n).unwrap();
        assert_eq!(total_loss(&m, &ds, &ts, &pairs, &cfg0, None).unwrap(), bpr);
        let cfg = TrainConfig::default();
        let total = total_loss(&m, &ds, &ts, &pairs, &cfg, None).unwrap();
        let align = alignment_loss(&m, &pairs).unwrap();
        let rest = total - cfg.beta * align - cfg.lambda * m.l2_norm_sq();
        assert!((rest - bpr).abs() < 1e-12 * bpr.abs().max(1.0));
    }

    #[test]
    fn zero_model_regularizer_vanishes() {
        let ds = toy();
        let m = EdModel::<f64>::init(
            ModelSpec {
                init_scale: Some(0.0),
                ..spec(2)
            },
            &ds,
            0,
        )
        .unwrap();
        let parts = loss_parts(&m, &ds, &[], &[], &TrainConfig::default(), None).unwrap();
        assert_eq!(parts.reg, 0.0);
    }

    #[test]
    fn zero_point_gradient_by_hand() {
        // At the zero point every score is 0, so dL/ds+ = -1/2 and
        // dL/ds- = 1/2, and each embedding gradient is that times a zero row.
        let ds = ingest(vec![Interaction::new(0, 0, 0), Interaction::new(0, 1, 1)]).unwrap();
        let s = ModelSpec {
            inter_dim: 1,
            intra_dim: 1,
            align_dim: 1,
            encoder: EncoderKind::Mf,
            grec: GRecConfig::default(),
            init_scale: Some(0.0),
        };
        let mut m = EdModel::<f64>::init(s, &ds, 0).unwrap();
        let gi0 = ds.global_index(NodeId::item(0)).unwrap();
        let t = Triplet {
            domain: 0,
            user: NodeId::user(0),
            pos_item: NodeId::item(0),
            neg_item: NodeId::item(1),
        };
        let cfg = TrainConfig {
            beta: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let g = gradients(&m, &ds, &[t], &[], &cfg, None).unwrap();
        assert!(g.norm_sq() == 0.0);

        // With the user's inter row at 1: d/d e_i+ = -1/2, d/d e_i- = 1/2.
        let gu = ds.global_index(NodeId::user(0)).unwrap();
        m.inter_mut().row_at_mut(gu)[0] = 1.0;
        let g = gradients(&m, &ds, &[t], &[], &cfg, None).unwrap();
        let gi1 = ds.global_index(NodeId::item(1)).unwrap();
        let inter = g.block(ParamBlock::Inter);
        assert_eq!(inter[gi0], -0.5);
        assert_eq!(inter[gi1], 0.5);
        assert_eq!(inter[gu], 0.0);
    }

    fn finite_difference_check(encoder: EncoderKind, with_masks: bool) {
        let ds = toy();
        let s = ModelSpec {
            inter_dim: 3,
            intra_dim: 2,
            align_dim: 2,
            encoder,
            grec: GRecConfig { num_layers: 2, alpha: 0.1 },
            init_scale: Some(0.8),
        };
        let mut m = EdModel::<f64>::init(s, &ds, 11).unwrap();
        let mut rng = stream(4, &[]);
        let mut ts = sample_triplets(&ds, 0, 5, &mut rng).unwrap();
        ts.extend(sample_triplets(&ds, 1, 5, &mut rng).unwrap());
        let pairs = crate::walker::mine_all_pairs(&ds, 2, &Default::default()).unwrap();
        assert!(pairs.iter().any(|p| !p.is_empty()));
        let cfg = TrainConfig {
            beta: 0.5,
            lambda: 0.01,
            ..Default::default()
        };
        let masks: Option<Vec<EdgeMask>> = with_masks.then(|| {
            ds.domains().iter().map(|g| edge_dropout(g, 0.3, &mut rng)).collect()
        });
        let masks = masks.as_deref();
        let g = gradients(&m, &ds, &ts, &pairs, &cfg, masks).unwrap();
        let h = 1e-5;
        for id in m.block_ids() {
            for j in 0..m.block(id).len() {
                let orig = m.block(id)[j];
                m.block_mut(id)[j] = orig + h;
                let up = total_loss(&m, &ds, &ts, &pairs, &cfg, masks).unwrap();
                m.block_mut(id)[j] = orig - h;
                let down = total_loss(&m, &ds, &ts, &pairs, &cfg, masks).unwrap();
                m.block_mut(id)[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = g.block(id)[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "{id:?}[{j}]: analytic {an} vs numeric {fd}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(EncoderKind::GRec, false);
        finite_difference_check(EncoderKind::GRec, true);
        finite_difference_check(EncoderKind::Mf, false);
    }

    #[test]
    fn gradient_isolation() {
        let ds = toy();
        let m = EdModel::<f64>::init(spec(3), &ds, 2).unwrap();
        let mut rng = stream(9, &[]);
        let ts = sample_triplets(&ds, 0, 10, &mut rng).unwrap();
        let pairs = crate::walker::mine_all_pairs(&ds, 1, &Default::default()).unwrap();
        let cfg = TrainConfig {
            beta: 0.0,
            lambda: 0.0,
            ..Default::default()
        };
        let g = gradients(&m, &ds, &ts, &pairs, &cfg, None).unwrap();
        assert!(g.block(ParamBlock::Intra(1)).iter().all(|&v| v == 0.0));
        assert!(g.block(ParamBlock::Proj(0)).iter().all(|&v| v == 0.0));
        assert!(g.block(ParamBlock::Inter).iter().any(|&v| v != 0.0));
        assert!(g.block(ParamBlock::Intra(0)).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let ds = toy();
        let mut m = EdModel::<f64>::init(spec(2), &ds, 0).unwrap();
        let before = m.clone();
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(&m);
        let zero = Gradients::zeros_like(&m);
        adam_step(&mut m, &zero, &mut st, &cfg).unwrap();
        assert_eq!(m, before);

        let mut g = Gradients::zeros_like(&m);
        g.blocks[0][0] = 1e-3;
        g.blocks[0][1] = -250.0;
        let mut st = AdamState::new(&m);
        adam_step(&mut m, &g, &mut st, &cfg).unwrap();
        let d0 = m.inter().data()[0] - before.inter().data()[0];
        let d1 = m.inter().data()[1] - before.inter().data()[1];
        assert!((d0 + cfg.learning_rate).abs() < 1e-7);
        assert!((d1 - cfg.learning_rate).abs() < 1e-9);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn dropout_retention_and_determinism() {
        let pairs: Vec<(u64, u64)> = (0..100_000u64).map(|k| (k, k)).collect();
        let g = DomainGraph::new(0, pairs);
        let mut rng = stream(7, &[]);
        let mask = edge_dropout(&g, 0.3, &mut rng);
        let frac = mask.num_retained() as f64 / g.num_edges() as f64;
        assert!((frac - 0.7).abs() < 0.01, "{frac}");
        assert_eq!(edge_dropout(&g, 0.0, &mut rng).num_retained(), g.num_edges());
        let again = edge_dropout(&g, 0.3, &mut stream(7, &[]));
        assert_eq!(mask, again);
    }

    #[test]
    fn negative_sampling_is_uniform() {
        // user 0 has item 0; items 1, 2, 3 are eligible negatives
        let ds = ingest(vec![
            Interaction::new(0, 0, 0),
            Interaction::new(0, 1, 1),
            Interaction::new(0, 1, 2),
            Interaction::new(0, 1, 3),
        ])
        .unwrap();
        let g = ds.domain(0).unwrap();
        let u0 = g.local(NodeId::user(0)).unwrap();
        let mut rng = stream(8, &[]);
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let neg = sample_negative(g, u0, &mut rng).unwrap();
            counts[g.node(neg).id as usize] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((*c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let ds = toy();
        let mut m = EdModel::<f64>::init(spec(2), &ds, 0).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train(&mut m, &ds, &[], &cfg, &mut ()).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn batches_cover_each_interaction_once() {
        let ds = toy();
        let mut rng = stream(1, &[]);
        let batches = epoch_batches(&ds, 2, &mut rng);
        for g in ds.domains() {
            let mut seen: Vec<usize> = batches
                .iter()
                .filter(|b| b.d == g.domain())
                .flat_map(|b| b.edges.iter().copied())
                .collect();
            seen.sort();
            assert_eq!(seen, (0..g.num_edges()).collect::<Vec<_>>());
        }
        assert_eq!(batches.first().map(|b| b.d), Some(0));
    }
}
