use edda_core::mdgraph::{ingest, NodeId};
use edda_core::trainer::{alignment_loss, train};
use edda_core::{EdModel64, Interaction, ModelSpec, MultiDomainDataset, SimilarPair, SimilarPairSet, TrainConfig};

/// Two domains; in each, even users like items 0..8 and odd users like 8..16.
fn separable() -> MultiDomainDataset {
    let mut recs = Vec::new();
    for d in 0..2usize {
        for u in 0..64u64 {
            let base = if u % 2 == 0 { 0 } else { 8 };
            for i in base..base + 8 {
                recs.push(Interaction::new(d, u + 100 * d as u64, i + 100 * d as u64));
            }
        }
    }
    ingest(recs).unwrap()
}

fn small_spec() -> ModelSpec {
    ModelSpec {
        inter_dim: 4,
        intra_dim: 4,
        align_dim: 4,
        ..Default::default()
    }
}

#[test]
fn bpr_loss_trends_down_on_a_separable_toy() {
    let ds = separable();
    let mut model = EdModel64::init(small_spec(), &ds, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 128,
        learning_rate: 0.003,
        edge_dropout: 0.0,
        beta: 0.0,
        patience: 0,
        seed: 4,
        ..Default::default()
    };
    let out = train(&mut model, &ds, &[], &cfg, &mut ()).unwrap();
    assert_eq!(out.log.len(), 50);
    let decreasing = out.log.windows(2).filter(|w| w[1].bpr < w[0].bpr).count();
    assert!(decreasing as f64 >= 0.9 * 49.0, "{decreasing} of 49 epoch pairs decreased");
    assert!(out.log[49].bpr < 0.5 * out.log[0].bpr);
}

#[test]
fn heavy_alignment_pulls_a_pair_together() {
    let ds = separable();
    let mut model = EdModel64::init(small_spec(), &ds, 2).unwrap();
    let pairs = vec![SimilarPairSet {
        domain_pair: (0, 1),
        pairs: vec![SimilarPair {
            u: NodeId::user(0),
            v: NodeId::user(102),
            similarity: 1.0,
        }],
    }];
    let before = alignment_loss(&model, &pairs).unwrap();
    assert!(before > 0.0);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 64,
        learning_rate: 0.01,
        beta: 1e3,
        patience: 0,
        ..Default::default()
    };
    train(&mut model, &ds, &pairs, &cfg, &mut ()).unwrap();
    let after = alignment_loss(&model, &pairs).unwrap();
    assert!(after * 10.0 <= before, "distance {before} -> {after}");
}
