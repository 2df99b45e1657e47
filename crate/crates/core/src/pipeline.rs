//! Model variants and an end-to-end split/train/evaluate run.

use crate::edmodel::{EdModel, ModelSpec};
use crate::encoders::EncoderKind;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalReport, EvalSet, SplitDataset};
use crate::scalar::Scalar;
use crate::trainer::{train, EpochRecord, TrainCallbacks, TrainConfig, TrainOutcome};
use crate::walker::SimilarPairSet;

/// Full model and its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Disentangled embeddings with domain alignment.
    Edda,
    /// Disentangled embeddings, no alignment term.
    WoDa,
    /// One shared table only, twice the per-table size.
    Inter,
    /// Per-domain tables only, twice the per-table size.
    Intra,
    /// Disentangled embeddings with the MF encoder, no alignment term.
    EdMf,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Edda, Variant::WoDa, Variant::Inter, Variant::Intra, Variant::EdMf];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Edda => "edda",
            Variant::WoDa => "wo-da",
            Variant::Inter => "inter",
            Variant::Intra => "intra",
            Variant::EdMf => "ed-mf",
        }
    }

    /// Model shape of the variant given the full model's shape. The encoder
    /// of `base` is kept except for `ed-mf`, which always uses MF.
    pub fn model_spec(self, base: &ModelSpec) -> ModelSpec {
        let both = base.inter_dim + base.intra_dim;
        let mut spec = base.clone();
        match self {
            Variant::Edda | Variant::WoDa => {}
            Variant::Inter => {
                spec.inter_dim = both;
                spec.intra_dim = 0;
            }
            Variant::Intra => {
                spec.inter_dim = 0;
                spec.intra_dim = both;
            }
            Variant::EdMf => spec.encoder = EncoderKind::Mf,
        }
        spec
    }

    pub fn uses_alignment(self) -> bool {
        self == Variant::Edda
    }

    /// Training config of the variant: `beta` is zeroed unless the variant
    /// aligns domains.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if !self.uses_alignment() {
            cfg.beta = 0.0;
        }
        cfg
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown variant `{s}` (expected edda, wo-da, inter, intra or ed-mf)"))
    }
}

/// Evaluates the validation cases after every epoch and forwards records to
/// an optional sink.
pub struct Validation<'a> {
    pub split: &'a SplitDataset,
    pub cases: &'a EvalSet,
    pub sink: Option<&'a mut dyn FnMut(&EpochRecord) -> Result<()>>,
}

impl<T: Scalar> TrainCallbacks<T> for Validation<'_> {
    fn validate(&mut self, model: &EdModel<T>) -> Result<Option<(f64, f64)>> {
        let r = evaluate(model, self.split, self.cases)?;
        Ok(Some((r.avg_auc(), r.avg_recall_at_1())))
    }

    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        match self.sink.as_mut() {
            Some(f) => f(record),
            None => Ok(()),
        }
    }
}

pub struct RunResult<T> {
    pub model: EdModel<T>,
    pub outcome: TrainOutcome,
    pub test: EvalReport,
}

/// Initializes, trains with early stopping on validation AUC and evaluates
/// one variant.
#[allow(clippy::too_many_arguments)]
pub fn run_variant<T: Scalar>(
    variant: Variant,
    base_spec: &ModelSpec,
    base_train: &TrainConfig,
    split: &SplitDataset,
    pairs: &[SimilarPairSet],
    validation: &EvalSet,
    test: &EvalSet,
    init_seed: u64,
) -> Result<RunResult<T>> {
    let spec = variant.model_spec(base_spec);
    let cfg = variant.train_config(base_train);
    let mut model = EdModel::<T>::init(spec, &split.train, init_seed)?;
    let pairs: &[SimilarPairSet] = if cfg.beta == 0.0 { &[] } else { pairs };
    if variant.uses_alignment() && pairs.iter().all(SimilarPairSet::is_empty) && cfg.beta != 0.0 {
        log::warn!("no similar pairs available; alignment term is empty");
    }
    let mut cb = Validation {
        split,
        cases: validation,
        sink: None,
    };
    let outcome = train(&mut model, &split.train, pairs, &cfg, &mut cb)?;
    let test = evaluate(&model, split, test)?;
    if test.domains.iter().any(|m| m.num_cases == 0) {
        return Err(Error::InvalidConfig("a domain has no test cases".into()));
    }
    Ok(RunResult { model, outcome, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_shapes() {
        let base = ModelSpec {
            inter_dim: 8,
            intra_dim: 8,
            ..Default::default()
        };
        let s = Variant::Inter.model_spec(&base);
        assert_eq!((s.inter_dim, s.intra_dim), (16, 0));
        let s = Variant::Intra.model_spec(&base);
        assert_eq!((s.inter_dim, s.intra_dim), (0, 16));
        assert_eq!(Variant::EdMf.model_spec(&base).encoder, EncoderKind::Mf);
        let cfg = TrainConfig::default();
        assert_eq!(Variant::WoDa.train_config(&cfg).beta, 0.0);
        assert_eq!(Variant::Edda.train_config(&cfg).beta, cfg.beta);
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
