//! Run configuration: `key = value` files with command-line overrides.

use std::collections::BTreeMap;
use std::path::Path;

use edda_core::edmodel::{parse_key_values, ModelSpec};
use edda_core::{EncoderKind, TrainConfig, Variant, WalkConfig};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed of the evaluation negatives; defaults to `seed`.
    pub eval_seed: Option<u64>,
    pub threads: usize,
    pub variant: Variant,
    /// Encoder for the variant; `ed-mf` always uses MF.
    pub encoder: EncoderKind,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub walk: WalkConfig,
    pub split: (u32, u32, u32),
    pub deterministic: bool,
    /// Save a checkpoint every N epochs; 0 saves only the final model.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            eval_seed: None,
            threads: 0,
            variant: Variant::Edda,
            encoder: EncoderKind::GRec,
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            walk: WalkConfig::default(),
            split: (7, 1, 2),
            deterministic: false,
            checkpoint_every: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(format!("invalid value `{value}` for `{key}` (expected true or false)")),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "eval_seed" => self.eval_seed = Some(parse(key, v)?),
            "threads" => self.threads = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "encoder" => self.encoder = v.parse()?,
            "inter_dim" => self.model.inter_dim = parse(key, v)?,
            "intra_dim" => self.model.intra_dim = parse(key, v)?,
            "align_dim" => self.model.align_dim = parse(key, v)?,
            "num_layers" => self.model.grec.num_layers = parse(key, v)?,
            "alpha" => self.model.grec.alpha = parse(key, v)?,
            "init_scale" => self.model.init_scale = Some(parse(key, v)?),
            "beta" => self.train.beta = parse(key, v)?,
            "lambda" => self.train.lambda = parse(key, v)?,
            "learning_rate" => self.train.learning_rate = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "edge_dropout" => self.train.edge_dropout = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "k" => self.train.k = parse(key, v)?,
            "adam_beta1" => self.train.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.train.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.train.adam_eps = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "walk_length" => self.walk.walk_length = parse(key, v)?,
            "num_walks" => self.walk.num_walks = parse(key, v)?,
            "split" => {
                let parts: Vec<u32> = v.split(':').map(|p| parse(key, p)).collect::<Result<_, _>>()?;
                match parts[..] {
                    [a, b, c] => self.split = (a, b, c),
                    _ => return Err(format!("`split` expects three ratios like 7:1:2, got `{v}`")),
                }
            }
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            other => return Err(format!("unknown configuration key `{other}`")),
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let kv = parse_key_values(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        for (k, v) in kv {
            self.set(&k, &v).map_err(|e| format!("{}: {e}", path.display()))?;
        }
        Ok(())
    }

    /// Seeds every component from the root seed and validates ranges.
    pub fn resolve(&mut self) -> Result<(), String> {
        self.train.seed = self.seed;
        self.walk.rng_seed = self.seed;
        self.train.validate().map_err(|e| e.to_string())?;
        self.walk.validate().map_err(|e| e.to_string())?;
        self.model_spec().validate().map_err(|e| e.to_string())?;
        if self.split.0 == 0 || self.split.1 == 0 || self.split.2 == 0 {
            return Err("split ratios must be positive".into());
        }
        Ok(())
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval_seed.unwrap_or(self.seed)
    }

    /// Model shape after applying the variant.
    pub fn model_spec(&self) -> ModelSpec {
        let mut base = self.model.clone();
        base.encoder = self.encoder;
        self.variant.model_spec(&base)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.variant.train_config(&self.train)
    }

    /// Every setting, for the run manifest.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("eval_seed", self.eval_seed().to_string());
        put("threads", self.threads.to_string());
        put("variant", self.variant.to_string());
        put("encoder", self.encoder.as_str().to_string());
        put("inter_dim", self.model.inter_dim.to_string());
        put("intra_dim", self.model.intra_dim.to_string());
        put("align_dim", self.model.align_dim.to_string());
        put("num_layers", self.model.grec.num_layers.to_string());
        put("alpha", self.model.grec.alpha.to_string());
        put("init_scale", self.model.init_scale.map_or("auto".into(), |s| s.to_string()));
        put("beta", self.train.beta.to_string());
        put("lambda", self.train.lambda.to_string());
        put("learning_rate", self.train.learning_rate.to_string());
        put("batch_size", self.train.batch_size.to_string());
        put("edge_dropout", self.train.edge_dropout.to_string());
        put("epochs", self.train.epochs.to_string());
        put("k", self.train.k.to_string());
        put("adam_beta1", self.train.adam_beta1.to_string());
        put("adam_beta2", self.train.adam_beta2.to_string());
        put("adam_eps", self.train.adam_eps.to_string());
        put("patience", self.train.patience.to_string());
        put("walk_length", self.walk.walk_length.to_string());
        put("num_walks", self.walk.num_walks.to_string());
        put("split", format!("{}:{}:{}", self.split.0, self.split.1, self.split.2));
        put("deterministic", self.deterministic.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let mut c = RunConfig::default();
        assert_eq!(c.train.beta, 0.03);
        assert_eq!(c.train.batch_size, 8092);
        assert_eq!(c.walk.num_walks, 500);
        c.set("variant", "intra").unwrap();
        c.set("split", "8:1:1").unwrap();
        assert_eq!(c.split, (8, 1, 1));
        assert_eq!(c.model_spec().inter_dim, 0);
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("epochs", "x").is_err());
        assert!(c.set("split", "1:2").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("seed", "7").unwrap();
        c.set("variant", "ed-mf").unwrap();
        let mut back = RunConfig::default();
        for (k, v) in c.entries() {
            if k == "init_scale" {
                continue;
            }
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back.entries(), c.entries());
    }
}
