use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder_fusion::DecoderConfig;
use crate::error::{ensure, Error, Result};
use crate::losses_metrics::LossConfig;
use crate::mask_optimizer::DEFAULT_STEPS;
use crate::nn::AdamWConfig;
use crate::text_prior::{EncoderConfig, DEFAULT_TEXT_DIM};
use crate::NUM_CLASSES;

/// Which of the three contributed modules are active. `false` bypasses it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub fgmpa: bool,
    pub mlff: bool,
    pub imo: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { fgmpa: true, mlff: true, imo: true }
    }
}

impl Ablation {
    pub fn none() -> Self {
        Self { fgmpa: false, mlff: false, imo: false }
    }

    /// Disables one module by its flag name.
    pub fn disable(&mut self, flag: &str) -> Result<()> {
        match flag {
            "fgmpa" => self.fgmpa = false,
            "mlff" => self.mlff = false,
            "imo" => self.imo = false,
            other => return Err(Error::Argument(format!("unknown ablation flag `{other}` (fgmpa, mlff, imo)"))),
        }
        Ok(())
    }

    /// Parameter-name prefixes owned by a flag's module.
    pub fn module_prefixes(flag: &str) -> Result<&'static [&'static str]> {
        Ok(match flag {
            "fgmpa" => &["prior.", "fusion.align."],
            "mlff" => &["fusion.up1.", "fusion.up2.", "fusion.phi.", "fusion.align."],
            "imo" => &["refiner."],
            other => return Err(Error::Argument(format!("unknown ablation flag `{other}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSourceConfig {
    Template,
    /// Uses the endpoint from the environment when set, templates otherwise.
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub classes: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub text_dim: usize,
    pub refine_steps: usize,
    /// Concatenate the input image before the last two 1x1 layers of the head.
    pub head_image_skip: bool,
    pub prompts: PromptSourceConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: NUM_CLASSES,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            text_dim: DEFAULT_TEXT_DIM,
            refine_steps: DEFAULT_STEPS,
            head_image_skip: true,
            prompts: PromptSourceConfig::Template,
        }
    }
}

impl ModelConfig {
    pub fn image_size(&self) -> usize {
        self.encoder.image_size
    }

    /// Side of the fusion / refinement grid.
    pub fn low_res(&self) -> usize {
        4 * self.encoder.grid()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        ensure!(
            self.classes == NUM_CLASSES,
            Error::Config(format!("the organ vocabulary has {NUM_CLASSES} classes, config says {}", self.classes))
        );
        ensure!(
            self.decoder.dim == self.encoder.dim,
            Error::Config("decoder width must equal encoder width".into())
        );
        ensure!(
            self.image_size() == 4 * self.low_res(),
            Error::Config(format!("image size {} must be 4x the fusion grid {}", self.image_size(), self.low_res()))
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub ablation: Ablation,
    pub epochs: usize,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub seed: u64,
    /// Random rotation (±20°) and flips.
    pub augment: bool,
    /// Fraction of training slices used (few-shot switch).
    pub train_fraction: f64,
    /// Validation mDice is computed every this many epochs (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            ablation: Ablation::default(),
            epochs: 50,
            max_steps: None,
            batch_size: 4,
            seed: 7,
            augment: false,
            train_fraction: 1.0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        ensure!(self.batch_size > 0, Error::Config("batch size must be positive".into()));
        ensure!(self.epochs > 0, Error::Config("epochs must be positive".into()));
        ensure!(
            self.train_fraction > 0.0 && self.train_fraction <= 1.0,
            Error::Config(format!("train fraction {} outside (0, 1]", self.train_fraction))
        );
        ensure!(
            self.loss.low_res == self.model.low_res() && self.loss.high_res == self.model.image_size(),
            Error::Config(format!(
                "loss resolutions {}/{} disagree with the model ({}/{})",
                self.loss.low_res,
                self.loss.high_res,
                self.model.low_res(),
                self.model.image_size()
            ))
        );
        let o = &self.optimizer;
        ensure!(
            o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.weight_decay >= 0.0,
            Error::Config("optimizer hyperparameters out of range".into())
        );
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the compact JSON of everything that shapes the model and
    /// the optimization (not the epoch budget, so runs can be extended).
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.remove("epochs");
        obj.remove("max_steps");
        obj.remove("eval_every");
        hex(&Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back = TrainConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let json: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(json["optimizer"]["beta1"], 0.9);
        assert_eq!(json["optimizer"]["beta2"], 0.999);
        assert_eq!(json["optimizer"]["weight_decay"], 0.1);
        assert_eq!(json["model"]["encoder"]["lora_rank"], 4);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = TrainConfig::from_json(r#"{"seed": 3, "batch_size": 2}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.optimizer, AdamWConfig::default());
    }

    #[test]
    fn hash_ignores_epoch_budget_only() {
        let a = TrainConfig::default();
        let b = TrainConfig { epochs: 3, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let c = TrainConfig { seed: 8, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn unknown_flag_is_rejected() {
        assert!(matches!(Ablation::default().disable("xyz"), Err(Error::Argument(_))));
        let mut a = Ablation::default();
        a.disable("imo").unwrap();
        assert!(!a.imo && a.fgmpa && a.mlff);
    }

    #[test]
    fn mismatched_classes_is_config_error() {
        let mut c = TrainConfig::default();
        c.model.classes = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
