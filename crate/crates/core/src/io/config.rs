//! TOML experiment configuration. Unknown keys are rejected, omitted keys
//! take documented defaults and the fully resolved configuration is what
//! gets hashed, logged and stored in checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Geometry;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{BpScaling, ModelConfig, Padding, Variant, UNET_FILTERS};
use crate::train::{AdamConfig, LossWeights, SsimParams, TrainConfig};

const MAX_SIDE: usize = 2048;
const MAX_VIEWS: usize = 2048;
const MAX_FILTERS: usize = 512;
const MAX_BATCH: usize = 4096;
const MAX_EPOCHS: usize = 100_000;
const MAX_SPLIT: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySection {
    pub n: usize,
    /// Defaults to `n`.
    pub n_det: Option<usize>,
    pub nv_few: usize,
    /// Defaults to `2 * nv_few`.
    pub nv_dense: Option<usize>,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            n: 64,
            n_det: None,
            nv_few: 15,
            nv_dense: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    pub padding: Padding,
    pub bp_scaling: BpScaling,
    pub unet_filters: usize,
    pub final_relu: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            variant: Variant::DeerNowgan,
            padding: Padding::Same,
            bp_scaling: BpScaling::PerView,
            unet_filters: UNET_FILTERS,
            final_relu: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr_base: f64,
    pub lr_pretrain: f64,
    pub bp_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub critic_steps: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let t = TrainConfig::new(ModelConfig::new(64, 30, Variant::DeerNowgan));
        OptimSection {
            lr_base: t.lr_base,
            lr_pretrain: t.lr_pretrain,
            bp_lr_ratio: t.bp_lr_ratio,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            critic_steps: t.critic_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub batch_pretrain: usize,
    pub batch_joint: usize,
    pub epochs_pretrain: usize,
    pub epochs_joint: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let t = TrainConfig::new(ModelConfig::new(64, 30, Variant::DeerNowgan));
        ScheduleSection {
            batch_pretrain: t.batch_pretrain,
            batch_joint: t.batch_joint,
            epochs_pretrain: t.epochs_pretrain,
            epochs_joint: t.epochs_joint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Base seed of the phantom generator; splits use disjoint seed blocks.
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seed: 0,
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

/// One experiment: geometry, model, losses, optimizer, schedule and data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of weight initialization and batch shuffling.
    #[serde(default)]
    pub seed: u64,
    /// Output directory; not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub geometry: GeometrySection,
    #[serde(default)]
    pub model: ModelSection,
    /// Defaults to the weights of the chosen variant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossWeights>,
    #[serde(default)]
    pub ssim: SsimParams,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub data: DataSection,
}

impl ExperimentConfig {
    /// Parses, fills defaults and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Every optional value made explicit.
    pub fn resolved(mut self) -> Self {
        let g = &mut self.geometry;
        g.n_det.get_or_insert(g.n);
        g.nv_dense.get_or_insert(2 * g.nv_few);
        self.loss
            .get_or_insert_with(|| LossWeights::for_variant(self.model.variant));
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geometry()?;
        let in_range = |name: &str, v: usize, lo: usize, hi: usize| {
            if v < lo || v > hi {
                Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        in_range("geometry.n", g.n, Image::MIN_SIZE, MAX_SIDE)?;
        in_range("geometry.n_det", g.n_det, 1, 2 * MAX_SIDE)?;
        in_range("geometry.nv_few", g.nv_few, 1, MAX_VIEWS)?;
        in_range("geometry.nv_dense", g.nv_dense, 1, MAX_VIEWS)?;
        in_range(
            "model.unet_filters",
            self.model.unet_filters,
            1,
            MAX_FILTERS,
        )?;
        in_range(
            "schedule.batch_pretrain",
            self.schedule.batch_pretrain,
            1,
            MAX_BATCH,
        )?;
        in_range(
            "schedule.batch_joint",
            self.schedule.batch_joint,
            1,
            MAX_BATCH,
        )?;
        in_range(
            "schedule.epochs_pretrain",
            self.schedule.epochs_pretrain,
            0,
            MAX_EPOCHS,
        )?;
        in_range(
            "schedule.epochs_joint",
            self.schedule.epochs_joint,
            0,
            MAX_EPOCHS,
        )?;
        in_range("data.train", self.data.train, 0, MAX_SPLIT)?;
        in_range("data.val", self.data.val, 0, MAX_SPLIT)?;
        in_range("data.test", self.data.test, 0, MAX_SPLIT)?;
        let o = &self.optim;
        if !(o.lr_base <= 1.0 && o.lr_pretrain <= 1.0) {
            return Err(Error::Config(format!(
                "learning rates must be <= 1, got {} and {}",
                o.lr_base, o.lr_pretrain
            )));
        }
        self.train_config()?.validate()
    }

    pub fn geometry(&self) -> Result<Geometry> {
        let g = &self.geometry;
        let geom = Geometry {
            n: g.n,
            n_det: g.n_det.unwrap_or(g.n),
            nv_few: g.nv_few,
            nv_dense: g.nv_dense.unwrap_or(2 * g.nv_few),
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let g = self.geometry()?;
        let m = &self.model;
        Ok(ModelConfig {
            n: g.n,
            n_det: g.n_det,
            nv_dense: g.nv_dense,
            variant: m.variant,
            padding: m.padding,
            bp_scaling: m.bp_scaling,
            unet_filters: m.unet_filters,
            final_relu: m.final_relu,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let model = self.model_config()?;
        let o = &self.optim;
        let s = &self.schedule;
        Ok(TrainConfig {
            loss: self
                .loss
                .unwrap_or_else(|| LossWeights::for_variant(model.variant)),
            model,
            ssim: self.ssim,
            adam: AdamConfig {
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            },
            lr_base: o.lr_base,
            lr_pretrain: o.lr_pretrain,
            bp_lr_ratio: o.bp_lr_ratio,
            batch_pretrain: s.batch_pretrain,
            batch_joint: s.batch_joint,
            epochs_pretrain: s.epochs_pretrain,
            epochs_joint: s.epochs_joint,
            critic_steps: o.critic_steps,
            seed: self.seed,
        })
    }

    /// SHA-256 of the resolved configuration without `out_dir`.
    pub fn hash(&self) -> String {
        let mut canon = self.clone().resolved();
        canon.out_dir = None;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_resolves_to_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(
            t,
            TrainConfig::new(ModelConfig::new(64, 30, Variant::DeerNowgan))
        );
        assert_eq!(cfg.geometry.nv_dense, Some(30));
        assert_eq!(
            cfg.loss,
            Some(LossWeights::for_variant(Variant::DeerNowgan))
        );
    }

    #[test]
    fn loss_defaults_follow_the_variant() {
        let cfg = ExperimentConfig::from_toml("[model]\nvariant = \"deer-sino\"\n").unwrap();
        assert_eq!(cfg.loss.unwrap().lambda_sl, 0.65);
        let cfg = ExperimentConfig::from_toml("[model]\nvariant = \"deer\"\n[loss]\nlambda_al = 0.01\nlambda_sl = 0.5\nlambda_gp = 0.0\nclip_c = 0.02\n").unwrap();
        assert_eq!(cfg.train_config().unwrap().loss.lambda_al, 0.01);
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_rejected() {
        for text in [
            "bogus = 1\n",
            "[geometry]\nn = 64\nnv_few = 15\nextra = 2\n",
            "[model]\nvariant = \"deer-xl\"\n",
            "[geometry]\nn = 4\nnv_few = 15\n",
            "[geometry]\nn = 64\nnv_few = 0\n",
            "[optim]\nlr_base = -1.0\n",
            "[optim]\nlr_base = 2.0\n",
            "[schedule]\nbatch_joint = 0\n",
            "[model]\nunet_filters = 0\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn hash_ignores_out_dir_and_spelling_of_defaults() {
        let a = ExperimentConfig::from_toml("out_dir = \"a\"\n").unwrap();
        let b = ExperimentConfig::from_toml(
            "out_dir = \"b\"\n[geometry]\nn = 64\nnv_few = 15\nnv_dense = 30\n",
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml("seed = 1\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn resolved_toml_round_trips() {
        let cfg =
            ExperimentConfig::from_toml("[model]\nvariant = \"deer-lite\"\n[data]\ntrain = 10\n")
                .unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }
}
