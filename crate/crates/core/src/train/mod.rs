//! Losses, Adam and the two-phase training schedule: the back-projection
//! layer is pretrained alone on `L1_bp`, then the whole generator (and the
//! critic when the adversarial weight is non-zero) is trained jointly.

pub mod adam;
pub mod loss;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{self, Psnr};
use crate::model::{Discriminator, GenInput, Generator, ModelConfig, Network};
use crate::tensor::{Gradients, Graph, Tensor, Var};

pub use adam::{Adam, AdamConfig};
pub use loss::{LossWeights, SsimParams, SsimWindow};

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub ssim: SsimParams,
    pub adam: AdamConfig,
    /// Learning rate of the U-net and the critic in the joint phase.
    pub lr_base: f64,
    /// Learning rate of the back-projection layer while pretraining.
    pub lr_pretrain: f64,
    /// Back-projection learning rate in the joint phase, relative to
    /// `lr_base`.
    pub bp_lr_ratio: f64,
    pub batch_pretrain: usize,
    pub batch_joint: usize,
    pub epochs_pretrain: usize,
    pub epochs_joint: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        TrainConfig {
            loss: LossWeights::for_variant(model.variant),
            model,
            ssim: SsimParams::default(),
            adam: AdamConfig::default(),
            lr_base: 1e-4,
            lr_pretrain: 1e-3,
            bp_lr_ratio: 0.1,
            batch_pretrain: 5,
            batch_joint: 3,
            epochs_pretrain: 10,
            epochs_joint: 50,
            critic_steps: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.ssim.validate()?;
        self.adam.validate()?;
        for (name, lr) in [
            ("lr_base", self.lr_base),
            ("lr_pretrain", self.lr_pretrain),
            ("bp_lr_ratio", self.bp_lr_ratio),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and > 0, got {lr}"
                )));
            }
        }
        if self.batch_pretrain == 0 || self.batch_joint == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be >= 1".into()));
        }
        if self.model.n < self.ssim.window {
            return Err(Error::Config(format!(
                "image side {} below ssim window {}",
                self.model.n, self.ssim.window
            )));
        }
        Ok(())
    }

    /// Pretraining epochs actually run: none without a learned
    /// back-projection.
    pub fn pretrain_epochs(&self) -> usize {
        if self.model.variant.bp_variant().is_some() {
            self.epochs_pretrain
        } else {
            0
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs() + self.epochs_joint
    }

    pub fn phase_of(&self, epoch: usize) -> Phase {
        if epoch < self.pretrain_epochs() {
            Phase::PretrainBp
        } else {
            Phase::Joint
        }
    }

    pub fn lr_bp_joint(&self) -> f64 {
        self.lr_base * self.bp_lr_ratio
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    PretrainBp,
    Joint,
}

/// Which image the per-epoch validation scores describe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Bp,
    Output,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_base: f64,
    pub lr_bp: f64,
    pub loss_total: f64,
    pub loss_l1: Option<f64>,
    pub loss_l1_bp: Option<f64>,
    pub loss_sl: Option<f64>,
    pub loss_al: Option<f64>,
    pub loss_critic: Option<f64>,
    pub val_stage: Stage,
    pub val_psnr: Psnr,
    pub val_ssim: f64,
    pub val_mae: f64,
}

/// Everything a run needs to continue: parameters, optimizer moments and
/// the position in the schedule.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub generator: Generator<f32>,
    pub critic: Option<Discriminator<f32>>,
    pub opt_bp: Option<Adam>,
    pub opt_unet: Adam,
    pub opt_critic: Option<Adam>,
    /// Completed epochs.
    pub epoch: usize,
    pub phase: Phase,
    pub seed: u64,
}

/// Position in the schedule, stored next to the tensors of a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateMeta {
    pub epoch: usize,
    pub phase: Phase,
    pub seed: u64,
    pub steps_bp: u64,
    pub steps_unet: u64,
    pub steps_critic: u64,
}

/// A named array of a checkpoint.
pub type NamedArray = (String, Vec<usize>, Vec<f32>);

/// Pulls one named array of a given shape out of a checkpoint table.
type Take<'a> = dyn FnMut(&str, &[usize]) -> Result<Vec<f32>> + 'a;

/// Running means of the loss components over an epoch.
#[derive(Default)]
struct Means {
    sums: HashMap<&'static str, (f64, usize)>,
}

impl Means {
    fn add(&mut self, key: &'static str, v: f64) {
        let e = self.sums.entry(key).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    fn get(&self, key: &str) -> Option<f64> {
        self.sums.get(key).map(|&(s, c)| s / c as f64)
    }
}

fn accumulate<'a>(
    grads: &Gradients<f32>,
    vars: &[Var],
    params: Vec<(String, &'a mut Tensor<f32>)>,
) -> Result<Vec<(String, &'a mut Tensor<f32>)>> {
    let mut params = params;
    for ((_, t), &v) in params.iter_mut().zip(vars) {
        grads.accumulate_into(v, t)?;
    }
    Ok(params)
}

impl TrainState {
    /// Fresh networks and zero moments, initialized from `cfg.seed`.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(cfg.model.clone(), &mut rng)?;
        let critic = if cfg.loss.adversarial() {
            Some(Discriminator::new(cfg.model.n, cfg.loss.clip_c, &mut rng)?)
        } else {
            None
        };
        let opt_bp = generator.bp().map(|bp| Adam::new(cfg.adam, &bp.params()));
        let opt_unet = Adam::new(cfg.adam, &generator.unet().params());
        let opt_critic = critic.as_ref().map(|c| Adam::new(cfg.adam, &c.params()));
        Ok(TrainState {
            generator,
            critic,
            opt_bp,
            opt_unet,
            opt_critic,
            epoch: 0,
            phase: cfg.phase_of(0),
            seed: cfg.seed,
        })
    }

    pub fn is_finished(&self, cfg: &TrainConfig) -> bool {
        self.epoch >= cfg.total_epochs()
    }

    fn check_data(&self, cfg: &TrainConfig, data: &Dataset, what: &str) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Invalid(format!("{what} set is empty")));
        }
        let g = data.geometry();
        if g.n != cfg.model.n || g.n_det != cfg.model.n_det || g.nv_dense != cfg.model.nv_dense {
            return Err(Error::shape(
                "train",
                format!(
                    "{what} geometry {g:?} does not match model (n {}, n_det {}, dense views {})",
                    cfg.model.n, cfg.model.n_det, cfg.model.nv_dense
                ),
            ));
        }
        Ok(())
    }

    /// One optimizer step of the back-projection layer on `L1_bp`; returns
    /// the loss before the step.
    pub fn pretrain_step(
        &mut self,
        cfg: &TrainConfig,
        batch: &Batch,
        angles: &[f64],
    ) -> Result<f64> {
        let n = cfg.model.n;
        let (Some(bp), Some(opt)) = (self.generator.bp(), self.opt_bp.as_mut()) else {
            return Err(Error::Invalid(
                "variant has no back-projection layer to pretrain".into(),
            ));
        };
        let mut g = Graph::new();
        let p = bp.bind(&mut g);
        let input = GenInput {
            filtered: &batch.filtered,
            angles,
            fbp: &batch.fbp,
            batch: batch.size,
        };
        let x = self
            .generator
            .forward_bp(&mut g, &p, &input)?
            .expect("bp layer present");
        let y = g.constant([batch.size, 1, n, n], batch.target.clone())?;
        let l = loss::mae(&mut g, x, y)?;
        let value = g.scalar(l) as f64;
        let grads = g.backward(l)?;
        let bp = self.generator.bp_mut().expect("bp layer present");
        let params = accumulate(&grads, &p, bp.params_mut())?;
        opt.step(params, cfg.lr_pretrain)?;
        Ok(value)
    }

    /// Critic update(s) on a detached generated batch, then one generator
    /// update; loss components are added to `means`.
    fn joint_step(
        &mut self,
        cfg: &TrainConfig,
        batch: &Batch,
        angles: &[f64],
        means: &mut Means,
    ) -> Result<()> {
        let n = cfg.model.n;
        let shape = [batch.size, 1, n, n];
        let mut g = Graph::new();
        let p = self.generator.bind(&mut g);
        let input = GenInput {
            filtered: &batch.filtered,
            angles,
            fbp: &batch.fbp,
            batch: batch.size,
        };
        let out = self.generator.forward(&mut g, &p, &input)?;
        let y = g.constant(shape, batch.target.clone())?;

        let mut adversarial = None;
        if let (Some(critic), Some(opt)) = (self.critic.as_mut(), self.opt_critic.as_mut()) {
            let fake = g.value(out.out).to_vec();
            for _ in 0..cfg.critic_steps {
                let mut cg = Graph::new();
                let cp = critic.bind(&mut cg);
                let f = cg.constant(shape, fake.clone())?;
                let r = cg.constant(shape, batch.target.clone())?;
                let fs = critic.forward(&mut cg, &cp, f)?;
                let rs = critic.forward(&mut cg, &cp, r)?;
                let l = loss::discriminator(&mut cg, fs, rs)?;
                means.add("critic", cg.scalar(l) as f64);
                let grads = cg.backward(l)?;
                let params = accumulate(&grads, &cp, critic.params_mut())?;
                opt.step(params, cfg.lr_base)?;
                critic.clip(cfg.loss.clip_c);
            }
            let cp = critic.bind_frozen(&mut g);
            let scores = critic.forward(&mut g, &cp, out.out)?;
            adversarial = Some(loss::adversarial(&mut g, scores));
        }

        let terms = loss::GeneratorTerms {
            l1: loss::mae(&mut g, out.out, y)?,
            l1_bp: out.bp.map(|b| loss::mae(&mut g, b, y)).transpose()?,
            structural: loss::structural(&mut g, out.out, y, &cfg.ssim)?,
            adversarial,
        };
        let total = loss::generator_total(&mut g, &terms, &cfg.loss)?;
        means.add("total", g.scalar(total) as f64);
        means.add("l1", g.scalar(terms.l1) as f64);
        means.add("sl", g.scalar(terms.structural) as f64);
        if let Some(v) = terms.l1_bp {
            means.add("l1_bp", g.scalar(v) as f64);
        }
        if let Some(v) = terms.adversarial {
            means.add("al", g.scalar(v) as f64);
        }
        let grads = g.backward(total)?;
        let nb = self.generator.bp_param_len();
        if let (Some(bp), Some(opt)) = (self.generator.bp_mut(), self.opt_bp.as_mut()) {
            let params = accumulate(&grads, &p[..nb], bp.params_mut())?;
            opt.step(params, cfg.lr_bp_joint())?;
        }
        let params = accumulate(&grads, &p[nb..], self.generator.unet_mut().params_mut())?;
        self.opt_unet.step(params, cfg.lr_base)?;
        Ok(())
    }

    /// Shuffled sample order of `epoch`; a pure function of seed and epoch.
    pub fn epoch_order(&self, epoch: usize, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Trains one epoch and scores the validation set.
    pub fn run_epoch(
        &mut self,
        cfg: &TrainConfig,
        train: &Dataset,
        val: &Dataset,
    ) -> Result<EpochRecord> {
        self.check_data(cfg, train, "training")?;
        self.check_data(cfg, val, "validation")?;
        if self.is_finished(cfg) {
            return Err(Error::Invalid(format!(
                "all {} epochs already trained",
                cfg.total_epochs()
            )));
        }
        let epoch = self.epoch;
        let phase = cfg.phase_of(epoch);
        if phase == Phase::PretrainBp && self.phase == Phase::Joint {
            return Err(Error::Invalid(
                "cannot return to pretraining after the joint phase".into(),
            ));
        }
        self.phase = phase;
        let angles = train.dense_angles();
        let batch_size = match phase {
            Phase::PretrainBp => cfg.batch_pretrain,
            Phase::Joint => cfg.batch_joint,
        };
        let order = self.epoch_order(epoch, train.len());
        let mut means = Means::default();
        let mut steps = 0;
        for chunk in order.chunks(batch_size) {
            let batch = train.batch(chunk);
            match phase {
                Phase::PretrainBp => {
                    let l = self.pretrain_step(cfg, &batch, &angles)?;
                    means.add("l1_bp", l);
                    means.add("total", l);
                }
                Phase::Joint => self.joint_step(cfg, &batch, &angles, &mut means)?,
            }
            steps += 1;
        }
        let (val_stage, scores) = self.validate(cfg, val)?;
        self.epoch += 1;
        let psnrs: Vec<Psnr> = scores.iter().map(|s| s.psnr).collect();
        let count = scores.len() as f64;
        Ok(EpochRecord {
            epoch,
            phase,
            batch_size,
            steps,
            lr_base: cfg.lr_base,
            lr_bp: match phase {
                Phase::PretrainBp => cfg.lr_pretrain,
                Phase::Joint => cfg.lr_bp_joint(),
            },
            loss_total: means.get("total").unwrap_or(0.0),
            loss_l1: means.get("l1"),
            loss_l1_bp: means.get("l1_bp"),
            loss_sl: means.get("sl"),
            loss_al: means.get("al"),
            loss_critic: means.get("critic"),
            val_stage,
            val_psnr: metrics::PsnrStat::of(&psnrs).mean,
            val_ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / count,
            val_mae: scores.iter().map(|s| s.mae).sum::<f64>() / count,
        })
    }

    /// Scores the stage being trained: the back-projection while
    /// pretraining, the refined output afterwards.
    fn validate(
        &self,
        cfg: &TrainConfig,
        val: &Dataset,
    ) -> Result<(Stage, Vec<metrics::ImageScores>)> {
        let (stage, images): (Stage, Vec<Image>) = if self.phase == Phase::PretrainBp {
            (Stage::Bp, bp_images(&self.generator, val)?)
        } else {
            let r = self.generator.reconstruct_dataset(val)?;
            (Stage::Output, r.into_iter().map(|r| r.out).collect())
        };
        let scores = images
            .iter()
            .zip(val.samples())
            .map(|(x, s)| metrics::score(x, &s.target, &cfg.ssim))
            .collect::<Result<Vec<_>>>()?;
        Ok((stage, scores))
    }

    pub fn meta(&self) -> StateMeta {
        StateMeta {
            epoch: self.epoch,
            phase: self.phase,
            seed: self.seed,
            steps_bp: self.opt_bp.as_ref().map_or(0, Adam::steps),
            steps_unet: self.opt_unet.steps(),
            steps_critic: self.opt_critic.as_ref().map_or(0, Adam::steps),
        }
    }

    /// Every parameter and optimizer moment as a named array.
    pub fn export(&self) -> Vec<NamedArray> {
        let mut out: Vec<NamedArray> = Vec::new();
        let mut push_net = |params: Vec<(String, &Tensor<f32>)>| {
            for (name, t) in params {
                out.push((name, t.shape().to_vec(), t.data().to_vec()));
            }
        };
        push_net(self.generator.params());
        if let Some(c) = &self.critic {
            push_net(c.params());
        }
        let opts = [
            ("bp", self.opt_bp.as_ref()),
            ("unet", Some(&self.opt_unet)),
            ("critic", self.opt_critic.as_ref()),
        ];
        for (group, opt) in opts {
            let Some(opt) = opt else { continue };
            for (i, name) in opt.names().iter().enumerate() {
                let len = opt.first_moments()[i].len();
                out.push((
                    format!("adam.{group}.m.{name}"),
                    vec![len],
                    opt.first_moments()[i].clone(),
                ));
                out.push((
                    format!("adam.{group}.v.{name}"),
                    vec![len],
                    opt.second_moments()[i].clone(),
                ));
            }
        }
        out
    }

    /// Rebuilds a state from exported arrays; every array the configuration
    /// needs must be present with the right shape.
    pub fn restore(cfg: &TrainConfig, meta: StateMeta, arrays: Vec<NamedArray>) -> Result<Self> {
        let mut state = TrainState::new(cfg)?;
        let mut table: HashMap<String, (Vec<usize>, Vec<f32>)> =
            arrays.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let (s, d) = table
                .remove(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks array `{name}`")))?;
            if s != shape {
                return Err(Error::shape(
                    "restore",
                    format!("`{name}` is {s:?}, expected {shape:?}"),
                ));
            }
            Ok(d)
        };
        let load_net = |params: Vec<(String, &mut Tensor<f32>)>, take: &mut Take| -> Result<()> {
            for (name, t) in params {
                let shape = t.shape().to_vec();
                let data = take(&name, &shape)?;
                *t = Tensor::param(shape, data)?;
            }
            Ok(())
        };
        load_net(state.generator.params_mut(), &mut take)?;
        if let Some(c) = state.critic.as_mut() {
            load_net(c.params_mut(), &mut take)?;
        }
        let load_opt = |group: &str, opt: &mut Adam, steps: u64, take: &mut Take| -> Result<()> {
            let names = opt.names().to_vec();
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for (i, name) in names.iter().enumerate() {
                let len = opt.first_moments()[i].len();
                m.push(take(&format!("adam.{group}.m.{name}"), &[len])?);
                v.push(take(&format!("adam.{group}.v.{name}"), &[len])?);
            }
            *opt = Adam::from_state(opt.config(), steps, names, m, v)?;
            Ok(())
        };
        if let Some(opt) = state.opt_bp.as_mut() {
            load_opt("bp", opt, meta.steps_bp, &mut take)?;
        }
        load_opt("unet", &mut state.opt_unet, meta.steps_unet, &mut take)?;
        if let Some(opt) = state.opt_critic.as_mut() {
            load_opt("critic", opt, meta.steps_critic, &mut take)?;
        }
        if let Some(extra) = table.keys().next() {
            return Err(Error::Invalid(format!(
                "checkpoint has unexpected array `{extra}`"
            )));
        }
        let expected_phase = cfg.phase_of(meta.epoch.saturating_sub(1));
        if meta.epoch > cfg.total_epochs() || meta.phase != expected_phase {
            return Err(Error::Invalid(format!(
                "checkpoint position {meta:?} does not fit the schedule"
            )));
        }
        state.epoch = meta.epoch;
        state.phase = meta.phase;
        state.seed = meta.seed;
        Ok(state)
    }
}

/// Back-projection images of a dataset with frozen weights.
fn bp_images(gen: &Generator<f32>, data: &Dataset) -> Result<Vec<Image>> {
    let Some(bp) = gen.bp() else {
        return Err(Error::Invalid(
            "variant has no back-projection layer".into(),
        ));
    };
    let n = gen.config().n;
    let angles = data.dense_angles();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in indices.chunks(16) {
        let batch = data.batch(chunk);
        let mut g = Graph::new();
        let p = bp.bind_frozen(&mut g);
        let input = GenInput {
            filtered: &batch.filtered,
            angles: &angles,
            fbp: &batch.fbp,
            batch: batch.size,
        };
        let x = gen
            .forward_bp(&mut g, &p, &input)?
            .expect("bp layer present");
        for v in g.value(x).chunks_exact(n * n) {
            out.push(Image::new(n, 1.0, v.to_vec())?);
        }
    }
    Ok(out)
}

/// Runs the remaining epochs of `state`, calling `on_epoch` after each.
pub fn train(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&TrainState, &EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    let mut log = Vec::new();
    while !state.is_finished(cfg) {
        let record = state.run_epoch(cfg, train, val)?;
        on_epoch(state, &record)?;
        log.push(record);
    }
    Ok(log)
}
