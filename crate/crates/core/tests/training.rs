//! Training schedule, determinism and resumption on a tiny configuration.

use deer_core::data::{Dataset, Geometry, Split};
use deer_core::model::{ModelConfig, Network, Variant};
use deer_core::tensor::Graph;
use deer_core::train::{loss, train, Phase, TrainConfig, TrainState};

fn tiny(variant: Variant) -> (TrainConfig, Dataset, Dataset) {
    let geom = Geometry::new(32, 6);
    let mut model = ModelConfig::new(32, geom.nv_dense, variant);
    model.unet_filters = 4;
    let mut cfg = TrainConfig::new(model);
    cfg.epochs_pretrain = 2;
    cfg.epochs_joint = 2;
    cfg.seed = 11;
    let train_set = Dataset::simulate(geom, Split::Train, 0, 7).unwrap();
    let val = Dataset::simulate(geom, Split::Val, 0, 2).unwrap();
    (cfg, train_set, val)
}

#[test]
fn schedule_is_visible_in_the_log() {
    let (cfg, train_set, val) = tiny(Variant::DeerNowgan);
    let mut state = TrainState::new(&cfg).unwrap();
    let log = train(&cfg, &train_set, &val, &mut state, |_, _| Ok(())).unwrap();
    assert_eq!(log.len(), 4);
    let pre: Vec<_> = log
        .iter()
        .filter(|r| r.phase == Phase::PretrainBp)
        .collect();
    assert_eq!(pre.len(), cfg.epochs_pretrain);
    for r in &pre {
        assert_eq!((r.batch_size, r.steps), (5, 2));
        assert_eq!(r.lr_bp, cfg.lr_pretrain);
        assert!(r.loss_l1.is_none() && r.loss_l1_bp.is_some());
    }
    for r in log.iter().filter(|r| r.phase == Phase::Joint) {
        assert_eq!((r.batch_size, r.steps), (3, 3));
        assert_eq!(r.lr_bp, r.lr_base / 10.0);
        assert!(r.loss_al.is_none() && r.loss_critic.is_none());
        assert!(r.loss_total >= 0.0);
    }
    assert_eq!(log[2].epoch, 2);
    assert_eq!(state.phase, Phase::Joint);
    assert!(state.run_epoch(&cfg, &train_set, &val).is_err());
}

#[test]
fn fbp_variant_skips_pretraining() {
    let (cfg, train_set, val) = tiny(Variant::DeerFbp);
    assert_eq!(cfg.total_epochs(), 2);
    let mut state = TrainState::new(&cfg).unwrap();
    let r = state.run_epoch(&cfg, &train_set, &val).unwrap();
    assert_eq!(r.phase, Phase::Joint);
    assert!(r.loss_l1_bp.is_none());
    assert!(r.loss_al.is_some() && r.loss_critic.is_some());
}

#[test]
fn pretrain_step_decreases_bp_loss() {
    let (mut cfg, train_set, _) = tiny(Variant::Deer);
    cfg.lr_pretrain = 1e-5;
    let mut state = TrainState::new(&cfg).unwrap();
    let batch = train_set.batch(&[0]);
    let angles = train_set.dense_angles();
    let before = state.pretrain_step(&cfg, &batch, &angles).unwrap();
    let after = state.pretrain_step(&cfg, &batch, &angles).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn adversarial_run_keeps_critic_clipped() {
    let (mut cfg, train_set, val) = tiny(Variant::Deer);
    cfg.epochs_pretrain = 0;
    cfg.epochs_joint = 1;
    let mut state = TrainState::new(&cfg).unwrap();
    let r = state.run_epoch(&cfg, &train_set, &val).unwrap();
    assert!(r.loss_critic.unwrap().is_finite());
    let c = cfg.loss.clip_c as f32;
    let critic = state.critic.as_ref().unwrap();
    for (_, t) in critic.params() {
        assert!(t.data().iter().all(|v| v.abs() <= c));
    }
}

#[test]
fn identical_seeds_give_identical_runs_and_resume_continues_exactly() {
    let (mut cfg, train_set, val) = tiny(Variant::Deer);
    cfg.epochs_pretrain = 1;
    cfg.epochs_joint = 2;
    let mut a = TrainState::new(&cfg).unwrap();
    let mut snapshot = None;
    let log_a = train(&cfg, &train_set, &val, &mut a, |s, r| {
        if r.epoch == 1 {
            snapshot = Some((s.meta(), s.export()));
        }
        Ok(())
    })
    .unwrap();
    let mut b = TrainState::new(&cfg).unwrap();
    let log_b = train(&cfg, &train_set, &val, &mut b, |_, _| Ok(())).unwrap();
    assert_eq!(log_a, log_b);

    let (meta, arrays) = snapshot.unwrap();
    let mut resumed = TrainState::restore(&cfg, meta, arrays).unwrap();
    assert_eq!(resumed.epoch, 2);
    let rest = train(&cfg, &train_set, &val, &mut resumed, |_, _| Ok(())).unwrap();
    assert_eq!(rest, log_a[2..]);
}

#[test]
fn restore_rejects_missing_arrays() {
    let (cfg, _, _) = tiny(Variant::DeerLite);
    let state = TrainState::new(&cfg).unwrap();
    let mut arrays = state.export();
    arrays.retain(|(name, _, _)| name != "unet.l3.w");
    assert!(TrainState::restore(&cfg, state.meta(), arrays).is_err());
}

#[test]
fn empty_training_set_is_rejected() {
    let (cfg, _, val) = tiny(Variant::DeerNowgan);
    let empty = Dataset::simulate(*val.geometry(), Split::Train, 0, 0).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    assert!(state.run_epoch(&cfg, &empty, &val).is_err());
}

#[test]
fn bp_loss_gradient_reaches_only_the_bp_layer() {
    let (cfg, train_set, _) = tiny(Variant::Deer);
    let state = TrainState::new(&cfg).unwrap();
    let gen = &state.generator;
    let batch = train_set.batch(&[0, 1]);
    let angles = train_set.dense_angles();
    let mut g = Graph::new();
    let p = gen.bind(&mut g);
    let input = deer_core::model::GenInput {
        filtered: &batch.filtered,
        angles: &angles,
        fbp: &batch.fbp,
        batch: 2,
    };
    let out = gen.forward(&mut g, &p, &input).unwrap();
    let y = g.constant([2, 1, 32, 32], batch.target.clone()).unwrap();
    let l = loss::mae(&mut g, out.bp.unwrap(), y).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(p[0]).unwrap().iter().any(|&v| v != 0.0));
    for &v in &p[1..] {
        assert!(grads.get(v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)));
    }
}
