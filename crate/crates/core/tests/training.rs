use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tristage_core::codec::{CodeGrid, TokenStream};
use tristage_core::model::{Arch, Model, ModelConfig};
use tristage_core::stages::{build_train_sequence, stage_spec_with, PairTokens, StageKind};
use tristage_core::train::{stage_loss, train_stage, OptimizerState, TrainConfig, TrainEvent, Trainer};
use tristage_core::{Error, GradBuffer, Graph};

const SEM: usize = 7;
const AC: usize = 9;

fn pair(id: usize, seconds: f64) -> PairTokens {
    let mut r = ChaCha8Rng::seed_from_u64(id as u64);
    let ns = (50.0 * seconds) as usize;
    let na = (75.0 * seconds) as usize;
    let mut ids = |n: usize, v: usize| (0..n).map(|_| r.gen_range(0..v as u32)).collect::<Vec<_>>();
    PairTokens {
        id: format!("p{id}"),
        vocal_semantic: TokenStream::new(50, SEM, ids(ns, SEM)).unwrap(),
        instrumental_semantic: TokenStream::new(50, SEM, ids(ns, SEM)).unwrap(),
        coarse: CodeGrid::from_flat(75, AC, 4, ids(4 * na, AC)).unwrap(),
        fine: CodeGrid::from_flat(75, AC, 4, ids(4 * na, AC)).unwrap(),
    }
}

fn data() -> Vec<PairTokens> {
    (0..5).map(|i| pair(i, 0.4)).collect()
}

fn model(kind: StageKind) -> Model {
    let arch = Arch {
        layers: 1,
        d_model: 8,
        heads: 2,
        ff_mult: 2.0,
        num_buckets: 8,
    };
    let spec = stage_spec_with(kind, SEM, AC);
    Model::init(ModelConfig::for_stage(&spec, &arch, 16).unwrap(), 1).unwrap()
}

fn cfg(batch: usize, accum: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: batch,
        grad_accum: accum,
        clip_s: 0.2,
        total_steps: steps,
        warmup_steps: Some(1),
        peak_lr: 1e-2,
        min_lr: 1e-3,
        p_drop: 0.3,
        seed: 5,
        ..TrainConfig::default()
    }
}

fn params_of(m: &Model) -> Vec<Vec<f64>> {
    m.params().iter().map(|(_, _, t)| t.data().to_vec()).collect()
}

#[test]
fn accumulation_split_does_not_change_the_update() {
    for kind in StageKind::ALL {
        let d = data();
        let runs: Vec<Vec<Vec<f64>>> = [(4, 1), (2, 2), (1, 4)]
            .iter()
            .map(|&(b, a)| {
                let (m, _) = train_stage(kind, &d, model(kind), cfg(b, a, 3)).unwrap();
                params_of(&m)
            })
            .collect();
        assert_eq!(runs[0], runs[1], "{kind}");
        assert_eq!(runs[0], runs[2], "{kind}");
    }
}

#[test]
fn same_seed_same_model_and_history() {
    let d = data();
    let (a, ha) = train_stage(StageKind::Coarse, &d, model(StageKind::Coarse), cfg(2, 1, 4)).unwrap();
    let (b, hb) = train_stage(StageKind::Coarse, &d, model(StageKind::Coarse), cfg(2, 1, 4)).unwrap();
    assert_eq!(params_of(&a), params_of(&b));
    assert_eq!(ha, hb);
    let other = TrainConfig { seed: 6, ..cfg(2, 1, 4) };
    let (c, _) = train_stage(StageKind::Coarse, &d, model(StageKind::Coarse), other).unwrap();
    assert_ne!(params_of(&a), params_of(&c));
}

#[test]
fn resuming_continues_the_same_run() {
    let d = data();
    let kind = StageKind::Fine;
    let (full, hist) = train_stage(kind, &d, model(kind), cfg(2, 1, 6)).unwrap();

    let mut first = Trainer::new(kind, model(kind), cfg(2, 1, 6)).unwrap();
    for _ in 0..3 {
        first.train_step(&d).unwrap();
    }
    let mut second = Trainer::resume(kind, first.model.clone(), first.opt.clone(), cfg(2, 1, 6)).unwrap();
    assert_eq!(second.step(), 3);
    let rest = second.run(&d, &mut |_| Ok(())).unwrap();
    assert_eq!(rest.history.first().unwrap().step, 4);
    assert_eq!(rest.history, hist.history[3..].to_vec());
    assert_eq!(params_of(&second.model), params_of(&full));
}

#[test]
fn masked_conditioning_gets_no_gradient() {
    let d = data();
    for kind in StageKind::ALL {
        let m = model(kind);
        let spec = stage_spec_with(kind, SEM, AC);
        let (cond, target) = d[0].stage_io(kind);
        for masked in [true, false] {
            let seq = build_train_sequence(&spec, &cond, &target, masked).unwrap();
            let mut g = Graph::new();
            let logits = m.forward(&mut g, &seq.input).unwrap();
            let l = stage_loss(&mut g, logits, &seq.targets, spec.q_pred).unwrap();
            let mut buf = GradBuffer::zeros_like(m.params());
            g.backward_into(l, 1.0, &mut buf).unwrap();
            for ((_, name, _), grad) in m.params().iter().zip(buf.iter()) {
                if name.starts_with("emb.cond.") {
                    let zero = grad.iter().all(|&x| x == 0.0);
                    assert_eq!(zero, masked, "{kind} {name} masked={masked}");
                }
            }
        }
    }
}

#[test]
fn loss_goes_down_and_events_fire() {
    let d = vec![pair(0, 0.2)];
    let mut c = cfg(1, 1, 120);
    c.p_drop = 0.0;
    c.peak_lr = 3e-2;
    c.checkpoint_every = Some(50);
    let mut t = Trainer::new(StageKind::Semantic, model(StageKind::Semantic), c).unwrap();
    let mut checkpoints = Vec::new();
    let out = t
        .run(&d, &mut |e| {
            if let TrainEvent::Checkpoint { step, opt, .. } = e {
                assert_eq!(opt.step as usize, step);
                checkpoints.push(step);
            }
            Ok(())
        })
        .unwrap();
    assert_eq!(checkpoints, vec![50, 100, 120]);
    let first = out.history.first().unwrap().loss;
    let last = out.history.last().unwrap().loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
    assert!(out.history.iter().all(|s| s.grad_norm.is_finite() && s.lr > 0.0));
}

#[test]
fn early_stop_reports_the_step() {
    let d = vec![pair(0, 0.2)];
    let mut c = cfg(1, 1, 400);
    c.p_drop = 0.0;
    c.peak_lr = 3e-2;
    c.stop_below = Some(1.0);
    c.eval_every = 5;
    let (_, out) = train_stage(StageKind::Semantic, &d, model(StageKind::Semantic), c).unwrap();
    let (step, loss) = out.stopped_at.expect("target reached");
    assert!(loss < 1.0 && step % 5 == 0 && step < 400);
    assert_eq!(out.history.len(), step);
}

#[test]
fn nan_parameters_abort_with_the_step() {
    let mut m = model(StageKind::Semantic);
    let name = m.params().iter().next().unwrap().1.to_string();
    let mut t = m.param(&name).unwrap().clone();
    t.data_mut()[0] = f64::NAN;
    m.set_param(&name, t).unwrap();
    // The NaN row must be read: make every conditioning id hit row 0.
    let mut p = pair(0, 0.2);
    p.vocal_semantic.ids.iter_mut().for_each(|x| *x = 0);
    let mut tr = Trainer::new(StageKind::Semantic, m, cfg(1, 1, 5)).unwrap();
    tr.cfg.p_drop = 0.0;
    match tr.train_step(&[p]) {
        Err(Error::Diverged { step }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn mismatched_optimizer_state_is_rejected() {
    let m = model(StageKind::Semantic);
    let other = model(StageKind::Coarse);
    let opt = OptimizerState::new(other.params());
    assert!(Trainer::resume(StageKind::Semantic, m, opt, cfg(1, 1, 5)).is_err());
}
