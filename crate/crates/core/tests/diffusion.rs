mod support;

use motionrag_core::diffusion::{
    detect_contacts, fuse_conditions, fuse_conditions_masked, fusion_gradient, loss_components, make_schedule,
    q_sample, q_step, read_diffusion, refine, repr_dim, sample, sample_traced, to_repr, train_diffusion,
    training_loss, write_diffusion, ConditionSet, ContactMask, Denoiser, DiffusionConfig, LossContext, LossWeights,
    ModelDims, NoisedExample, Normalizer, RefineConfig, RefineInputs, ScheduleKind, TrainingExample,
};
use motionrag_core::diffusion::prepare_corpus;
use motionrag_core::kinematics::{forward_kinematics, PoseSequence, Skeleton};
use motionrag_core::synthesis::{generate, SynthesisConfig};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use support::oracles;

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

fn toy_dims(frames: usize) -> ModelDims {
    ModelDims {
        frames,
        repr: repr_dim(8),
        music: 3,
        latent: 4,
        hidden: 6,
        tokens: 2,
        layers: 1,
    }
}

fn conditions(rng: &mut ChaCha8Rng, dims: &ModelDims, k: usize) -> ConditionSet {
    ConditionSet {
        music: gaussian(rng, (dims.frames, dims.music)),
        beat: (0..dims.frames).map(|f| if f % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        topk_motions: (0..k).map(|_| gaussian(rng, (dims.frames, dims.repr))).collect(),
        contrastive_emb: gaussian(rng, (1, dims.latent)).row(0).to_vec(),
    }
}

/// Contacts on alternating transitions so the contact term is exercised.
fn alternating_contacts(skeleton: &Skeleton, frames: usize) -> ContactMask {
    let feet = skeleton.foot_joints().to_vec();
    ContactMask {
        values: Array2::from_shape_fn((frames - 1, feet.len()), |(f, k)| (f + k) % 2 == 0),
        foot_joints: feet,
    }
}

struct Toy {
    skeleton: Skeleton,
    normalizer: Normalizer,
    examples: Vec<TrainingExample>,
    dims: ModelDims,
}

fn toy(frames: usize, n: usize, seed: u64) -> Toy {
    let skeleton = Skeleton::biped();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clips: Vec<_> = (0..n).map(|_| oracles::unimodal_window(&mut rng, frames)).collect();
    let raw: Vec<_> = clips.iter().map(to_repr).collect();
    let normalizer = Normalizer::fit(&raw).unwrap();
    let dims = toy_dims(frames);
    let ctx = LossContext {
        skeleton: &skeleton,
        normalizer: &normalizer,
        weights: LossWeights::default(),
    };
    let contacts = alternating_contacts(&skeleton, frames);
    let examples = raw
        .iter()
        .map(|x| TrainingExample::new(normalizer.normalize(x), conditions(&mut rng, &dims, 2), &contacts, &ctx).unwrap())
        .collect();
    Toy {
        skeleton,
        normalizer,
        examples,
        dims,
    }
}

fn flat(ts: &[Array2<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.iter().copied()).collect()
}

fn unflat(like: &[Array2<f64>], v: &[f64]) -> Vec<Array2<f64>> {
    let mut at = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let out = Array2::from_shape_vec(t.dim(), v[at..at + n].to_vec()).unwrap();
            at += n;
            out
        })
        .collect()
}

/// Finite differences on a sample of entries of every parameter tensor.
fn check_gradient(model: &Denoiser, analytic: &[Array2<f64>], per_tensor: usize, loss: impl Fn(&Denoiser) -> f64) -> f64 {
    let base = flat(model.params());
    let an = flat(analytic);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut picks = Vec::new();
    let mut at = 0;
    for t in model.params() {
        for _ in 0..per_tensor.min(t.len()) {
            picks.push(at + rng.random_range(0..t.len()));
        }
        at += t.len();
    }
    let mut worst: f64 = 0.0;
    for &i in &picks {
        let x = [base[i]];
        // Losses here are O(100), so smaller steps drown in rounding.
        let fd = oracles::central_gradient(&x, 1e-4, |v| {
            let mut p = base.clone();
            p[i] = v[0];
            loss(&Denoiser::from_params(*model.dims(), unflat(model.params(), &p)).unwrap())
        })[0];
        worst = worst.max(oracles::rel_err(an[i], fd, 1e-6));
    }
    worst
}

#[test]
fn training_loss_gradient_matches_finite_differences() {
    for frames in [2, 5] {
        let t = toy(frames, 2, 3);
        let sched = make_schedule(ScheduleKind::default(), 20).unwrap();
        let ctx = LossContext {
            skeleton: &t.skeleton,
            normalizer: &t.normalizer,
            weights: LossWeights {
                lambda_pos: 0.7,
                lambda_vel: 1.3,
                lambda_contact: 2.0,
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Denoiser::new(t.dims, &mut rng).unwrap();
        let batch: Vec<NoisedExample> = t
            .examples
            .iter()
            .zip([3, 14])
            .map(|(e, step)| NoisedExample {
                example: e,
                t: step,
                eps: gaussian(&mut rng, e.x0.dim()),
            })
            .collect();
        let (losses, grads) = training_loss(&batch, &model, &sched, &ctx).unwrap();
        assert!(losses.pos > 0.0 && losses.vel > 0.0 && losses.contact > 0.0);
        let err = check_gradient(&model, &grads, 12, |m| training_loss(&batch, m, &sched, &ctx).unwrap().0.total);
        assert!(err < 1e-4, "frames {frames}: {err}");
    }
}

#[test]
fn fusion_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dims = toy_dims(7);
    let model = Denoiser::new(dims, &mut rng).unwrap();
    let c = conditions(&mut rng, &dims, 3);
    let w = gaussian(&mut rng, dims.fused_shape());
    let grads = fusion_gradient(&c, &model, &w).unwrap();
    let n_fusion = model.fusion_params().len();
    assert!(grads[n_fusion..].iter().all(|g| g.iter().all(|&v| v == 0.0)));
    let err = check_gradient(&model, &grads, 16, |m| (fuse_conditions(&c, m).unwrap() * &w).sum());
    assert!(err < 1e-4, "{err}");
}

#[test]
fn fused_shape_does_not_depend_on_k_or_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = Denoiser::new(toy_dims(10), &mut rng).unwrap();
    for k in [1, 2, 5] {
        let c = conditions(&mut rng, &toy_dims(10), k);
        assert_eq!(fuse_conditions(&c, &model).unwrap().dim(), model.dims().fused_shape());
    }
}

#[test]
fn masked_pairs_ignore_the_masked_condition() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let dims = toy_dims(6);
    let model = Denoiser::new(dims, &mut rng).unwrap();
    let c = conditions(&mut rng, &dims, 2);
    let p = dims.tokens;
    for j in 0..4 {
        // Condition j may only be attended to by itself.
        let mut allow = [[true; 4]; 4];
        for (i, row) in allow.iter_mut().enumerate() {
            if i != j {
                row[j] = false;
            }
        }
        let mut d = c.clone();
        match j {
            0 => d.music = d.music.mapv(|v| v + 0.5),
            1 => d.beat = vec![1.0; dims.frames],
            2 => d.topk_motions = d.topk_motions.iter().map(|m| m * 2.0).collect(),
            _ => d.contrastive_emb = d.contrastive_emb.iter().map(|v| -v).collect(),
        }
        let a = fuse_conditions_masked(&c, &model, &allow).unwrap();
        let b = fuse_conditions_masked(&d, &model, &allow).unwrap();
        for i in 0..4 {
            let same = a.slice(s![i * p..(i + 1) * p, ..]) == b.slice(s![i * p..(i + 1) * p, ..]);
            assert_eq!(same, i != j, "condition {j} block {i}");
        }
        // Unmasked, every block sees the change.
        let full_a = fuse_conditions(&c, &model).unwrap();
        let full_b = fuse_conditions(&d, &model).unwrap();
        for i in 0..4 {
            assert_ne!(full_a.slice(s![i * p..(i + 1) * p, ..]), full_b.slice(s![i * p..(i + 1) * p, ..]));
        }
    }
}

#[test]
fn q_sample_preserves_unit_variance() {
    let sched = make_schedule(ScheduleKind::default(), 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    for t in [0, 10, 25, 49] {
        let x0 = gaussian(&mut rng, (n, 1));
        let eps = gaussian(&mut rng, (n, 1));
        let xt = q_sample(&x0, t, &eps, &sched).unwrap();
        let var = xt.var(0.0);
        assert!((var - 1.0).abs() < 0.02, "t {t}: {var}");
    }
}

#[test]
fn single_steps_compose_to_the_closed_form() {
    let sched = make_schedule(ScheduleKind::default(), 50).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 100_000;
    for t in [0, 7, 30] {
        let x0 = Array2::from_elem((n, 1), 1.5);
        let mut x = x0.clone();
        for step in 0..=t {
            x = q_step(&x, step, &gaussian(&mut rng, (n, 1)), &sched).unwrap();
        }
        let ab = sched.alpha_bar()[t];
        let mean = x.mean().unwrap();
        assert!((mean - 1.5 * ab.sqrt()).abs() < 0.02, "t {t}: mean {mean}");
        assert!((x.var(0.0) - (1.0 - ab)).abs() < 0.02, "t {t}: var {}", x.var(0.0));
        // Without noise the deterministic parts agree exactly.
        let mut d = x0.clone();
        for step in 0..=t {
            d = q_step(&d, step, &Array2::zeros((n, 1)), &sched).unwrap();
        }
        let closed = q_sample(&x0, t, &Array2::zeros((n, 1)), &sched).unwrap();
        assert!((d[[0, 0]] - closed[[0, 0]]).abs() < 1e-12);
    }
}

#[test]
fn perfect_prediction_zeroes_every_component() {
    let t = toy(12, 3, 13);
    let ctx = LossContext {
        skeleton: &t.skeleton,
        normalizer: &t.normalizer,
        weights: LossWeights::default(),
    };
    let contacts = alternating_contacts(&t.skeleton, 12);
    for e in &t.examples {
        let l = loss_components(&e.x0, &e.x0, &contacts, &ctx).unwrap();
        for v in [l.simple, l.pos, l.vel, l.contact, l.total] {
            assert!(v.abs() < 1e-10);
        }
        let off = e.x0.mapv(|v| v + 0.3);
        let l = loss_components(&e.x0, &off, &contacts, &ctx).unwrap();
        assert!(l.vel.abs() < 1e-10 && l.pos > 0.0 && l.simple > 0.0);
    }
}

#[test]
fn contacts_match_double_threshold_oracle() {
    let skeleton = Skeleton::biped();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (frames, fps) = (50, 30.0);
    let seq = PoseSequence {
        joint_pos: Array3::from_shape_fn((frames, 8, 3), |(_, _, k)| {
            if k == 1 {
                rng.random_range(-0.02..0.12)
            } else {
                rng.random_range(-0.03..0.03)
            }
        }),
    };
    let (h, v) = (0.05, 0.6);
    let m = detect_contacts(&seq, &skeleton, fps, h, v).unwrap();
    assert_eq!(m.foot_joints, skeleton.foot_joints());
    assert_eq!(m.values.nrows(), frames - 1);
    let mut seen = [false; 2];
    for f in 0..frames - 1 {
        for (k, &j) in skeleton.foot_joints().iter().enumerate() {
            let (a, b) = (seq.position(f, j), seq.position(f + 1, j));
            let want = a[1] < h && oracles::dist(a, b) * fps < v;
            assert_eq!(m.values[[f, k]], want);
            seen[want as usize] = true;
        }
    }
    assert!(seen[0] && seen[1]);
}

fn trained_toy() -> (Toy, motionrag_core::diffusion::DiffusionModel) {
    let t = toy(16, 24, 15);
    let cfg = DiffusionConfig {
        hidden: 16,
        tokens: 2,
        layers: 1,
        epochs: 25,
        batch_size: 8,
        ..DiffusionConfig::default()
    };
    let dims = ModelDims {
        hidden: 16,
        ..t.dims
    };
    let examples: Vec<_> = t.examples.clone();
    let out = train_diffusion(&examples, dims, t.normalizer.clone(), &t.skeleton, &cfg, |_| {}).unwrap();
    assert_eq!(out.history.len(), 25);
    assert!(out.history.last().unwrap().losses.total < out.history[0].losses.total);
    (t, out.model)
}

#[test]
fn sampling_stays_within_the_schedule_envelope() {
    let (t, model) = trained_toy();
    let sched = &model.schedule;
    let dim = (t.dims.frames * t.dims.repr) as f64;
    let norm = |x: &Array2<f64>| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    for seed in 0..4 {
        let c = &t.examples[seed as usize].conditions;
        sample_traced(&model.denoiser, c, sched, seed, |step, x, x0| {
            let ab = sched.alpha_bar()[step];
            let bound = 3.0 * (ab.sqrt() * norm(x0) + (1.0 - ab).sqrt() * dim.sqrt());
            assert!(norm(x) <= bound, "step {step}: {} > {bound}", norm(x));
        })
        .unwrap();
    }
}

#[test]
fn checkpoints_reproduce_samples() {
    let (t, model) = trained_toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("diff.bin");
    write_diffusion(&path, &model).unwrap();
    let back = read_diffusion(&path).unwrap();
    assert_eq!(back, model);
    let c = &t.examples[0].conditions;
    assert_eq!(
        sample(&model.denoiser, c, &model.schedule, 3).unwrap(),
        sample(&back.denoiser, c, &back.schedule, 3).unwrap()
    );
}

#[test]
fn refine_keeps_length_and_is_deterministic() {
    let fx = support::fixture();
    let cfg = DiffusionConfig {
        epochs: 2,
        hidden: 16,
        ..DiffusionConfig::default()
    };
    let prepared = prepare_corpus(&fx.corpus, &fx.model, &cfg).unwrap();
    assert_eq!(prepared.examples.len(), 64);
    let out = train_diffusion(
        &prepared.examples,
        prepared.dims,
        prepared.normalizer.clone(),
        &fx.corpus.skeleton,
        &cfg,
        |_| {},
    )
    .unwrap();
    let mg = generate(&fx.graph, &fx.music.view(), &fx.model, 170, &SynthesisConfig::default())
        .unwrap()
        .motion;
    let beats = fx.corpus.beats["clip_000"].clone();
    let inputs = RefineInputs {
        motion: &mg,
        music: &fx.music,
        beats: &beats,
        graph: &fx.graph,
        contrastive: &fx.model,
    };
    let a = refine(&out.model, &inputs, &RefineConfig::default()).unwrap();
    let b = refine(&out.model, &inputs, &RefineConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.frames(), mg.frames());
    assert_eq!(a.id(), "motion_mg_refined");
    forward_kinematics(&fx.corpus.skeleton, &a).unwrap();
    let short = mg.slice(0, 30, "short").unwrap();
    let bad = RefineInputs {
        motion: &short,
        ..inputs
    };
    assert!(refine(&out.model, &bad, &RefineConfig::default()).is_err());
}
