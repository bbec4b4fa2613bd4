use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slotbench_core::optim::AdamConfig;
use slotbench_core::policy::{
    bc_train, build_observation, demo_set, observation_channels, rollout_batch, success_rate, DemoSet, Perception,
    PerceptionVariant, PolicyConfig, PolicyKind, Quantizer,
};
use slotbench_core::scene::episode::{eval_episode_seed, generate_episodes, run_episode};
use slotbench_core::scene::{ground_truth_masks, render, sample_scene, scripted_expert, Pose, SceneState, SimConfig};
use slotbench_core::slot::{ConvSpec, SlotConfig, SlotModel};
use slotbench_core::{Graph, ParamStore};

fn tiny(kind: PolicyKind) -> PolicyConfig {
    PolicyConfig {
        kind,
        input_size: 8,
        trunk: vec![ConvSpec { channels: 8, kernel: 3, stride: 1 }],
        hidden: vec![64, 64],
        batch_size: 1,
        frame_stride: 1,
        ..Default::default()
    }
}

#[test]
fn observation_variants_have_the_promised_contents() {
    let sim = SimConfig::default();
    let s = sample_scene(3, 8, &sim).unwrap();
    let img = render(&s, 8, 8, &sim);
    let none = Perception::default();
    let rgb = build_observation(&img, None, PerceptionVariant::Rgb, &none).unwrap();
    assert_eq!((rgb.channels, &rgb.data), (3, &img.data));

    let gt = ground_truth_masks(&s, 8, 8, &sim);
    let seg = build_observation(&img, Some(&gt), PerceptionVariant::RgbPlusGtSegmentation, &none).unwrap();
    assert_eq!(seg.channels, 3 + 8 + 3);
    assert_eq!(seg.data[..192], img.data[..]);
    assert_eq!(seg.data[192..], gt.stacked()[..]);

    let mut store = ParamStore::<f32>::new();
    let m = SlotModel::new(SlotConfig::micro(8, 8, 1), &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let p = Perception { slot: Some((&m, &store)), autoencoder: None };
    let c_feat = m.config.feature_channels();
    let both = build_observation(&img, None, PerceptionVariant::RgbPlusSlot, &p).unwrap();
    assert_eq!((both.channels, both.height, both.width), (3 + c_feat, 8, 8));
    assert_eq!(observation_channels(PerceptionVariant::RgbPlusSlot, 8, &p).unwrap(), 3 + c_feat);
    let only = build_observation(&img, None, PerceptionVariant::SlotMasks, &p).unwrap();
    assert_eq!(only.data[..], both.data[192..]);
    assert!(build_observation(&img, None, PerceptionVariant::SlotMasks, &none).is_err());
}

/// Demonstration set holding one state and one expert action.
fn single_transition(action: [f32; 2], variant: PerceptionVariant) -> (DemoSet, SceneState, usize) {
    let sim = SimConfig::default();
    let (s, target) = (sample_scene(21, 4, &sim).unwrap(), 2);
    let img = render(&s, 8, 8, &sim);
    let obs = build_observation(&img, None, variant, &Perception::default()).unwrap();
    let q = Quantizer::fit(std::slice::from_ref(&obs)).unwrap();
    let set = DemoSet {
        variant,
        channels: obs.channels,
        size: 8,
        n_blocks: 4,
        frames: q.encode(&obs),
        quantizer: q,
        targets: vec![target],
        actions: vec![action],
        perception_checksums: vec![],
    };
    (set, s, target)
}

#[test]
fn explicit_policy_overfits_one_transition() {
    let a = [0.6f32, -0.3];
    let (set, s, target) = single_transition(a, PerceptionVariant::Rgb);
    let cfg = PolicyConfig { steps: 1500, adam: AdamConfig { lr: 1e-3, warmup_steps: 0, ..Default::default() }, ..tiny(PolicyKind::Explicit) };
    let (policy, rep) = bc_train(&set, &cfg).unwrap();
    assert!(rep.losses.iter().all(|&l| l >= 0.0));
    let sim = SimConfig::default();
    let got = policy.act(&[&s], &[target], &Perception::default(), 8, &sim, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()[0];
    let err = ((got[0] / sim.max_step) as f32 - a[0]).abs().max(((got[1] / sim.max_step) as f32 - a[1]).abs());
    assert!(err < 1e-4, "{err}");
}

#[test]
fn implicit_policy_energy_is_minimal_at_the_expert_action() {
    // On the 0.05-spaced grid so the oracle can hit it exactly.
    let a = [0.45f32, -0.2];
    let (set, _, target) = single_transition(a, PerceptionVariant::Rgb);
    let cfg = PolicyConfig {
        steps: 1500,
        counter_samples: 256,
        adam: AdamConfig { lr: 1e-3, warmup_steps: 0, ..Default::default() },
        ..tiny(PolicyKind::Implicit)
    };
    let (policy, _) = bc_train(&set, &cfg).unwrap();
    let grid: Vec<f32> = (0..41).flat_map(|i| (0..41).flat_map(move |j| [-1.0 + 0.05 * i as f32, -1.0 + 0.05 * j as f32])).collect();
    let mut g = Graph::new(&policy.params);
    let p = 8 * 8;
    let mut x: Vec<f32> = set.frames.iter().map(|&b| b as f32 * (2.0 / 255.0) - 1.0).collect();
    for k in 0..4 {
        x.extend(std::iter::repeat_n(if k == target { 1.0 } else { 0.0 }, p));
    }
    let xv = g.input(&[1, set.channels + 4, 8, 8], x);
    let f = policy.net.features(&mut g, xv, &[target]);
    let e = policy.net.energy_of(&mut g, f, &grid, 41 * 41);
    let best = (0..41 * 41).min_by(|&i, &j| g.value(e)[i].total_cmp(&g.value(e)[j])).unwrap();
    let found = [grid[2 * best], grid[2 * best + 1]];
    assert!((found[0] - a[0]).abs() < 1e-6 && (found[1] - a[1]).abs() < 1e-6, "{found:?}");
}

#[test]
fn implicit_training_needs_counter_samples() {
    let (set, _, _) = single_transition([0.0, 0.0], PerceptionVariant::Rgb);
    let cfg = PolicyConfig { counter_samples: 0, steps: 1, ..tiny(PolicyKind::Implicit) };
    assert!(bc_train(&set, &cfg).is_err());
}

#[test]
fn loss_falls_on_one_episode() {
    let sim = SimConfig::default();
    let demos = generate_episodes(0, 1, 4, 200, &sim).unwrap();
    let cfg = PolicyConfig { steps: 300, batch_size: 8, ..tiny(PolicyKind::Explicit) };
    let set = demo_set(&demos, PerceptionVariant::Rgb, &Perception::default(), 8, &cfg, &sim).unwrap();
    let (_, rep) = bc_train(&set, &cfg).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(rep.losses.iter().all(|&l| l >= 0.0));
    assert!(mean(&rep.losses[250..]) < mean(&rep.losses[..50]));
}

#[test]
fn success_threshold_is_inclusive_at_five_hundredths() {
    let sim = SimConfig::default();
    let scene = |d: f64| SceneState {
        blocks: slotbench_core::scene::roster(1, sim.block_radius).unwrap(),
        block_poses: vec![Pose { x: 0.5 + d, y: 0.5, theta: 0.0 }],
        effector: [0.1, 0.1],
        pole: [0.5, 0.5],
    };
    let idle = |_: &SceneState, _: usize| [0.0, 0.0];
    assert!(run_episode(0, scene(0.049), 0, 200, &sim, idle).success);
    let t = run_episode(0, scene(0.051), 0, 200, &sim, idle);
    assert!(!t.success && t.len() == 201);
}

#[test]
fn expert_rollouts_are_reproducible_and_competent() {
    let sim = SimConfig::default();
    let seeds: Vec<u64> = (0..40).map(|i| eval_episode_seed(1, i)).collect();
    let run = || {
        rollout_batch(&seeds, 8, 200, &sim, |states, targets| {
            Ok(states.iter().zip(targets).map(|(s, &t)| scripted_expert(s, t, &sim)).collect())
        })
        .unwrap()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(success_rate(&a) >= 0.9, "{}", success_rate(&a));
}
