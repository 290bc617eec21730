use rand::Rng;
use tda_core::data::{generate_dataset, Dataset, DatasetSpec, LatentTrack, LenDistribution};
use tda_core::model::{
    diffusion_loss, loss_gradient, loss_gradient_by_name, sample, seeded_uniform, train, Draw,
    LayerGroup, ModelConfig, ModelParams, TrainConfig, Transformer,
};
use tda_core::rng::stream;
use tda_core::tensor::Matrix;
use tda_core::TdaError;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 2,
        max_frames: 6,
        cond_dim: 3,
        model_width: 8,
        num_blocks: 2,
        num_heads: 2,
        ff_hidden: 8,
        cond_tokens: 2,
        seed: 3,
    }
}

fn tiny_dataset(cfg: &ModelConfig, n: usize) -> Dataset<f64> {
    generate_dataset(&DatasetSpec {
        n,
        num_clusters: n.min(2),
        max_frames: cfg.max_frames,
        latent_dim: cfg.latent_dim,
        cond_dim: cfg.cond_dim,
        len_distribution: LenDistribution::Uniform {
            min: 2,
            max: cfg.max_frames,
        },
        seed: 11,
        ..DatasetSpec::default()
    })
    .unwrap()
}

/// Random parameters on a larger scale than `init` so every path carries
/// signal.
fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = ModelParams::init(cfg).unwrap();
    let mut rng = stream(seed, &[1]);
    p.for_each_mut(|_, v| *v += rng.random_range(-0.3..0.3));
    p
}

#[test]
fn tiny_model_is_within_the_parameter_budget() {
    let p = ModelParams::<f64>::init(&tiny_config()).unwrap();
    assert!(p.num_params() <= 5000, "{}", p.num_params());
}

#[test]
fn gradients_match_central_differences_for_every_group() {
    let cfg = tiny_config();
    let ds = tiny_dataset(&cfg, 2);
    let params = random_params(&cfg, 5);
    let draws: Vec<Draw<f64>> = seeded_uniform(9, &[0], 3, cfg.max_frames, cfg.latent_dim);
    let h = 1e-5;
    for (track, mask) in [(&ds.tracks[0], false), (&ds.tracks[1], true)] {
        for group in LayerGroup::ALL_GROUPS {
            let grad = loss_gradient(&cfg, &params, track, &draws, mask, group).unwrap();
            // Map group coordinates to flat parameter indices.
            let mut flat_index = Vec::new();
            let mut offset = 0;
            let sections = group.sections(&cfg);
            for i in 0..params.num_sections() {
                let len = params.section(i).len();
                if sections.contains(&i) {
                    flat_index.extend(offset..offset + len);
                }
                offset += len;
            }
            assert_eq!(flat_index.len(), grad.len());
            let mut rng = stream(17, &[group as u64]);
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let j = rng.random_range(0..grad.len());
                let k = flat_index[j];
                let mut plus = params.clone();
                plus.set_flat(k, params.get_flat(k) + h);
                let mut minus = params.clone();
                minus.set_flat(k, params.get_flat(k) - h);
                let lp = diffusion_loss(&cfg, &plus, track, &draws, mask).unwrap();
                let lm = diffusion_loss(&cfg, &minus, track, &draws, mask).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
            assert!(
                worst <= 1e-5,
                "group {group} mask {mask}: relative error {worst:e}"
            );
        }
    }
}

#[test]
fn group_gradients_partition_the_block_gradient() {
    let cfg = tiny_config();
    let ds = tiny_dataset(&cfg, 1);
    let params = random_params(&cfg, 6);
    let draws = seeded_uniform(1, &[2], 2, cfg.max_frames, cfg.latent_dim);
    let all = loss_gradient(&cfg, &params, &ds.tracks[0], &draws, false, LayerGroup::All).unwrap();
    let all_sections = LayerGroup::All.sections(&cfg);
    let self_s = LayerGroup::SelfAttn.sections(&cfg);
    let cross_s = LayerGroup::Cross.sections(&cfg);
    let kv_s = LayerGroup::ToKv.sections(&cfg);
    assert!(kv_s.iter().all(|s| cross_s.contains(s)));
    assert!(self_s.iter().all(|s| !cross_s.contains(s)));
    for group in [LayerGroup::SelfAttn, LayerGroup::Cross, LayerGroup::ToKv] {
        let g = loss_gradient(&cfg, &params, &ds.tracks[0], &draws, false, group).unwrap();
        // Gather the matching slices of the "all" vector.
        let mut aligned = Vec::new();
        let mut offset = 0;
        for &s in &all_sections {
            let len = params.section(s).len();
            if group.sections(&cfg).contains(&s) {
                aligned.extend_from_slice(&all[offset..offset + len]);
            }
            offset += len;
        }
        assert_eq!(g, aligned, "group {group}");
    }
    let rest: usize = all_sections
        .iter()
        .filter(|s| !self_s.contains(s) && !cross_s.contains(s))
        .map(|&s| params.section(s).len())
        .sum();
    let self_len = params.group_len(&cfg, LayerGroup::SelfAttn);
    let cross_len = params.group_len(&cfg, LayerGroup::Cross);
    assert_eq!(self_len + cross_len + rest, all.len());
    let kv = loss_gradient_by_name(&cfg, &params, &ds.tracks[0], &draws, false, "to_kv").unwrap();
    assert_eq!(kv.len(), params.group_len(&cfg, LayerGroup::ToKv));
    assert!(matches!(
        loss_gradient_by_name(&cfg, &params, &ds.tracks[0], &draws, false, "mlp"),
        Err(TdaError::Argument(_))
    ));
}

fn two_frame_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 1,
        max_frames: 2,
        cond_dim: 1,
        model_width: 4,
        num_blocks: 1,
        num_heads: 1,
        ff_hidden: 4,
        cond_tokens: 1,
        seed: 0,
    }
}

fn two_frame_track(z: [f64; 2], actual_len: usize) -> LatentTrack<f64> {
    LatentTrack {
        id: 0,
        frames: Matrix::from_vec(2, 1, z.to_vec()).unwrap(),
        actual_len,
        cond: vec![0.3],
        cluster: None,
        duplicate_of: None,
    }
}

#[test]
fn hand_computed_two_frame_loss() {
    // Zero parameters give v̂ ≡ 0, so the loss is the mean squared v-target.
    let cfg = two_frame_config();
    let params = ModelParams::<f64>::zeros(&cfg);
    let track = two_frame_track([1.0, -2.0], 2);
    let draw = Draw {
        t: 0.5,
        eps: Matrix::from_vec(2, 1, vec![0.5, 0.25]).unwrap(),
    };
    // v = (√2/2)(eps − z0) = (√2/2)(−0.5, 2.25); mean of squares = 0.5 · 5.3125 / 2.
    let loss = diffusion_loss(&cfg, &params, &track, &[draw.clone()], false).unwrap();
    assert!((loss - 1.328125).abs() < 1e-12, "{loss}");
    // Masked to the first frame: 0.5 · 0.25 / 1.
    let short = two_frame_track([1.0, 0.0], 1);
    let masked = diffusion_loss(&cfg, &params, &short, &[draw], true).unwrap();
    assert!((masked - 0.125).abs() < 1e-12, "{masked}");
}

#[test]
fn perfect_predictor_has_zero_loss() {
    // With a zero output weight the prediction is the output bias, which is
    // set to the constant v-target.
    let cfg = two_frame_config();
    let mut params = ModelParams::<f64>::zeros(&cfg);
    let t = 0.3f64;
    let (a, s) = (
        (std::f64::consts::FRAC_PI_2 * t).cos(),
        (std::f64::consts::FRAC_PI_2 * t).sin(),
    );
    let (z, e) = (0.7, -1.1);
    let bias = params
        .names()
        .iter()
        .position(|n| n == "output.bias")
        .unwrap();
    params.section_mut(bias).set(0, 0, a * e - s * z);
    let track = two_frame_track([z, z], 2);
    let draw = Draw {
        t,
        eps: Matrix::filled(2, 1, e),
    };
    let loss = diffusion_loss(&cfg, &params, &track, &[draw], false).unwrap();
    assert!(loss.abs() < 1e-30, "{loss}");
}

#[test]
fn dead_parameters_have_zero_gradient() {
    let cfg = tiny_config();
    let ds = tiny_dataset(&cfg, 1);
    let params = ModelParams::<f64>::zeros(&cfg);
    let draws = seeded_uniform(0, &[0], 2, cfg.max_frames, cfg.latent_dim);
    let g = loss_gradient(&cfg, &params, &ds.tracks[0], &draws, false, LayerGroup::All).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn loss_is_nonnegative_and_mask_is_a_no_op_at_full_length() {
    let cfg = tiny_config();
    let spec = DatasetSpec {
        n: 4,
        num_clusters: 2,
        max_frames: cfg.max_frames,
        latent_dim: cfg.latent_dim,
        cond_dim: cfg.cond_dim,
        len_distribution: LenDistribution::Fixed {
            len: cfg.max_frames,
        },
        ..DatasetSpec::default()
    };
    let ds: Dataset<f64> = generate_dataset(&spec).unwrap();
    for seed in 0..4u64 {
        let params = random_params(&cfg, seed);
        let draws = seeded_uniform(seed, &[7], 3, cfg.max_frames, cfg.latent_dim);
        for track in &ds.tracks {
            let a = diffusion_loss(&cfg, &params, track, &draws, false).unwrap();
            let b = diffusion_loss(&cfg, &params, track, &draws, true).unwrap();
            assert!(a >= 0.0);
            assert_eq!(a, b);
        }
    }
}

#[test]
fn empty_draws_and_bad_shapes_are_rejected() {
    let cfg = tiny_config();
    let ds = tiny_dataset(&cfg, 1);
    let params = ModelParams::<f64>::init(&cfg).unwrap();
    assert!(matches!(
        diffusion_loss(&cfg, &params, &ds.tracks[0], &[], false),
        Err(TdaError::Argument(_))
    ));
    let net = Transformer::new(&cfg, &params);
    let z = Matrix::zeros(cfg.max_frames + 1, cfg.latent_dim);
    assert!(matches!(
        net.forward(&z, 0.5, &[0.0; 3]),
        Err(TdaError::Shape(_))
    ));
    let z = Matrix::zeros(cfg.max_frames, cfg.latent_dim);
    assert!(matches!(
        net.forward(&z, 0.5, &[0.0; 2]),
        Err(TdaError::Shape(_))
    ));
}

#[test]
fn forward_is_deterministic_and_handles_a_single_frame() {
    let cfg = tiny_config();
    let params = random_params(&cfg, 2);
    let net = Transformer::new(&cfg, &params);
    let z = Matrix::filled(cfg.max_frames, cfg.latent_dim, 0.4);
    let a = net.forward(&z, 0.3, &[0.1, 0.2, 0.3]).unwrap();
    let b = net.forward(&z, 0.3, &[0.1, 0.2, 0.3]).unwrap();
    assert_eq!(a, b);

    let one = ModelConfig {
        max_frames: 1,
        ..tiny_config()
    };
    let p1 = ModelParams::<f64>::init(&one).unwrap();
    let out = Transformer::new(&one, &p1)
        .forward(&Matrix::filled(1, one.latent_dim, 1.0), 0.9, &[0.0; 3])
        .unwrap();
    assert_eq!(out.shape(), (1, one.latent_dim));
}

#[test]
fn sampler_contracts() {
    let cfg = tiny_config();
    let params = random_params(&cfg, 4);
    let cond = [0.5, -0.2, 0.1];
    let a = sample(&cfg, &params, &cond, 8, 4, 21).unwrap();
    let b = sample(&cfg, &params, &cond, 8, 4, 21).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.actual_len, 4);
    for r in 4..cfg.max_frames {
        assert!(a.frames.row(r).iter().all(|&v| v == 0.0));
    }
    assert!(a.frames.row(0).iter().any(|&v| v != 0.0));
    assert!(sample(&cfg, &params, &cond, 8, 0, 1).is_err());
    assert!(sample(&cfg, &params, &cond, 8, cfg.max_frames + 1, 1).is_err());
    assert!(sample(&cfg, &params, &cond, 0, 2, 1).is_err());

    // v̂ ≡ 0 with one step: ẑ0 = α(1)·z1 = 0 and the final re-noising at t = 0 keeps it 0.
    let zero = ModelParams::<f64>::zeros(&cfg);
    let s = sample(&cfg, &zero, &cond, 1, cfg.max_frames, 5).unwrap();
    assert!(s.frames.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let cfg = tiny_config();
    let ds = tiny_dataset(&cfg, 1);
    let tcfg = TrainConfig {
        steps: 150,
        warmup_steps: 10,
        draws_per_track: 4,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let held_out = seeded_uniform(99, &[0], 64, cfg.max_frames, cfg.latent_dim);
    let init = ModelParams::<f64>::init(&cfg).unwrap();
    let before = diffusion_loss(&cfg, &init, &ds.tracks[0], &held_out, false).unwrap();
    let a = train(&ds, &cfg, &tcfg).unwrap();
    let after = diffusion_loss(&cfg, &a.params, &ds.tracks[0], &held_out, false).unwrap();
    assert!(after < before, "{after} vs {before}");
    let b = train(&ds, &cfg, &tcfg).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a.meta.steps, 150);
}

#[test]
fn f32_and_f64_agree_on_the_forward_pass() {
    let cfg = tiny_config();
    let p64 = random_params(&cfg, 8);
    let p32: ModelParams<f32> = p64.cast();
    let z64 = Matrix::filled(cfg.max_frames, cfg.latent_dim, 0.25f64);
    let z32 = Matrix::filled(cfg.max_frames, cfg.latent_dim, 0.25f32);
    let a = Transformer::new(&cfg, &p64)
        .forward(&z64, 0.4, &[0.1, 0.0, -0.3])
        .unwrap();
    let b = Transformer::new(&cfg, &p32)
        .forward(&z32, 0.4, &[0.1, 0.0, -0.3])
        .unwrap();
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}
