use latentwarp::diffusion::{AttentionMode, AttentionToyParams};
use latentwarp::flow::{backward_warp_with, FlowField};
use latentwarp::grid::FrameImage;
use latentwarp::pipeline::{run_video, DenoiserSpec, MaskMode, PipelineConfig, SequenceBundle};
use latentwarp::synth::{generate, periodic_shift_variant, Motion, Pattern, SceneSpec};

fn scene(motion: Motion, frames: usize) -> SceneSpec {
    SceneSpec {
        width: 64,
        height: 64,
        frames,
        seed: 2,
        pattern: Pattern::Noise { bands: 3 },
        motion,
        periodic: false,
    }
}

fn moving_scenes() -> Vec<SceneSpec> {
    vec![
        scene(Motion::Translate { dx: 2.0, dy: 1.0 }, 9),
        scene(
            Motion::Rotate {
                theta: 0.03,
                center: None,
            },
            9,
        ),
        scene(
            Motion::Occluder {
                x: 8.0,
                y: 16.0,
                width: 20.0,
                height: 24.0,
                vx: 3.0,
                vy: 0.0,
            },
            9,
        ),
    ]
}

fn cfg(interval: usize) -> PipelineConfig {
    PipelineConfig {
        keyframe_interval: interval,
        seed: 5,
        ..PipelineConfig::default()
    }
}

fn run(bundle: &SequenceBundle, cfg: &PipelineConfig) -> latentwarp::pipeline::RunOutput {
    let d = cfg.denoiser.build(3).unwrap();
    run_video(bundle, cfg, d.as_ref()).unwrap()
}

fn static_bundle(n: usize) -> SequenceBundle {
    generate(&scene(Motion::Static, n)).unwrap().quantized()
}

#[test]
fn aligned_steps_equal_t_minus_t0() {
    let b = generate(&moving_scenes()[0]).unwrap();
    for (t0, steps) in [(4, 20), (0, 6), (6, 6), (3, 10)] {
        let c = PipelineConfig { t0, steps, ..cfg(2) };
        let out = run(&b, &c);
        assert_eq!(out.translations[0].aligned_steps, 0);
        for t in &out.translations[1..] {
            assert_eq!(t.aligned_steps, steps - t0);
        }
    }
}

#[test]
fn static_scene_is_idempotent_for_both_denoisers() {
    let b = static_bundle(6);
    for denoiser in [
        DenoiserSpec::default(),
        DenoiserSpec::Attention(AttentionToyParams::default()),
    ] {
        let c = PipelineConfig { denoiser, ..cfg(1) };
        let out = run(&b, &c);
        assert_eq!(out.translations.len(), 6);
        let first = &out.translations[0];
        for t in &out.translations[1..] {
            assert_eq!(t.latent(), first.latent());
            assert_eq!(t.frame, first.frame);
            assert_eq!(t.geometry.as_ref().unwrap().latent_mask.count_ones(), 64);
        }
        assert_eq!(out.metrics.mean, Some(0.0));
        assert_eq!(out.metrics.token_consistency, Some(0.0));
    }
}

#[test]
fn zero_mask_equals_unaligned_translation() {
    let b = generate(&moving_scenes()[2]).unwrap();
    for denoiser in [
        DenoiserSpec::default(),
        DenoiserSpec::Attention(AttentionToyParams::default()),
    ] {
        let base = PipelineConfig { denoiser, ..cfg(2) };
        let forced = run(
            &b,
            &PipelineConfig {
                mask_mode: MaskMode::ForceZero,
                ..base.clone()
            },
        );
        let free = run(
            &b,
            &PipelineConfig {
                t0: base.steps,
                ..base.clone()
            },
        );
        assert_eq!(forced.latents(), free.latents());
    }
}

#[test]
fn zero_mask_with_self_attention_equals_independent_frames() {
    let b = generate(&moving_scenes()[1]).unwrap();
    let c = PipelineConfig {
        denoiser: DenoiserSpec::Attention(AttentionToyParams::default()),
        attention: AttentionMode::SelfOnly,
        mask_mode: MaskMode::ForceZero,
        ..cfg(4)
    };
    let out = run(&b, &c);
    for t in &out.translations {
        let single = SequenceBundle::new(vec![b.frames[t.frame_index].clone()], vec![], vec![]).unwrap();
        let alone = run(&single, &c);
        assert_eq!(alone.translations[0].latent(), t.latent());
    }
}

#[test]
fn cached_latents_are_what_alignment_consumed() {
    let b = generate(&moving_scenes()[2]).unwrap();
    let c = cfg(3);
    let out = run(&b, &c);
    for pair in out.translations.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let geo = cur.geometry.as_ref().unwrap();
        assert_eq!(geo.prev, prev.frame_index);
        for t in c.t0 + 1..=c.steps {
            let warped = backward_warp_with(prev.trajectory.at(t), &geo.latent_flow, b.boundary).unwrap();
            let fed = cur.trajectory.at(t);
            let (ch, h, w) = fed.dims();
            for k in 0..ch {
                for y in 0..h {
                    for x in 0..w {
                        if geo.latent_mask.at(y, x) {
                            assert_eq!(fed.get(k, y, x).to_bits(), warped.get(k, y, x).to_bits());
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn alignment_lowers_warp_error_on_moving_scenes() {
    for spec in moving_scenes() {
        let b = generate(&spec).unwrap().quantized();
        let aligned = run(&b, &cfg(2));
        let unaligned = run(&b, &PipelineConfig { t0: 20, ..cfg(2) });
        let (a, u) = (aligned.metrics.mean.unwrap(), unaligned.metrics.mean.unwrap());
        assert!(a <= u, "{:?}: aligned {a} vs unaligned {u}", spec.motion);
    }
}

#[test]
fn shift_sequence_alignment_is_strictly_better() {
    let spec = SceneSpec {
        frames: 5,
        ..scene(Motion::Translate { dx: 8.0, dy: 0.0 }, 5)
    };
    let b = periodic_shift_variant(&spec).unwrap();
    let aligned = run(&b, &cfg(1));
    let unaligned = run(&b, &PipelineConfig { t0: 20, ..cfg(1) });
    assert!(aligned.metrics.mean.unwrap() < unaligned.metrics.mean.unwrap());
}

#[test]
fn disoccluded_strip_is_masked_out() {
    let spec = moving_scenes()[2].clone();
    let b = generate(&spec).unwrap();
    let out = run(&b, &cfg(1));
    let geo = out.translations[1].geometry.as_ref().unwrap();
    let truth = &b.disocclusion.as_ref().unwrap()[0];
    assert!(truth.count_ones() > 0);
    for (m, d) in geo.mask.bits().iter().zip(truth.bits()) {
        if *d {
            assert!(!m);
        }
    }
}

#[test]
fn masked_warp_error_is_at_most_unmasked_on_occluder_scenes() {
    for vx in [2.0, 3.0, -4.0] {
        let spec = scene(
            Motion::Occluder {
                x: 24.0,
                y: 12.0,
                width: 16.0,
                height: 30.0,
                vx,
                vy: 1.0,
            },
            7,
        );
        let b = generate(&spec).unwrap().quantized();
        let out = run(&b, &cfg(2));
        assert!(out.metrics.masked_mean.unwrap() <= out.metrics.mean.unwrap());
    }
}

#[test]
fn periodic_integer_shift_gives_shifted_latents() {
    let spec = SceneSpec {
        periodic: true,
        ..scene(Motion::Translate { dx: 8.0, dy: -16.0 }, 4)
    };
    let b = periodic_shift_variant(&spec).unwrap();
    let out = run(&b, &cfg(1));
    let anchor = out.translations[0].latent();
    for (k, t) in out.translations.iter().enumerate().skip(1) {
        let back = FlowField::constant(8, 8, -(k as f32), 2.0 * k as f32).unwrap();
        let expected = backward_warp_with(anchor, &back, b.boundary).unwrap();
        assert_eq!(t.latent(), &expected, "frame {k}");
    }
}

#[test]
fn runs_are_deterministic() {
    let b = generate(&moving_scenes()[1]).unwrap();
    let c = PipelineConfig {
        denoiser: DenoiserSpec::Attention(AttentionToyParams::default()),
        ..cfg(2)
    };
    let a = run(&b, &c);
    let again = run(&b, &c);
    assert_eq!(a.latents(), again.latents());
    assert_eq!(a.metrics, again.metrics);
}

#[test]
fn quantized_frames_round_trip_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let b = generate(&moving_scenes()[0]).unwrap().quantized();
    let path = dir.path().join("f.png");
    b.frames[3].save_png(&path).unwrap();
    assert_eq!(FrameImage::load(&path).unwrap(), b.frames[3]);
}
