#![allow(dead_code)]

use icrep::config::RunConfig;
use icrep::corpus::{generate_synthetic, Corpus};
use icrep::encoder::{DualEncoderState, EncoderConfig};
use icrep::train::{forward_backward, prepare_sample, PreparedSample, TrainState};

/// `d = 8`, one block, `G = 4` patches of 4×4×3 pixels.
pub fn gradcheck_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig {
        patch_size: 4,
        grid_side: 2,
        channels: 3,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        proj_dim: 4,
        projection_head: true,
        decoder_dim: 4,
        decoder_depth: 1,
        decoder_heads: 2,
    };
    cfg.generator.image_size = 8;
    cfg.augment.max_shift = 2;
    cfg.train.mask_ratio = 0.5;
    cfg.validate().unwrap();
    cfg
}

/// Small but real: 32×32 images, 16 patches, 1 epoch of 8 images in 2 steps.
pub fn smoke_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig {
        patch_size: 8,
        grid_side: 4,
        embed_dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        proj_dim: 8,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        ..EncoderConfig::default()
    };
    cfg.generator.image_size = 32;
    cfg.generator.count = 8;
    cfg.augment.max_shift = 4;
    cfg.train.epochs = 1;
    cfg.train.warmup_epochs = 0;
    cfg.train.batch_size = 4;
    cfg.validate().unwrap();
    cfg
}

pub fn corpus(cfg: &RunConfig, n: usize, seed: u64) -> Corpus {
    generate_synthetic(n, &cfg.generator, seed).unwrap().0
}

pub fn batch(cfg: &RunConfig, corpus: &Corpus) -> Vec<PreparedSample> {
    corpus.samples.iter().enumerate().map(|(i, s)| prepare_sample(&s.image, cfg, 0, i as u64).unwrap()).collect()
}

/// Largest per-tensor relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// between backprop and central differences, over query and decoder tensors.
pub fn worst_gradient_error(cfg: &RunConfig, n_images: usize, h: f64) -> f64 {
    let corpus = corpus(cfg, n_images, 11);
    let batch = batch(cfg, &corpus);
    let mut state = TrainState::init(cfg).unwrap().model;
    let (_, grads) = forward_backward(&state, &batch, cfg).unwrap();
    assert!(!grads.key_touched);
    let loss = |s: &DualEncoderState| forward_backward(s, &batch, cfg).unwrap().0.total;
    let mut worst = 0.0f64;
    for decoder in [false, true] {
        let count = if decoder { state.decoder.len() } else { state.query.len() };
        for id in 0..count {
            let analytic = if decoder { &grads.decoder[id] } else { &grads.query[id] };
            let shape = if decoder { state.decoder.get(id).dim() } else { state.query.get(id).dim() };
            let analytic = analytic.clone().unwrap_or_else(|| ndarray::Array2::zeros(shape));
            let mut numeric = ndarray::Array2::<f64>::zeros(shape);
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let nudge = |state: &mut DualEncoderState, delta: f64| {
                        let t = if decoder { state.decoder.get_mut(id) } else { state.query.get_mut(id) };
                        t[[r, c]] += delta;
                    };
                    nudge(&mut state, h);
                    let up = loss(&state);
                    nudge(&mut state, -2.0 * h);
                    let down = loss(&state);
                    nudge(&mut state, h);
                    numeric[[r, c]] = (up - down) / (2.0 * h);
                }
            }
            let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
            let scale = analytic.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
            if scale > 1e-10 {
                worst = worst.max(diff / scale);
            } else {
                worst = worst.max(diff);
            }
        }
    }
    worst
}
