//! Pretraining loop: view construction, forward/backward through both
//! branches, AdamW on the query side, momentum update of the key side,
//! learning-rate schedule, metrics log and checkpoints.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{MemTarget, RunConfig};
use crate::corpus::Corpus;
use crate::encoder::{
    decode_on_tape, encode_on_tape, flatten_patches, project_on_tape, DualEncoderState, TokenInput, DECODER_GROUP,
    KEY_GROUP, QUERY_GROUP,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{patch_entropy, to_patch_grid, ImageTensor};
use crate::loss::{
    entropy_recon_loss_with_grad, image_wise_loss_with_grad, patch_wise_loss_with_grad, total_loss, ContrastiveBatch,
    LossBreakdown,
};
use crate::optim::{clip_global_norm, lr_at, AdamWState};
use crate::patchify::{augment_patch, make_views, sample_mask, MaskPlan, ShiftedView};
use crate::rng::{sample_stream, tagged_stream, StreamRng};

pub const METRICS_FILE: &str = "metrics.log";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Everything a training step needs from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// Visible query patches, one flattened row each.
    pub query_rows: Array2<f64>,
    pub visible: Vec<usize>,
    /// All key patches.
    pub key_rows: Array2<f64>,
    pub mask: MaskPlan,
    /// One row per masked patch, taken from the unaugmented source patch.
    pub targets: Array2<f64>,
}

fn whole_image_view(img: &ImageTensor, rng: &mut StreamRng, cfg: &RunConfig) -> Result<ShiftedView> {
    let augmented = ImageTensor::new(augment_patch(img.data().view(), rng, &cfg.augment))?;
    Ok(ShiftedView::unshifted(&to_patch_grid(&augmented, cfg.encoder.patch_size)?))
}

/// Builds both views, the mask and the reconstruction targets of one image
/// from its `(seed, epoch, index)` stream.
pub fn prepare_sample(img: &ImageTensor, cfg: &RunConfig, epoch: u64, index: u64) -> Result<PreparedSample> {
    let enc = &cfg.encoder;
    if img.height() != enc.image_size() || img.width() != enc.image_size() || img.channels() != enc.channels {
        return Err(Error::Shape(format!(
            "image {}x{}x{} does not match encoder input {}x{}x{}",
            img.height(),
            img.width(),
            img.channels(),
            enc.image_size(),
            enc.image_size(),
            enc.channels
        )));
    }
    let mut rng = sample_stream(cfg.train.seed, epoch, index);
    let grid = to_patch_grid(img, enc.patch_size)?;
    let (view_q, view_k) = if cfg.ablation.shifted_patchify {
        make_views(&grid, &mut rng, &cfg.augment)?
    } else {
        (whole_image_view(img, &mut rng, cfg)?, whole_image_view(img, &mut rng, cfg)?)
    };
    let mask = sample_mask(&mut rng, grid.len(), cfg.train.mask_ratio)?;
    let visible = mask.visible_indices();
    let targets = match cfg.ablation.mem_target {
        MemTarget::Entropy => {
            let values = mask
                .masked_indices
                .iter()
                .map(|&j| patch_entropy(grid.patches()[j].view(), cfg.train.entropy_bins).map(|e| e.normalized))
                .collect::<Result<Vec<_>>>()?;
            Array2::from_shape_vec((values.len(), 1), values).map_err(|e| Error::Shape(e.to_string()))?
        }
        MemTarget::Pixels => flatten_patches(grid.patches(), &mask.masked_indices),
    };
    let all: Vec<usize> = (0..grid.len()).collect();
    Ok(PreparedSample {
        query_rows: flatten_patches(&view_q.patches, &visible),
        visible,
        key_rows: flatten_patches(&view_k.patches, &all),
        mask,
        targets,
    })
}

/// Gradients of one mini-batch, indexed like the parameter sets.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub query: Vec<Option<Array2<f64>>>,
    pub decoder: Vec<Option<Array2<f64>>>,
    /// Whether any gradient reached the key branch (it never should).
    pub key_touched: bool,
}

fn split_rows(m: &Array2<f64>, segments: &[(usize, usize)]) -> Vec<Array2<f64>> {
    segments.iter().map(|&(start, len)| m.slice(s![start..start + len, ..]).to_owned()).collect()
}

fn key_features(state: &DualEncoderState, batch: &[PreparedSample], cfg: &RunConfig) -> Result<(Array2<f64>, Vec<(usize, usize)>)> {
    let layout = state.branch_layout();
    let all: Vec<usize> = (0..cfg.encoder.grid_len()).collect();
    let inputs: Vec<TokenInput> =
        batch.iter().map(|b| TokenInput { patches: b.key_rows.view(), index_map: &all }).collect();
    let mut g = Graph::new();
    let (tokens, segments) = encode_on_tape(&mut g, KEY_GROUP, &state.key, &layout, &cfg.encoder, &inputs)?;
    let feats = if cfg.ablation.patch_wise_loss {
        tokens
    } else {
        g.mean_rows(tokens, &segments)
    };
    let out = project_on_tape(&mut g, KEY_GROUP, &state.key, &layout, feats);
    Ok((g.value(out).clone(), segments))
}

fn first_non_finite(terms: &[f64], segments: &[(usize, usize)]) -> Option<usize> {
    let bad = terms.iter().position(|t| !t.is_finite())?;
    segments.iter().position(|&(start, len)| bad >= start && bad < start + len)
}

/// Loss and gradients for one mini-batch. `NonFiniteLoss` carries the
/// batch position of the first offending image.
pub fn forward_backward(
    state: &DualEncoderState,
    batch: &[PreparedSample],
    cfg: &RunConfig,
) -> Result<(LossBreakdown, StepGradients)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty mini-batch".into()));
    }
    let enc = &cfg.encoder;
    let layout = state.branch_layout();
    let (keys, key_segments) = key_features(state, batch, cfg)?;

    let mut g = Graph::new();
    let inputs: Vec<TokenInput> =
        batch.iter().map(|b| TokenInput { patches: b.query_rows.view(), index_map: &b.visible }).collect();
    let (tokens, segments) = encode_on_tape(&mut g, QUERY_GROUP, &state.query, &layout, enc, &inputs)?;

    let (q_var, contrastive, term_segments): (Var, _, Vec<(usize, usize)>) = if cfg.ablation.patch_wise_loss {
        let q = project_on_tape(&mut g, QUERY_GROUP, &state.query, &layout, tokens);
        let cb = ContrastiveBatch {
            queries: split_rows(g.value(q), &segments),
            keys: split_rows(&keys, &key_segments),
            mask_plans: batch.iter().map(|b| b.mask.clone()).collect(),
            temperature: cfg.train.temperature,
            negatives: cfg.ablation.negatives,
        };
        (q, patch_wise_loss_with_grad(&cb)?, segments.clone())
    } else {
        let pooled = g.mean_rows(tokens, &segments);
        let q = project_on_tape(&mut g, QUERY_GROUP, &state.query, &layout, pooled);
        let out = image_wise_loss_with_grad(g.value(q), &keys, cfg.train.temperature)?;
        (q, out, (0..batch.len()).map(|i| (i, 1)).collect())
    };
    if let Some(index) = first_non_finite(&contrastive.terms, &term_segments) {
        return Err(Error::NonFiniteLoss { index, detail: "contrastive term is not finite".into() });
    }

    let masks: Vec<&MaskPlan> = batch.iter().map(|b| &b.mask).collect();
    let pred = decode_on_tape(&mut g, &state.decoder, &state.decoder_layout(), enc, tokens, &segments, &masks);
    let target_views: Vec<_> = batch.iter().map(|b| b.targets.view()).collect();
    let targets = concatenate(Axis(0), &target_views).map_err(|e| Error::Shape(e.to_string()))?;
    let (l_rec, rec_grad) = entropy_recon_loss_with_grad(g.value(pred), &targets)?;
    if !l_rec.is_finite() {
        let mut start = 0;
        let index = batch
            .iter()
            .position(|b| {
                let m = b.mask.masked_count();
                let bad = g.value(pred).slice(s![start..start + m, ..]).iter().any(|v| !v.is_finite());
                start += m;
                bad
            })
            .unwrap_or(0);
        return Err(Error::NonFiniteLoss { index, detail: "reconstruction loss is not finite".into() });
    }

    let lambda = cfg.effective_lambda();
    let breakdown = total_loss(contrastive.loss, l_rec, lambda);
    let q_seed = concatenate(Axis(0), &contrastive.query_grads.iter().map(|a| a.view()).collect::<Vec<_>>())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let mut seeds = vec![(q_var, q_seed)];
    if rec_grad.nrows() > 0 {
        seeds.push((pred, rec_grad * lambda));
    }
    let grads = g.backward(&seeds);
    Ok((
        breakdown,
        StepGradients {
            query: grads.for_group(QUERY_GROUP, state.query.len()),
            decoder: grads.for_group(DECODER_GROUP, state.decoder.len()),
            key_touched: grads.touches_group(KEY_GROUP),
        },
    ))
}

/// Model plus optimizer state and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DualEncoderState,
    pub opt_query: AdamWState,
    pub opt_decoder: AdamWState,
    /// Global optimizer steps taken.
    pub step: u64,
    /// Epochs fully completed.
    pub epoch: u64,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let model =
            DualEncoderState::init(&cfg.encoder, cfg.recon_dim(), cfg.train.momentum, derive_init_seed(cfg.train.seed))?;
        Ok(Self {
            opt_query: AdamWState::zeros_like(&model.query),
            opt_decoder: AdamWState::zeros_like(&model.decoder),
            model,
            step: 0,
            epoch: 0,
        })
    }
}

fn derive_init_seed(seed: u64) -> u64 {
    use rand::RngCore;
    tagged_stream(seed, "init", 0).next_u64()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    /// Gradient norm before clipping, when clipping is enabled.
    pub grad_norm: Option<f64>,
    pub clipped: bool,
}

/// One optimization step at learning rate `lr`, followed by the momentum
/// update of the key branch.
pub fn train_step(state: &mut TrainState, batch: &[PreparedSample], cfg: &RunConfig, lr: f64) -> Result<StepOutput> {
    let (loss, mut grads) = forward_backward(&state.model, batch, cfg)?;
    let (mut grad_norm, mut clipped) = (None, false);
    if let Some(max) = cfg.train.grad_clip {
        let norm = clip_global_norm(&mut [&mut grads.query, &mut grads.decoder], max);
        clipped = norm > max;
        if clipped {
            log::info!("step {}: gradient norm {norm:.4} clipped to {max}", state.step);
        }
        grad_norm = Some(norm);
    }
    let adamw = cfg.train.adamw();
    state.opt_query.step(&mut state.model.query, &grads.query, lr, &adamw)?;
    state.opt_decoder.step(&mut state.model.decoder, &grads.decoder, lr, &adamw)?;
    crate::encoder::momentum_update(&mut state.model)?;
    state.step += 1;
    Ok(StepOutput { loss, grad_norm, clipped })
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub l_pwin: f64,
    pub l_rec: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Directory for `metrics.log` and `checkpoint.bin`; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop (after checkpointing) once this many global steps are done.
    pub halt_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Rows produced by this invocation.
    pub log: Vec<MetricsRow>,
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Shuffled sample order of an epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut tagged_stream(seed, "epoch-order", epoch));
    order
}

fn write_checkpoint(state: &TrainState, cfg: &RunConfig, path: &Path) -> Result<()> {
    save_checkpoint(&Checkpoint::from_state(state, cfg), path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

/// Full training loop over `corpus`.
pub fn pretrain(corpus: &Corpus, cfg: &RunConfig, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("cannot pretrain on an empty corpus".into()));
    }
    let mut state = match &opts.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config.encoder != cfg.encoder || ckpt.config.ablation != cfg.ablation {
                return Err(Error::Config("resume checkpoint was trained with a different model config".into()));
            }
            ckpt.into_state()
        }
        None => TrainState::init(cfg)?,
    };
    let n = corpus.len();
    let spe = steps_per_epoch(n, cfg.train.batch_size);
    let total = spe * cfg.train.epochs;
    let warmup = spe * cfg.train.warmup_epochs;

    let mut log_writer = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Checkpoint(format!("creating {}: {e}", dir.display())))?;
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(opts.resume.is_some())
                .write(true)
                .truncate(opts.resume.is_none())
                .open(dir.join(METRICS_FILE))?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let mut log_rows = Vec::new();

    'epochs: while state.epoch < cfg.train.epochs {
        let epoch = state.epoch;
        let order = epoch_order(cfg.train.seed, epoch, n);
        let first = (state.step - epoch * spe) as usize;
        for b in first..spe as usize {
            let indices = &order[b * cfg.train.batch_size..((b + 1) * cfg.train.batch_size).min(n)];
            let batch = indices
                .iter()
                .map(|&i| prepare_sample(&corpus.samples[i].image, cfg, epoch, i as u64))
                .collect::<Result<Vec<_>>>()?;
            let lr = lr_at(state.step, total, warmup, cfg.train.base_lr)?;
            let out = train_step(&mut state, &batch, cfg, lr).map_err(|e| match e {
                Error::NonFiniteLoss { index, detail } => {
                    let id = &corpus.samples[indices[index]].id;
                    log::error!("non-finite loss at step {}: sample {} (`{id}`): {detail}", state.step, indices[index]);
                    Error::NonFiniteLoss { index: indices[index], detail: format!("{detail}; sample id `{id}`") }
                }
                other => other,
            })?;
            let row = MetricsRow {
                step: state.step,
                epoch,
                lr,
                l_pwin: out.loss.l_pwin,
                l_rec: out.loss.l_rec,
                total: out.loss.total,
                grad_norm: out.grad_norm,
            };
            log::debug!("step {} epoch {epoch} lr {lr:.3e} total {:.5}", row.step, row.total);
            if let Some(w) = log_writer.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&row)?)?;
            }
            log_rows.push(row);
            if b + 1 == spe as usize {
                state.epoch += 1;
            }
            let periodic = cfg.train.checkpoint_every.is_some_and(|k| state.step % k == 0);
            let halting = opts.halt_after.is_some_and(|h| state.step >= h);
            if let Some(path) = &ckpt_path {
                if periodic || halting || b + 1 == spe as usize {
                    if let Some(w) = log_writer.as_mut() {
                        w.flush()?;
                    }
                    write_checkpoint(&state, cfg, path)?;
                }
            }
            if halting {
                break 'epochs;
            }
        }
        log::info!("epoch {} done at step {}", epoch + 1, state.step);
    }
    if let Some(w) = log_writer.as_mut() {
        w.flush()?;
    }
    Ok(PretrainOutcome { checkpoint: Checkpoint::from_state(&state, cfg), log: log_rows })
}

/// Runs a pretrain into `out_dir` and reopens the resulting checkpoint.
pub fn pretrain_to_dir(corpus: &Corpus, cfg: &RunConfig, out_dir: &Path) -> Result<Checkpoint> {
    let opts = PretrainOptions { out_dir: Some(out_dir.to_path_buf()), ..Default::default() };
    pretrain(corpus, cfg, &opts)?;
    load_checkpoint(&out_dir.join(CHECKPOINT_FILE))
}
