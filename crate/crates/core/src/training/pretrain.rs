//! The contrastive pre-training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LocalNegatives, TrainConfig};
use super::metrics::{MetricsLog, StepRecord};
use super::optim::{cosine_lr, Sgd, SgdConfig};
use crate::contrastive::{
    global_infonce, inter_modal_loss, lmcl, lmcl_ablation, lmcl_fra, total_loss, LossBreakdown, LossTerms,
    Temperature,
};
use crate::encoders::{flow_batch, rgb_batch, Checkpoint, DualEncoder, ParamSet};
use crate::error::{Error, Result};
use crate::flow_ops::{rotate_flow, sample_angle, FlowField};
use crate::moco::{MemoryBank, MomentumPair};
use crate::motion_sampling::mds_candidates;
use crate::seed::derive_seed;
use crate::synth::{extract_clip, valid_starts, Clip, ClipSelector, SyntheticVideo};
use crate::tensor::{Tape, Tensor};

const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_STEP: u64 = 2;
const STREAM_WARMUP: u64 = 3;

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub config: TrainConfig,
    pub pair: MomentumPair,
    pub rgb_bank: MemoryBank,
    pub flow_bank: MemoryBank,
    pub log: MetricsLog,
}

impl PretrainOutcome {
    /// Query and key parameters, both banks and the config echo.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut blobs = Vec::new();
        for (prefix, set) in [("query", &self.pair.query.params), ("key", &self.pair.key.params)] {
            for (name, t) in set.iter() {
                blobs.push((format!("{}/{}", prefix, name), t.clone()));
            }
        }
        for (name, bank) in [("rgb", &self.rgb_bank), ("flow", &self.flow_bank)] {
            let (t, cursor) = bank.state();
            blobs.push((format!("bank/{}", name), t));
            blobs.push((format!("bank/{}.cursor", name), Tensor::scalar(cursor as f64)));
        }
        Checkpoint {
            config_echo: self.config.to_text(),
            blobs,
        }
    }
}

/// The query encoder as it is before the first step of a run with `config`.
pub fn initial_encoder(config: &TrainConfig) -> Result<DualEncoder> {
    DualEncoder::init(config.encoder_config(), derive_seed(config.seed, &[STREAM_INIT]))
}

/// Rebuilds the encoder stored under `prefix` ("query" or "key").
pub fn encoder_from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<(TrainConfig, DualEncoder)> {
    let config = TrainConfig::from_text(&ckpt.config_echo)?;
    let mut enc = DualEncoder::init(config.encoder_config(), 0)?;
    let mut loaded = ParamSet::new();
    for (name, t) in ckpt.with_prefix(prefix) {
        loaded.insert(name, t.clone())?;
    }
    enc.params.check_layout(&loaded)?;
    enc.params = loaded;
    Ok((config, enc))
}

/// Rejects corpora the loop cannot sample from, before any work is done.
pub fn validate_corpus(config: &TrainConfig, videos: &[SyntheticVideo]) -> Result<()> {
    config.validate()?;
    let first = videos
        .first()
        .ok_or_else(|| Error::invalid("pre-training needs at least one video"))?;
    if videos.len() < config.batch_size {
        return Err(Error::invalid(format!(
            "batch size {} exceeds the {} training videos",
            config.batch_size,
            videos.len()
        )));
    }
    if config.batch_size > config.bank_size {
        return Err(Error::Config(format!(
            "batch size {} exceeds bank size {}",
            config.batch_size, config.bank_size
        )));
    }
    if first.height % 8 != 0 || first.width % 8 != 0 {
        return Err(Error::invalid(format!(
            "frame size {}×{} must be divisible by 8",
            first.height, first.width
        )));
    }
    for (i, v) in videos.iter().enumerate() {
        if (v.height, v.width) != (first.height, first.width) {
            return Err(Error::invalid(format!(
                "video {} is {}×{}, expected {}×{}",
                i, v.height, v.width, first.height, first.width
            )));
        }
        if v.stride != config.stride {
            return Err(Error::invalid(format!(
                "video {} has flow stride {}, config stride is {}",
                i, v.stride, config.stride
            )));
        }
        valid_starts(v.num_frames, config.clip_len, config.stride)?;
    }
    Ok(())
}

fn maybe_flip(clip: &mut Clip, enabled: bool, rng: &mut impl Rng) {
    if enabled && rng.gen_bool(0.5) {
        clip.flip_horizontal();
    }
}

/// Query tape inputs for one step.
struct StepBatch {
    rgb_q: Tensor,
    flow_q: Tensor,
    rgb_k: Tensor,
    flow_k: Tensor,
    /// Rotated query flows, one tensor per augmentation.
    rotated: Vec<Tensor>,
}

fn rotated_flows(
    clips: &[Clip],
    config: &TrainConfig,
    per_frame: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut out: Vec<Vec<FlowField>> = Vec::with_capacity(clips.len());
    for c in clips {
        let shared = sample_angle(config.alpha, rng)?;
        let mut rot = Vec::with_capacity(c.flows.len());
        for f in &c.flows {
            let angle = if per_frame { sample_angle(config.alpha, rng)? } else { shared };
            rot.push(rotate_flow(f, angle));
        }
        out.push(rot);
    }
    let refs: Vec<&[FlowField]> = out.iter().map(Vec::as_slice).collect();
    flow_batch(&refs)
}

fn build_batch(
    videos: &[SyntheticVideo],
    ids: &[usize],
    candidates: &[Vec<usize>],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepBatch> {
    let mut qs = Vec::with_capacity(ids.len());
    let mut ks = Vec::with_capacity(ids.len());
    for &i in ids {
        let pool = &candidates[i];
        let qs_start = *pool.choose(rng).ok_or_else(|| Error::invalid("no candidate windows"))?;
        let ks_start = *pool.choose(rng).expect("non-empty");
        let mut q = extract_clip(&videos[i], qs_start, config.clip_len, config.stride)?;
        let mut k = extract_clip(&videos[i], ks_start, config.clip_len, config.stride)?;
        maybe_flip(&mut q, config.flip, rng);
        maybe_flip(&mut k, config.flip, rng);
        qs.push(q);
        ks.push(k);
    }
    let rotated = match config.local_negatives {
        LocalNegatives::Frames if config.fra => vec![rotated_flows(&qs, config, false, rng)?],
        LocalNegatives::Frames => Vec::new(),
        LocalNegatives::AugmentedOnly => (0..config.num_aug)
            .map(|_| rotated_flows(&qs, config, true, rng))
            .collect::<Result<_>>()?,
    };
    let q_refs: Vec<&Clip> = qs.iter().collect();
    let k_refs: Vec<&Clip> = ks.iter().collect();
    let qf: Vec<&[FlowField]> = qs.iter().map(|c| c.flows.as_slice()).collect();
    let kf: Vec<&[FlowField]> = ks.iter().map(|c| c.flows.as_slice()).collect();
    Ok(StepBatch {
        rgb_q: rgb_batch(&q_refs)?,
        flow_q: flow_batch(&qf)?,
        rgb_k: rgb_batch(&k_refs)?,
        flow_k: flow_batch(&kf)?,
        rotated,
    })
}

/// Global key embeddings (RGB, flow) without gradients.
fn key_embeddings(key: &DualEncoder, rgb: &Tensor, flows: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let b = key.params.bind(&mut tape, false);
    let r = tape.constant(rgb.clone());
    let f = tape.constant(flows.clone());
    let feats = key.forward(&mut tape, &b, r, f)?;
    Ok((tape.value(feats.rgb_glb).clone(), tape.value(feats.flow_glb).clone()))
}

/// One optimisation step's loss on the query tape; returns the gradients and the breakdown.
fn step_loss(
    query: &DualEncoder,
    batch: &StepBatch,
    keys: &(Tensor, Tensor),
    banks: (&MemoryBank, &MemoryBank),
    config: &TrainConfig,
) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let tau = Temperature::new(config.tau)?;
    let mut tape = Tape::new();
    let bound = query.params.bind(&mut tape, true);
    let rgb = tape.constant(batch.rgb_q.clone());
    let flows = tape.constant(batch.flow_q.clone());
    let f = query.forward(&mut tape, &bound, rgb, flows)?;
    let rgb_k = tape.constant(keys.0.clone());
    let flow_k = tape.constant(keys.1.clone());
    let rgb_bank = tape.constant(banks.0.negatives()?);
    let flow_bank = tape.constant(banks.1.negatives()?);

    let l_rgb = global_infonce(&mut tape, f.rgb_glb, rgb_k, rgb_bank, tau)?;
    let l_flow = global_infonce(&mut tape, f.flow_glb, flow_k, flow_bank, tau)?;
    let l_rf = inter_modal_loss(&mut tape, f.rgb_glb, flow_k, flow_bank, f.flow_glb, rgb_k, rgb_bank, tau)?;
    let mut hats = Vec::with_capacity(batch.rotated.len());
    for r in &batch.rotated {
        let x = tape.constant(r.clone());
        hats.push(query.flow_forward(&mut tape, &bound, x)?.lc);
    }
    let l_lmc = match (config.local_negatives, hats.as_slice()) {
        (LocalNegatives::AugmentedOnly, _) => lmcl_ablation(&mut tape, f.rgb_lc, f.flow_lc, &hats, tau)?,
        (LocalNegatives::Frames, [hat]) => lmcl_fra(&mut tape, f.rgb_lc, f.flow_lc, *hat, tau)?,
        (LocalNegatives::Frames, _) => lmcl(&mut tape, f.rgb_lc, f.flow_lc, tau)?,
    };
    let terms = LossTerms {
        rgb: l_rgb,
        flow: l_flow,
        rf: l_rf,
        lmc: l_lmc,
    };
    let (total, breakdown) = total_loss(&mut tape, terms, config.loss_weights())?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {:?}", breakdown)));
    }
    tape.backward(total)?;
    Ok((query.params.gradients(&tape, &bound), breakdown))
}

/// Steps per epoch and total optimisation steps for a corpus of `n` videos.
pub fn schedule_len(config: &TrainConfig, n: usize) -> (usize, usize) {
    let per_epoch = (n / config.batch_size).max(1);
    let full = per_epoch * config.epochs;
    let total = if config.max_steps > 0 { config.max_steps.min(full) } else { full };
    (per_epoch, total)
}

/// Runs pre-training on `videos`; `on_step` sees every logged record.
pub fn pretrain_with(
    config: &TrainConfig,
    videos: &[SyntheticVideo],
    mut on_step: impl FnMut(&StepRecord),
) -> Result<PretrainOutcome> {
    validate_corpus(config, videos)?;
    let candidates: Vec<Vec<usize>> = videos
        .iter()
        .map(|v| match config.sampler {
            ClipSelector::Uniform => Ok(valid_starts(v.num_frames, config.clip_len, config.stride)?.collect()),
            ClipSelector::Mds => mds_candidates(v, config.clip_len, config.stride),
        })
        .collect::<Result<_>>()?;

    let mut pair = MomentumPair::new(initial_encoder(config)?, config.ema_momentum)?;
    let mut opt = Sgd::new(
        &pair.query.params,
        SgdConfig {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        },
    );
    let embed = config.embed;
    let mut rgb_bank = MemoryBank::new(config.bank_size, embed)?;
    let mut flow_bank = MemoryBank::new(config.bank_size, embed)?;

    // Warm-up: fill both banks with initial key embeddings so every step sees N negatives.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_WARMUP]));
        let mut ids: Vec<usize> = Vec::new();
        while rgb_bank.len() < config.bank_size {
            if ids.len() < config.batch_size {
                let mut more: Vec<usize> = (0..videos.len()).collect();
                more.shuffle(&mut rng);
                ids.extend(more);
            }
            let take = config.batch_size.min(config.bank_size - rgb_bank.len());
            let chunk: Vec<usize> = ids.drain(..take).collect();
            let warm = build_batch(videos, &chunk, &candidates, config, &mut rng)?;
            let (r, f) = key_embeddings(&pair.key, &warm.rgb_k, &warm.flow_k)?;
            rgb_bank.enqueue(&r)?;
            flow_bank.enqueue(&f)?;
        }
    }

    let (per_epoch, total_steps) = schedule_len(config, videos.len());
    let mut log = MetricsLog::new();
    let mut order: Vec<usize> = Vec::new();
    for step in 0..total_steps {
        let started = Instant::now();
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_ORDER, epoch as u64]));
            order = (0..videos.len()).collect();
            order.shuffle(&mut rng);
        }
        let slot = step % per_epoch;
        let ids = &order[slot * config.batch_size..(slot + 1) * config.batch_size];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[STREAM_STEP, step as u64]));
        let batch = build_batch(videos, ids, &candidates, config, &mut rng)?;
        let keys = key_embeddings(&pair.key, &batch.rgb_k, &batch.flow_k)?;
        let (grads, breakdown) = step_loss(&pair.query, &batch, &keys, (&rgb_bank, &flow_bank), config)?;
        let lr = cosine_lr(step, total_steps, config.lr)?;
        opt.step(&mut pair.query.params, &grads, lr)?;
        pair.update_key()?;
        rgb_bank.enqueue(&keys.0)?;
        flow_bank.enqueue(&keys.1)?;
        let record = StepRecord::new(step, lr, &breakdown);
        on_step(&record);
        log.push(record)?;
        log.step_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(PretrainOutcome {
        config: config.clone(),
        pair,
        rgb_bank,
        flow_bank,
        log,
    })
}

pub fn pretrain(config: &TrainConfig, videos: &[SyntheticVideo]) -> Result<PretrainOutcome> {
    pretrain_with(config, videos, |_| {})
}
