//! Audio-visual sync expert: paired image/audio window encoders trained
//! with a contrastive loss, then frozen. The embedding cosine provides
//! both a training signal and the sync-confidence metric.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::optim::{AdamConfig, OptimizerState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Window and encoder dimensions.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyncConfig {
    /// Consecutive frames per window.
    pub window: usize,
    /// Mouth crop size fed to the image encoder.
    pub image_width: usize,
    pub image_height: usize,
    pub speech_dim: usize,
    pub embed_dim: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig { window: 5, image_width: 24, image_height: 16, speech_dim: 64, embed_dim: 64 }
    }
}

const IMG_CHANNELS: [usize; 3] = [32, 64, 64];

impl SyncConfig {
    /// Spatial size after the three stride-2 convolutions.
    fn conv_out(&self) -> (usize, usize) {
        let f = |mut v: usize| {
            for _ in 0..3 {
                v = (v + 1) / 2; // 3x3, stride 2, pad 1
            }
            v
        };
        (f(self.image_height), f(self.image_width))
    }

    fn flat_dim(&self) -> usize {
        let (h, w) = self.conv_out();
        IMG_CHANNELS[2] * h * w
    }
}

/// Weights of the two encoders. Once pre-training completes the expert is
/// frozen; the flag is sticky across serialization.
#[derive(Debug, Clone)]
pub struct ExpertParams<S: Scalar> {
    pub config: SyncConfig,
    /// [conv w/b x3, fc w/b]
    pub image_params: Vec<Tensor<S>>,
    /// [fc1 w/b, fc2 w/b]
    pub audio_params: Vec<Tensor<S>>,
    pub frozen: bool,
}

impl<S: Scalar> ExpertParams<S> {
    pub fn init(config: SyncConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut image_params = Vec::new();
        let mut c_in = config.window * 3;
        for c_out in IMG_CHANNELS {
            let scale = (2.0 / (c_in * 9) as f64).sqrt();
            let w: Vec<S> = (0..c_out * c_in * 9)
                .map(|_| S::from_f64(rng.gen_range(-1.0..1.0) * scale))
                .collect();
            image_params.push(Tensor::new(vec![c_out, c_in, 3, 3], w).unwrap());
            image_params.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        let flat = config.flat_dim();
        let scale = (2.0 / flat as f64).sqrt();
        let w: Vec<S> = (0..flat * config.embed_dim)
            .map(|_| S::from_f64(rng.gen_range(-1.0..1.0) * scale))
            .collect();
        image_params.push(Tensor::new(vec![flat, config.embed_dim], w).unwrap());
        image_params.push(Tensor::zeros(&[config.embed_dim]));

        let mut audio_params = Vec::new();
        let in_dim = config.window * config.speech_dim;
        let hidden = 128;
        for (a, b) in [(in_dim, hidden), (hidden, config.embed_dim)] {
            let scale = (2.0 / a as f64).sqrt();
            let w: Vec<S> =
                (0..a * b).map(|_| S::from_f64(rng.gen_range(-1.0..1.0) * scale)).collect();
            audio_params.push(Tensor::new(vec![a, b], w).unwrap());
            audio_params.push(Tensor::zeros(&[b]));
        }
        ExpertParams { config, image_params, audio_params, frozen: false }
    }

    fn all_params(&self) -> Vec<Tensor<S>> {
        self.image_params.iter().chain(&self.audio_params).cloned().collect()
    }

    fn set_all_params(&mut self, params: Vec<Tensor<S>>) {
        let n_img = self.image_params.len();
        for (i, p) in params.into_iter().enumerate() {
            if i < n_img {
                self.image_params[i] = p;
            } else {
                self.audio_params[i - n_img] = p;
            }
        }
    }
}

/// Build the [window*3, H, W] input tensor from a stack of mouth frames.
pub fn stack_image_window<S: Scalar>(cfg: &SyncConfig, frames: &[&Image<S>]) -> Result<Tensor<S>> {
    if frames.len() != cfg.window {
        return Err(Error::Shape(format!(
            "image window needs {} frames, got {}",
            cfg.window,
            frames.len()
        )));
    }
    let (w, h) = (cfg.image_width, cfg.image_height);
    let mut data = vec![S::zero(); cfg.window * 3 * h * w];
    for (f, img) in frames.iter().enumerate() {
        if img.width != w || img.height != h {
            return Err(Error::Shape(format!(
                "image window frame is {}x{}, expected {}x{}",
                img.width, img.height, w, h
            )));
        }
        for c in 0..3 {
            for p in 0..h * w {
                data[(f * 3 + c) * h * w + p] = img.pixels[p * 3 + c];
            }
        }
    }
    Tensor::new(vec![cfg.window * 3, h, w], data)
}

/// Flatten a stack of per-frame speech features into the audio input row.
pub fn stack_audio_window<S: Scalar>(cfg: &SyncConfig, features: &[&[S]]) -> Result<Tensor<S>> {
    if features.len() != cfg.window {
        return Err(Error::Shape(format!(
            "audio window needs {} feature vectors, got {}",
            cfg.window,
            features.len()
        )));
    }
    let mut data = Vec::with_capacity(cfg.window * cfg.speech_dim);
    for f in features {
        if f.len() != cfg.speech_dim {
            return Err(Error::Shape(format!(
                "speech feature dim {} != {}",
                f.len(),
                cfg.speech_dim
            )));
        }
        data.extend_from_slice(f);
    }
    Tensor::new(vec![1, cfg.window * cfg.speech_dim], data)
}

/// Image-encoder forward over a [window*3,H,W] node; output [1, embed_dim].
pub fn encode_image_graph<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &SyncConfig,
    params: &[NodeId],
    input: NodeId,
) -> NodeId {
    let mut h = input;
    for l in 0..3 {
        h = tape.conv2d(h, params[2 * l], Some(params[2 * l + 1]), 2, 1);
        h = tape.relu(h);
    }
    let flat = tape.reshape(h, vec![1, cfg.flat_dim()]);
    let out = tape.matmul(flat, params[6]);
    tape.add_bias(out, params[7])
}

/// Audio-encoder forward over a [1, window*speech_dim] node.
pub fn encode_audio_graph<S: Scalar>(
    tape: &mut Tape<S>,
    params: &[NodeId],
    input: NodeId,
) -> NodeId {
    let h = tape.matmul(input, params[0]);
    let h = tape.add_bias(h, params[1]);
    let h = tape.relu(h);
    let out = tape.matmul(h, params[2]);
    tape.add_bias(out, params[3])
}

/// Encode a window of mouth frames to the shared embedding space.
pub fn encode_image_window<S: Scalar>(
    expert: &ExpertParams<S>,
    frames: &[&Image<S>],
) -> Result<Vec<S>> {
    let input = stack_image_window(&expert.config, frames)?;
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> =
        expert.image_params.iter().map(|t| tape.constant(t.clone())).collect();
    let inp = tape.constant(input);
    let out = encode_image_graph(&mut tape, &expert.config, &nodes, inp);
    Ok(tape.value(out).data().to_vec())
}

/// Encode a window of speech features to the shared embedding space.
pub fn encode_audio_window<S: Scalar>(
    expert: &ExpertParams<S>,
    features: &[&[S]],
) -> Result<Vec<S>> {
    let input = stack_audio_window(&expert.config, features)?;
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> =
        expert.audio_params.iter().map(|t| tape.constant(t.clone())).collect();
    let inp = tape.constant(input);
    let out = encode_audio_graph(&mut tape, &nodes, inp);
    Ok(tape.value(out).data().to_vec())
}

/// Cosine similarity of two embeddings.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na: f64 = a.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid("cosine undefined for zero-norm embedding".into()));
    }
    Ok(dot / (na * nb))
}

/// Contrastive sync loss:
/// `y * (1 - cos(i,a)) + (1-y) * max(0, cos(i,a))`.
pub fn sync_loss<S: Scalar>(i: &[S], a: &[S], y: bool) -> Result<f64> {
    let c = cosine(i, a)?;
    Ok(if y { 1.0 - c } else { c.max(0.0) })
}

/// Graph version of the contrastive loss over [1,D] embedding nodes.
pub fn sync_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    i: NodeId,
    a: NodeId,
    y: bool,
) -> NodeId {
    let c = cosine_graph(tape, i, a);
    if y {
        // 1 - cos
        tape.affine(c, -S::one(), S::one())
    } else {
        tape.relu(c)
    }
}

/// Cosine similarity as a graph scalar. A small epsilon keeps the norm
/// denominators away from zero.
pub fn cosine_graph<S: Scalar>(tape: &mut Tape<S>, a: NodeId, b: NodeId) -> NodeId {
    let eps = S::from_f64(1e-12);
    let prod = tape.mul(a, b);
    let dot = tape.sum(prod);
    let aa = tape.mul(a, a);
    let na = tape.sum(aa);
    let na = tape.affine(na, S::one(), eps);
    let na = tape.sqrt(na);
    let bb = tape.mul(b, b);
    let nb = tape.sum(bb);
    let nb = tape.affine(nb, S::one(), eps);
    let nb = tape.sqrt(nb);
    let denom = tape.mul(na, nb);
    tape.div(dot, denom)
}

/// Outcome of expert pre-training.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub mean_cos_positive: f64,
    pub mean_cos_negative: f64,
}

impl PretrainReport {
    pub fn margin(&self) -> f64 {
        self.mean_cos_positive - self.mean_cos_negative
    }
}

/// Pre-train the expert on aligned (mouth frame, speech feature) pairs.
/// Negatives shift the audio by at least `MIN_NEG_OFFSET` frames. The last
/// 20% of windows are held out and used only for the report. Returns the
/// frozen expert.
pub fn pretrain_expert<S: Scalar>(
    frames: &[Image<S>],
    features: &[Vec<S>],
    config: SyncConfig,
    epochs: usize,
    seed: u64,
    use_negatives: bool,
) -> Result<(ExpertParams<S>, PretrainReport)> {
    const MIN_NEG_OFFSET: usize = 3;
    if frames.len() != features.len() {
        return Err(Error::Shape("frames and features must be aligned".into()));
    }
    if frames.len() < 2 * config.window {
        return Err(Error::Invalid(format!(
            "corpus of {} frames is shorter than 2 windows ({})",
            frames.len(),
            2 * config.window
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut expert = ExpertParams::init(config, &mut rng);

    let n_windows = frames.len() - config.window + 1;
    let n_train = (n_windows as f64 * 0.8).ceil() as usize;
    let train_windows: Vec<usize> = (0..n_train).collect();
    let held_out: Vec<usize> = (n_train..n_windows).collect();

    let mut params = expert.all_params();
    let mut opt = OptimizerState::new(AdamConfig::with_lr(1e-3), &params);
    let n_img = expert.image_params.len();

    for _ in 0..epochs {
        let mut order = train_windows.clone();
        order.shuffle(&mut rng);
        for &w0 in &order {
            // negative audio window: shifted by >= MIN_NEG_OFFSET, in range
            let neg_start = if use_negatives {
                let mut cand;
                loop {
                    cand = rng.gen_range(0..n_windows);
                    if cand.abs_diff(w0) >= MIN_NEG_OFFSET {
                        break;
                    }
                }
                Some(cand)
            } else {
                None
            };

            let mut tape = Tape::new();
            let nodes: Vec<NodeId> = params
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(ParamId(i), t.clone()))
                .collect();
            let (img_nodes, aud_nodes) = nodes.split_at(n_img);

            let frame_refs: Vec<&Image<S>> = (w0..w0 + config.window).map(|i| &frames[i]).collect();
            let img_in = tape.constant(stack_image_window(&config, &frame_refs)?);
            let i_emb = encode_image_graph(&mut tape, &config, img_nodes, img_in);

            let feat_refs: Vec<&[S]> =
                (w0..w0 + config.window).map(|i| features[i].as_slice()).collect();
            let aud_in = tape.constant(stack_audio_window(&config, &feat_refs)?);
            let a_emb = encode_audio_graph(&mut tape, aud_nodes, aud_in);

            let mut loss = sync_loss_graph(&mut tape, i_emb, a_emb, true);
            if let Some(neg) = neg_start {
                let neg_refs: Vec<&[S]> =
                    (neg..neg + config.window).map(|i| features[i].as_slice()).collect();
                let neg_in = tape.constant(stack_audio_window(&config, &neg_refs)?);
                let n_emb = encode_audio_graph(&mut tape, aud_nodes, neg_in);
                let neg_loss = sync_loss_graph(&mut tape, i_emb, n_emb, false);
                loss = tape.add(loss, neg_loss);
            }

            let grads = tape.backward(loss)?;
            let grad_vec: Vec<Option<Tensor<S>>> =
                (0..params.len()).map(|i| grads.by_param(ParamId(i)).cloned()).collect();
            opt.adam_step(&mut params, &grad_vec)?;
        }
    }
    expert.set_all_params(params);
    expert.frozen = true;

    // report on held-out windows (train windows if the clip is too short)
    let eval_windows = if held_out.is_empty() { &train_windows } else { &held_out };
    let mut pos = 0.0f64;
    let mut neg = 0.0f64;
    let mut count = 0usize;
    for &w0 in eval_windows {
        let frame_refs: Vec<&Image<S>> = (w0..w0 + config.window).map(|i| &frames[i]).collect();
        let i_emb = encode_image_window(&expert, &frame_refs)?;
        let feat_refs: Vec<&[S]> =
            (w0..w0 + config.window).map(|i| features[i].as_slice()).collect();
        let a_emb = encode_audio_window(&expert, &feat_refs)?;
        pos += cosine(&i_emb, &a_emb).unwrap_or(0.0);
        let shifted = (w0 + n_windows / 2) % n_windows;
        let neg_refs: Vec<&[S]> =
            (shifted..shifted + config.window).map(|i| features[i].as_slice()).collect();
        let n_emb = encode_audio_window(&expert, &neg_refs)?;
        neg += cosine(&i_emb, &n_emb).unwrap_or(0.0);
        count += 1;
    }
    let report = PretrainReport {
        mean_cos_positive: pos / count.max(1) as f64,
        mean_cos_negative: neg / count.max(1) as f64,
    };
    Ok((expert, report))
}

const CONFIDENCE_MAX_OFFSET: isize = 7;

/// Sync confidence of a clip: mean over sliding windows of
/// `cos at offset 0 - max cos over offsets +-1..+-7`. Higher is better.
pub fn sync_confidence<S: Scalar>(
    expert: &ExpertParams<S>,
    frames: &[Image<S>],
    features: &[Vec<S>],
) -> Result<f64> {
    let w = expert.config.window;
    let off = CONFIDENCE_MAX_OFFSET as usize;
    if frames.len() != features.len() {
        return Err(Error::Shape("frames and features must be aligned".into()));
    }
    if frames.len() < w + 2 * off {
        return Err(Error::Invalid(format!(
            "clip of {} frames is too short for window {} with offsets +-{}",
            frames.len(),
            w,
            off
        )));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for w0 in off..frames.len() - w - off + 1 {
        let frame_refs: Vec<&Image<S>> = (w0..w0 + w).map(|i| &frames[i]).collect();
        let i_emb = encode_image_window(expert, &frame_refs)?;
        let audio_cos = |start: usize| -> Result<f64> {
            let refs: Vec<&[S]> = (start..start + w).map(|i| features[i].as_slice()).collect();
            let a_emb = encode_audio_window(expert, &refs)?;
            cosine(&i_emb, &a_emb)
        };
        let c0 = audio_cos(w0)?;
        let mut best_off = f64::NEG_INFINITY;
        for o in 1..=off {
            best_off = best_off.max(audio_cos(w0 - o)?);
            best_off = best_off.max(audio_cos(w0 + o)?);
        }
        acc += c0 - best_off;
        count += 1;
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> SyncConfig {
        SyncConfig { window: 5, image_width: 8, image_height: 8, speech_dim: 4, embed_dim: 8 }
    }

    fn toy_corpus(n: usize, seed: u64) -> (Vec<Image<f64>>, Vec<Vec<f64>>) {
        // image brightness tracks audio amplitude: trivially separable
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut frames = Vec::new();
        let mut feats = Vec::new();
        for i in 0..n {
            let level = 0.5 + 0.45 * ((i as f64 * 0.7).sin());
            let mut img = Image::constant(8, 8, [level, level, level]);
            // mild texture so convs see structure
            for p in 0..64 {
                img.pixels[p * 3] = (img.pixels[p * 3] + 0.02 * ((p % 5) as f64)).min(1.0);
            }
            frames.push(img);
            let noise: f64 = rng.gen_range(-0.02..0.02);
            feats.push(vec![level + noise, level * 0.5, 1.0 - level, 0.1]);
        }
        (frames, feats)
    }

    #[test]
    fn sync_loss_eq6_cases() {
        // y = 1, i = a -> 0
        let v = vec![0.5f64, -0.25, 1.0];
        assert_abs_diff_eq!(sync_loss(&v, &v, true).unwrap(), 0.0, epsilon = 1e-12);
        // y = 0, cos = -0.3 -> 0 ; y = 0, cos = 0.5 -> 0.5
        let a = vec![1.0f64, 0.0];
        let neg = vec![-0.3f64, (1.0f64 - 0.09).sqrt()];
        assert_abs_diff_eq!(sync_loss(&a, &neg, false).unwrap(), 0.0, epsilon = 1e-12);
        let half = vec![0.5f64, (0.75f64).sqrt()];
        assert_abs_diff_eq!(sync_loss(&a, &half, false).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn sync_loss_zero_norm_rejected() {
        assert!(sync_loss(&[0.0f64, 0.0], &[1.0, 0.0], true).is_err());
    }

    #[test]
    fn sync_loss_scale_invariant() {
        let i = vec![0.3f64, -0.8, 0.5];
        let a = vec![0.1f64, 0.9, -0.2];
        let a_scaled: Vec<f64> = a.iter().map(|v| v * 7.5).collect();
        assert_abs_diff_eq!(
            sync_loss(&i, &a, true).unwrap(),
            sync_loss(&i, &a_scaled, true).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn encoders_deterministic() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let expert = ExpertParams::<f64>::init(cfg, &mut rng);
        let (frames, feats) = toy_corpus(5, 1);
        let refs: Vec<&Image<f64>> = frames.iter().collect();
        let e1 = encode_image_window(&expert, &refs).unwrap();
        let e2 = encode_image_window(&expert, &refs).unwrap();
        assert_eq!(e1, e2);
        let frefs: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
        let a1 = encode_audio_window(&expert, &frefs).unwrap();
        let a2 = encode_audio_window(&expert, &frefs).unwrap();
        assert_eq!(a1, a2);
    }

    #[test]
    fn zero_final_layer_zero_embedding() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut expert = ExpertParams::<f64>::init(cfg, &mut rng);
        let n = expert.image_params.len();
        expert.image_params[n - 2] = Tensor::zeros(expert.image_params[n - 2].shape());
        expert.image_params[n - 1] = Tensor::zeros(expert.image_params[n - 1].shape());
        let (frames, _) = toy_corpus(5, 3);
        let refs: Vec<&Image<f64>> = frames.iter().collect();
        let e = encode_image_window(&expert, &refs).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_size_mismatch_rejected() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let expert = ExpertParams::<f64>::init(cfg, &mut rng);
        let (frames, _) = toy_corpus(3, 5);
        let refs: Vec<&Image<f64>> = frames.iter().collect();
        assert!(encode_image_window(&expert, &refs).is_err());
    }

    #[test]
    fn pretrain_toy_corpus_separates() {
        let cfg = tiny_config();
        let (frames, feats) = toy_corpus(60, 7);
        let (expert, report) =
            pretrain_expert(&frames, &feats, cfg, 8, 11, true).unwrap();
        assert!(expert.frozen);
        assert!(report.margin() > 0.9, "toy margin {}", report.margin());
    }

    #[test]
    fn pretrain_determinism() {
        let cfg = tiny_config();
        let (frames, feats) = toy_corpus(30, 7);
        let run = || pretrain_expert(&frames, &feats, cfg, 2, 5, true).unwrap().0;
        let (a, b) = (run(), run());
        for (x, y) in a.image_params.iter().zip(&b.image_params) {
            assert_eq!(x, y);
        }
        for (x, y) in a.audio_params.iter().zip(&b.audio_params) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn pretrain_rejects_short_corpus() {
        let cfg = tiny_config();
        let (frames, feats) = toy_corpus(8, 7);
        assert!(pretrain_expert(&frames, &feats, cfg, 1, 1, true).is_err());
    }

    #[test]
    fn epoch_zero_reports_without_training() {
        let cfg = tiny_config();
        let (frames, feats) = toy_corpus(30, 7);
        let (expert, report) = pretrain_expert(&frames, &feats, cfg, 0, 1, true).unwrap();
        assert!(expert.frozen);
        // random-feature margin is reported, not asserted
        assert!(report.margin().is_finite());
    }

    #[test]
    fn sync_confidence_deterministic_and_bounded_on_shuffle() {
        let cfg = tiny_config();
        let (frames, feats) = toy_corpus(60, 7);
        let (expert, _) = pretrain_expert(&frames, &feats, cfg, 6, 3, true).unwrap();
        let c1 = sync_confidence(&expert, &frames, &feats).unwrap();
        let c2 = sync_confidence(&expert, &frames, &feats).unwrap();
        assert_eq!(c1, c2);
        // shuffled audio: confidence near zero
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut shuffled = feats.clone();
        shuffled.shuffle(&mut rng);
        let cs = sync_confidence(&expert, &frames, &shuffled).unwrap();
        assert!(cs < c1, "shuffled {cs} not below synced {c1}");
    }

    #[test]
    fn sync_confidence_rejects_short_clip() {
        let cfg = tiny_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let expert = ExpertParams::<f64>::init(cfg, &mut rng);
        let (frames, feats) = toy_corpus(10, 7);
        assert!(sync_confidence(&expert, &frames, &feats).is_err());
    }
}
