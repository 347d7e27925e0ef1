//! Training objectives: masked L2 reconstruction, a frozen random-feature
//! perceptual proxy, the photometric depth loss, and their weighted sum.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of the overall objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub mouth: f64,
    pub whole: f64,
    pub depth: f64,
    pub sync: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mouth: 1.0, whole: 1.0, depth: 0.5, sync: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.mouth, self.whole, self.depth, self.sync];
        if all.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be nonnegative and finite".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Root mean squared difference over masked pixels.
pub fn l2_image<S: Scalar>(a: &Image<S>, b: &Image<S>, mask: Option<&[bool]>) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Shape("l2_image: image dimensions differ".into()));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for i in 0..a.width * a.height {
        if mask.map_or(true, |m| m[i]) {
            for c in 0..3 {
                let d = a.pixels[i * 3 + c].as_f64() - b.pixels[i * 3 + c].as_f64();
                acc += d * d;
            }
            count += 3;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("l2_image: empty mask".into()));
    }
    Ok((acc / count as f64).sqrt())
}

/// Graph version of [`l2_image`]: `pred` and `target` are [N,3]; `mask`
/// holds per-row 0/1 weights with `count` positive rows. A tiny epsilon
/// under the square root keeps the gradient finite at zero loss.
pub fn l2_graph<S: Scalar>(
    tape: &mut Tape<S>,
    pred: NodeId,
    target: NodeId,
    mask: Option<(NodeId, usize)>,
) -> NodeId {
    let diff = tape.sub(pred, target);
    let sq = tape.mul(diff, diff);
    let (masked, count) = match mask {
        Some((m, count)) => (tape.mul(sq, m), count),
        None => {
            let n = tape.value(sq).shape()[0];
            (sq, n)
        }
    };
    let total = tape.sum(masked);
    let mean = tape.affine(total, S::from_f64(1.0 / (3 * count) as f64), S::from_f64(1e-12));
    tape.sqrt(mean)
}

/// Configuration of the random-feature perceptual proxy.
#[derive(Debug, Clone, Copy)]
struct ProxyLayer {
    c_in: usize,
    c_out: usize,
}

const PROXY_LAYERS: [ProxyLayer; 3] = [
    ProxyLayer { c_in: 3, c_out: 8 },
    ProxyLayer { c_in: 8, c_out: 16 },
    ProxyLayer { c_in: 16, c_out: 16 },
];

/// A fixed, seeded, randomly-initialized 3-layer convolutional feature
/// extractor, frozen after generation. Feature-space squared distance
/// stands in for a learned perceptual loss.
#[derive(Debug, Clone)]
pub struct PerceptualProxy<S: Scalar> {
    pub params: Vec<Tensor<S>>,
    pub seed: u64,
}

impl<S: Scalar> PerceptualProxy<S> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f7879); // domain-separated
        let mut params = Vec::new();
        for layer in PROXY_LAYERS {
            let fan_in = layer.c_in * 9;
            let scale = (2.0 / fan_in as f64).sqrt();
            let w: Vec<S> = (0..layer.c_out * layer.c_in * 9)
                .map(|_| S::from_f64(rng.gen_range(-1.0..1.0) * scale))
                .collect();
            params.push(Tensor::new(vec![layer.c_out, layer.c_in, 3, 3], w).unwrap());
            params.push(Tensor::zeros(&[layer.c_out]));
        }
        PerceptualProxy { params, seed }
    }

    /// Feature stack of an image node in [C,H,W] layout.
    pub fn features_graph(&self, tape: &mut Tape<S>, img_chw: NodeId) -> NodeId {
        let mut h = img_chw;
        for (l, _) in PROXY_LAYERS.iter().enumerate() {
            let w = tape.constant(self.params[2 * l].clone());
            let b = tape.constant(self.params[2 * l + 1].clone());
            h = tape.conv2d(h, w, Some(b), 2, 1);
            if l + 1 < PROXY_LAYERS.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Mean squared feature distance between an image node and a constant
    /// target, both [C,H,W].
    pub fn distance_graph(&self, tape: &mut Tape<S>, a: NodeId, b: NodeId) -> NodeId {
        let fa = self.features_graph(tape, a);
        let fb = self.features_graph(tape, b);
        let diff = tape.sub(fa, fb);
        let sq = tape.mul(diff, diff);
        tape.mean(sq)
    }

    /// Host-side distance between two images.
    pub fn distance(&self, a: &Image<S>, b: &Image<S>) -> Result<f64> {
        if (a.width, a.height) != (b.width, b.height) {
            return Err(Error::Shape("perceptual_proxy: image dimensions differ".into()));
        }
        if a.width < 16 || a.height < 16 {
            return Err(Error::Invalid("perceptual_proxy: images must be at least 16x16".into()));
        }
        let mut tape = Tape::new();
        let an = image_chw_const(&mut tape, a);
        let bn = image_chw_const(&mut tape, b);
        let d = self.distance_graph(&mut tape, an, bn);
        Ok(tape.value(d).item().as_f64())
    }
}

/// Load an image into a tape as a [3,H,W] constant.
pub fn image_chw_const<S: Scalar>(tape: &mut Tape<S>, img: &Image<S>) -> NodeId {
    let (w, h) = (img.width, img.height);
    let mut data = vec![S::zero(); 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = img.pixels[p * 3 + c];
        }
    }
    tape.constant(Tensor::new(vec![3, h, w], data).unwrap())
}

/// Apply a pixel mask to an image (zero outside), for mask-aware perceptual
/// comparison.
fn masked_copy<S: Scalar>(img: &Image<S>, mask: &[bool]) -> Image<S> {
    let mut out = img.clone();
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            for c in 0..3 {
                out.pixels[i * 3 + c] = S::zero();
            }
        }
    }
    out.mask = None;
    out
}

/// Canonical mouth reconstruction loss: perceptual proxy + masked L2
/// between the rendered mouth and the warped ground-truth mouth.
pub fn loss_m<S: Scalar>(
    proxy: &PerceptualProxy<S>,
    pred_mouth: &Image<S>,
    warped_gt_mouth: &Image<S>,
    mask: &[bool],
) -> Result<f64> {
    let a = masked_copy(pred_mouth, mask);
    let b = masked_copy(warped_gt_mouth, mask);
    Ok(proxy.distance(&a, &b)? + l2_image(pred_mouth, warped_gt_mouth, Some(mask))?)
}

/// Whole-frame reconstruction loss: perceptual proxy + L2 over the frame.
pub fn loss_w<S: Scalar>(
    proxy: &PerceptualProxy<S>,
    pred_frame: &Image<S>,
    gt_frame: &Image<S>,
) -> Result<f64> {
    Ok(proxy.distance(pred_frame, gt_frame)? + l2_image(pred_frame, gt_frame, None)?)
}

/// Photometric depth loss: masked L2 between the depth-warped image and the
/// canonical ground truth.
pub fn loss_d<S: Scalar>(
    warped_pred: &Image<S>,
    canonical_gt: &Image<S>,
    mask: &[bool],
) -> Result<f64> {
    l2_image(warped_pred, canonical_gt, Some(mask))
}

/// Weighted sum of the four loss components.
pub fn total_loss(parts: [f64; 4], w: &LossWeights) -> f64 {
    w.mouth * parts[0] + w.whole * parts[1] + w.depth * parts[2] + w.sync * parts[3]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn l2_identical_is_zero() {
        let a = Image::<f64>::constant(4, 4, [0.2, 0.4, 0.6]);
        assert_eq!(l2_image(&a, &a, None).unwrap(), 0.0);
    }

    #[test]
    fn l2_zeros_vs_ones_is_one() {
        let a = Image::<f64>::zeros(4, 4);
        let b = Image::<f64>::constant(4, 4, [1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(l2_image(&a, &b, None).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn l2_matches_hand_computation_2x2() {
        // hand-computed RMSE over a 2x2 image
        let a = Image::<f64>::new(2, 2, vec![
            0.1, 0.2, 0.3, 0.4, 0.5, 0.6,
            0.7, 0.8, 0.9, 1.0, 0.0, 0.5,
        ])
        .unwrap();
        let b = Image::<f64>::new(2, 2, vec![
            0.2, 0.2, 0.1, 0.4, 0.7, 0.6,
            0.5, 0.8, 0.9, 0.8, 0.1, 0.5,
        ])
        .unwrap();
        // squared diffs: 0.01, 0, 0.04, 0, 0.04, 0, 0.04, 0, 0, 0.04, 0.01, 0
        let expect = (0.18f64 / 12.0).sqrt();
        assert_abs_diff_eq!(l2_image(&a, &b, None).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn l2_empty_mask_is_error() {
        let a = Image::<f64>::zeros(2, 2);
        let mask = vec![false; 4];
        assert!(l2_image(&a, &a, Some(&mask)).is_err());
    }

    #[test]
    fn proxy_zero_on_identical_and_symmetric() {
        let proxy = PerceptualProxy::<f64>::new(1);
        let mut a = Image::<f64>::zeros(16, 16);
        let mut b = Image::<f64>::zeros(16, 16);
        for i in 0..256 {
            a.pixels[i * 3] = (i % 13) as f64 / 13.0;
            b.pixels[i * 3 + 1] = (i % 7) as f64 / 7.0;
        }
        assert_eq!(proxy.distance(&a, &a).unwrap(), 0.0);
        let ab = proxy.distance(&a, &b).unwrap();
        let ba = proxy.distance(&b, &a).unwrap();
        assert_abs_diff_eq!(ab, ba, epsilon = 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn proxy_rejects_undersized() {
        let proxy = PerceptualProxy::<f64>::new(1);
        let a = Image::<f64>::zeros(8, 8);
        assert!(proxy.distance(&a, &a).is_err());
    }

    #[test]
    fn proxy_penalizes_blur() {
        // a blurred rendering of a textured image is farther from the sharp
        // original than the sharp image is from itself
        let proxy = PerceptualProxy::<f64>::new(3);
        let mut sharp = Image::<f64>::zeros(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let v = if (x / 2 + y / 2) % 2 == 0 { 0.9 } else { 0.1 };
                sharp.set_pixel(x, y, [v, v, v]);
            }
        }
        // 3x3 box blur
        let mut blurred = Image::<f64>::zeros(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                let mut acc = [0.0f64; 3];
                let mut n = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let (sx, sy) = (x as i32 + dx, y as i32 + dy);
                        if sx >= 0 && sx < 16 && sy >= 0 && sy < 16 {
                            let p = sharp.pixel(sx as usize, sy as usize);
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                            n += 1.0;
                        }
                    }
                }
                blurred.set_pixel(x, y, [acc[0] / n, acc[1] / n, acc[2] / n]);
            }
        }
        let d_blur = proxy.distance(&blurred, &sharp).unwrap();
        let d_sharp = proxy.distance(&sharp, &sharp).unwrap();
        assert!(d_blur > d_sharp, "blur {d_blur} vs sharp {d_sharp}");
    }

    #[test]
    fn loss_m_is_compositional() {
        let proxy = PerceptualProxy::<f64>::new(5);
        let mut a = Image::<f64>::zeros(16, 16);
        let mut b = Image::<f64>::zeros(16, 16);
        for i in 0..256 {
            a.pixels[i * 3 + 2] = ((i * 3) % 17) as f64 / 17.0;
            b.pixels[i * 3 + 2] = ((i * 5) % 19) as f64 / 19.0;
        }
        let mask = vec![true; 256];
        let combined = loss_m(&proxy, &a, &b, &mask).unwrap();
        let separate = proxy.distance(&a, &b).unwrap() + l2_image(&a, &b, Some(&mask)).unwrap();
        assert_abs_diff_eq!(combined, separate, epsilon = 1e-12);
        assert!(combined >= 0.0);
        assert_eq!(loss_m(&proxy, &a, &a, &mask).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights { mouth: 1.0, whole: 1.0, depth: 1.0, sync: 1.0 };
        assert_abs_diff_eq!(total_loss([0.1, 0.2, 0.3, 0.4], &w), 1.0, epsilon = 1e-12);
        let w2 = LossWeights { mouth: 2.0, whole: 1.0, depth: 0.5, sync: 0.25 };
        assert_abs_diff_eq!(total_loss([1.0; 4], &w2), 3.75, epsilon = 1e-12);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights { mouth: 0.0, whole: 0.0, depth: 0.0, sync: 0.0 }.validate().is_err());
        assert!(LossWeights { mouth: -1.0, whole: 1.0, depth: 0.0, sync: 0.0 }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
