//! Composition stage: paste the warped canonical mouth into the observed
//! frame, optionally punch training holes, and refine with a residual
//! blending network.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::field::PixelBox;
use crate::geometry::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Where the mouth lands in the observed frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MouthPlacement {
    pub target: PixelBox,
    /// Left corner, right corner, top lip, bottom lip in observed pixels.
    pub keypoints: [[f64; 2]; 4],
}

impl MouthPlacement {
    pub fn validate(&self, frame_w: usize, frame_h: usize) -> Result<()> {
        let b = &self.target;
        if b.width == 0 || b.height == 0 || b.x0 + b.width > frame_w || b.y0 + b.height > frame_h {
            return Err(Error::Invalid(format!(
                "mouth box {b:?} outside {frame_w}x{frame_h} frame"
            )));
        }
        for (i, kp) in self.keypoints.iter().enumerate() {
            if !b.contains(kp[0], kp[1]) {
                return Err(Error::Invalid(format!(
                    "keypoint {i} at ({}, {}) outside mouth box {b:?}",
                    kp[0], kp[1]
                )));
            }
        }
        Ok(())
    }
}

/// Replace the placement box with valid mouth pixels; invalid pixels and
/// everything outside the box keep the frame's values.
pub fn paste_mouth<S: Scalar>(
    frame: &Image<S>,
    mouth: &Image<S>,
    placement: &MouthPlacement,
    validity: &[bool],
) -> Result<Image<S>> {
    placement.validate(frame.width, frame.height)?;
    let b = placement.target;
    if mouth.width != b.width || mouth.height != b.height {
        return Err(Error::Shape(format!(
            "mouth is {}x{}, placement box is {}x{}",
            mouth.width, mouth.height, b.width, b.height
        )));
    }
    if validity.len() != b.width * b.height {
        return Err(Error::Shape(format!(
            "validity has {} entries for a {}x{} box",
            validity.len(),
            b.width,
            b.height
        )));
    }
    let mut out = frame.clone();
    for y in 0..b.height {
        for x in 0..b.width {
            if validity[y * b.width + x] {
                out.set_pixel(b.x0 + x, b.y0 + y, mouth.pixel(x, y));
            }
        }
    }
    Ok(out)
}

/// Bounds for one training hole, as fractions of image area.
const HOLE_COUNT: (usize, usize) = (3, 8);
const HOLE_AREA: (f64, f64) = (0.02, 0.10);

/// With the given per-sample probability, scatter black rectangles over the
/// image and return the union mask (true = hole). Otherwise the image passes
/// through with an empty mask. Deterministic per seed.
pub fn hole_augment<S: Scalar>(
    image: &Image<S>,
    probability: f64,
    seed: u64,
) -> Result<(Image<S>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::Invalid(format!("hole probability {probability} outside [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (image.width, image.height);
    let mut mask = vec![false; w * h];
    if rng.gen::<f64>() >= probability {
        return Ok((image.clone(), mask));
    }
    let n = rng.gen_range(HOLE_COUNT.0..=HOLE_COUNT.1);
    for _ in 0..n {
        let area = rng.gen_range(HOLE_AREA.0..=HOLE_AREA.1) * (w * h) as f64;
        let aspect = rng.gen_range(0.5..2.0);
        let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
        let rh = ((area / aspect).sqrt().round() as usize).clamp(1, h);
        let x0 = rng.gen_range(0..=w - rw);
        let y0 = rng.gen_range(0..=h - rh);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                mask[y * w + x] = true;
            }
        }
    }
    let mut out = image.clone();
    for p in 0..w * h {
        if mask[p] {
            out.pixels[p * 3] = S::zero();
            out.pixels[p * 3 + 1] = S::zero();
            out.pixels[p * 3 + 2] = S::zero();
        }
    }
    Ok((out, mask))
}

/// Keep-mask (1 outside holes, 0 inside) as a [3,H,W] constant for applying
/// holes inside a graph by elementwise multiplication.
pub fn hole_keep_tensor<S: Scalar>(mask: &[bool], width: usize, height: usize) -> Tensor<S> {
    let mut data = vec![S::one(); 3 * height * width];
    for c in 0..3 {
        for (p, &hole) in mask.iter().enumerate() {
            if hole {
                data[c * height * width + p] = S::zero();
            }
        }
    }
    Tensor::new(vec![3, height, width], data).unwrap()
}

const BLEND_BASE: usize = 32;
const BLEND_DEPTH: usize = 4;
/// Input sizes must be divisible by this so the decoder mirrors the encoder.
pub const BLEND_SIZE_MULTIPLE: usize = 1 << BLEND_DEPTH;

/// Residual refinement network: 4 stride-2 convolutions down, 4
/// upsample+convolution stages back up, tanh-bounded 3-channel residual.
/// The final layer starts at zero, so composition begins as an identity.
#[derive(Debug, Clone)]
pub struct BlendParams<S: Scalar> {
    /// [w0,b0, .., w7,b7] with w7 the zero-initialized residual head.
    pub params: Vec<Tensor<S>>,
}

impl<S: Scalar> BlendParams<S> {
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::new();
        let mut push = |rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, zero: bool| {
            let scale = (2.0 / (c_in * 9) as f64).sqrt();
            let w: Vec<S> = (0..c_out * c_in * 9)
                .map(|_| {
                    if zero { S::zero() } else { S::from_f64(rng.gen_range(-1.0..1.0) * scale) }
                })
                .collect();
            params.push(Tensor::new(vec![c_out, c_in, 3, 3], w).unwrap());
            params.push(Tensor::zeros(&[c_out]));
        };
        push(rng, 3, BLEND_BASE, false);
        for _ in 1..BLEND_DEPTH {
            push(rng, BLEND_BASE, BLEND_BASE, false);
        }
        for _ in 1..BLEND_DEPTH {
            push(rng, BLEND_BASE, BLEND_BASE, false);
        }
        push(rng, BLEND_BASE, 3, true);
        BlendParams { params }
    }

    pub fn num_tensors(&self) -> usize {
        self.params.len()
    }
}

fn check_blend_size(w: usize, h: usize) -> Result<()> {
    if w % BLEND_SIZE_MULTIPLE != 0 || h % BLEND_SIZE_MULTIPLE != 0 || w == 0 || h == 0 {
        return Err(Error::Shape(format!(
            "blend input {w}x{h} must be a positive multiple of {BLEND_SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Blend forward over a [3,H,W] node; H and W must be multiples of 16.
/// Output = clamp(input + tanh(residual), 0, 1).
pub fn blend_graph<S: Scalar>(
    tape: &mut Tape<S>,
    params: &[NodeId],
    pasted: NodeId,
) -> Result<NodeId> {
    let shape = tape.value(pasted).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("blend input shape {shape:?}, expected [3,H,W]")));
    }
    check_blend_size(shape[2], shape[1])?;
    let mut h = pasted;
    for l in 0..BLEND_DEPTH {
        h = tape.conv2d(h, params[2 * l], Some(params[2 * l + 1]), 2, 1);
        h = tape.relu(h);
    }
    for l in BLEND_DEPTH..2 * BLEND_DEPTH {
        h = tape.upsample2x(h);
        h = tape.conv2d(h, params[2 * l], Some(params[2 * l + 1]), 1, 1);
        if l + 1 < 2 * BLEND_DEPTH {
            h = tape.relu(h);
        }
    }
    let residual = tape.tanh(h);
    let sum = tape.add(pasted, residual);
    Ok(tape.clamp_unit(sum))
}

/// Host-side blend over an image.
pub fn blend<S: Scalar>(params: &BlendParams<S>, pasted: &Image<S>) -> Result<Image<S>> {
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = params.params.iter().map(|t| tape.constant(t.clone())).collect();
    let input = tape.constant(image_chw(pasted));
    let out = blend_graph(&mut tape, &nodes, input)?;
    let data = tape.value(out).data();
    let (w, h) = (pasted.width, pasted.height);
    let mut pixels = vec![S::zero(); w * h * 3];
    for c in 0..3 {
        for p in 0..w * h {
            pixels[p * 3 + c] = data[c * w * h + p];
        }
    }
    let mut out_img = Image::new(w, h, pixels)?;
    out_img.mask = pasted.mask.clone();
    Ok(out_img)
}

/// Pack an image into a [3,H,W] tensor.
pub fn image_chw<S: Scalar>(img: &Image<S>) -> Tensor<S> {
    let (w, h) = (img.width, img.height);
    let mut data = vec![S::zero(); 3 * h * w];
    for c in 0..3 {
        for p in 0..h * w {
            data[c * h * w + p] = img.pixels[p * 3 + c];
        }
    }
    Tensor::new(vec![3, h, w], data).unwrap()
}

/// Unpack a [3,H,W] tensor into an image, clamping to [0,1].
pub fn chw_image<S: Scalar>(t: &Tensor<S>) -> Result<Image<S>> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!("expected [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut pixels = vec![S::zero(); w * h * 3];
    for c in 0..3 {
        for p in 0..h * w {
            pixels[p * 3 + c] = t.data()[c * h * w + p].max(S::zero()).min(S::one());
        }
    }
    Image::new(w, h, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(w: usize, h: usize) -> Image<f64> {
        let mut img = Image::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        img
    }

    fn placement(x0: usize, y0: usize, w: usize, h: usize) -> MouthPlacement {
        let cx = x0 as f64 + w as f64 / 2.0;
        let cy = y0 as f64 + h as f64 / 2.0;
        MouthPlacement {
            target: PixelBox { x0, y0, width: w, height: h },
            keypoints: [
                [x0 as f64 + 0.5, cy],
                [(x0 + w) as f64 - 0.51, cy],
                [cx, y0 as f64 + 0.5],
                [cx, (y0 + h) as f64 - 0.51],
            ],
        }
    }

    #[test]
    fn paste_identity_when_mouth_matches() {
        let frame = checkerboard(16, 12);
        let p = placement(4, 3, 6, 4);
        let mouth = frame.crop(4, 3, 6, 4);
        let out = paste_mouth(&frame, &mouth, &p, &vec![true; 24]).unwrap();
        assert_eq!(out.pixels, frame.pixels);
    }

    #[test]
    fn paste_all_invalid_is_noop() {
        let frame = Image::constant(16, 12, [0.5, 0.5, 0.5]);
        let p = placement(4, 3, 6, 4);
        let mouth = Image::constant(6, 4, [1.0, 0.0, 0.0]);
        let out = paste_mouth(&frame, &mouth, &p, &vec![false; 24]).unwrap();
        assert_eq!(out.pixels, frame.pixels);
    }

    #[test]
    fn paste_checkerboard_copies_box_exactly() {
        let frame = Image::constant(20, 20, [0.3, 0.3, 0.3]);
        let p = placement(5, 7, 8, 6);
        let mouth = checkerboard(8, 6);
        let out = paste_mouth(&frame, &mouth, &p, &vec![true; 48]).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                let expect = if p.target.contains(x as f64 + 0.01, y as f64 + 0.01) {
                    mouth.pixel(x - 5, y - 7)
                } else {
                    frame.pixel(x, y)
                };
                assert_eq!(out.pixel(x, y), expect, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn paste_out_of_bounds_rejected() {
        let frame = Image::zeros(10, 10);
        let p = placement(6, 6, 6, 6);
        let mouth = Image::zeros(6, 6);
        assert!(paste_mouth(&frame, &mouth, &p, &vec![true; 36]).is_err());
    }

    #[test]
    fn keypoint_outside_box_rejected() {
        let mut p = placement(2, 2, 4, 4);
        p.keypoints[0] = [0.0, 0.0];
        assert!(p.validate(10, 10).is_err());
    }

    #[test]
    fn holes_probability_zero_is_identity() {
        let img = Image::<f64>::constant(16, 16, [0.7, 0.2, 0.9]);
        let (out, mask) = hole_augment(&img, 0.0, 42).unwrap();
        assert_eq!(out.pixels, img.pixels);
        assert!(mask.iter().all(|&m| !m));
    }

    #[test]
    fn holes_seeded_determinism() {
        let img = Image::<f64>::constant(32, 32, [0.5, 0.5, 0.5]);
        let (a, ma) = hole_augment(&img, 1.0, 7).unwrap();
        let (b, mb) = hole_augment(&img, 1.0, 7).unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(ma, mb);
        assert!(ma.iter().any(|&m| m));
    }

    #[test]
    fn holes_monte_carlo_fraction_in_bounds() {
        let img = Image::<f64>::constant(32, 32, [0.5, 0.5, 0.5]);
        let mut total = 0.0;
        let n = 1000;
        for s in 0..n {
            let (_, mask) = hole_augment(&img, 1.0, s).unwrap();
            let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
            // union of 3..8 rects, each 2-10% of area
            assert!(frac >= HOLE_AREA.0 * 0.5 && frac <= HOLE_AREA.1 * HOLE_COUNT.1 as f64);
            total += frac;
        }
        let mean = total / n as f64;
        assert!((0.06..=0.5).contains(&mean), "mean hole fraction {mean}");
    }

    #[test]
    fn blend_zero_head_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BlendParams::<f64>::init(&mut rng);
        let img = checkerboard(16, 16);
        let out = blend(&params, &img).unwrap();
        for (a, b) in out.pixels.iter().zip(&img.pixels) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blend_output_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = BlendParams::<f64>::init(&mut rng);
        // randomize the head so the residual is nonzero
        let n = params.params.len();
        let shape = params.params[n - 2].shape().to_vec();
        let w: Vec<f64> = (0..shape.iter().product()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        params.params[n - 2] = Tensor::new(shape, w).unwrap();
        let img = checkerboard(16, 16);
        let out = blend(&params, &img).unwrap();
        assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(out.pixels.iter().zip(&img.pixels).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn blend_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = BlendParams::<f64>::init(&mut rng);
        let img = checkerboard(32, 16);
        let a = blend(&params, &img).unwrap();
        let b = blend(&params, &img).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn blend_rejects_unaligned_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = BlendParams::<f64>::init(&mut rng);
        let img = Image::zeros(20, 16);
        assert!(blend(&params, &img).is_err());
    }

    #[test]
    fn chw_round_trip() {
        let img = checkerboard(8, 6);
        let back = chw_image(&image_chw(&img)).unwrap();
        assert_eq!(back.pixels, img.pixels);
    }
}
