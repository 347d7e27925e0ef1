//! Speech-driven implicit appearance model: a coordinate MLP mapping
//! (position, speech feature, timestamp) to canonical-view lip color,
//! with continuous rectangle sampling for sub-pixel supervision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture of the implicit field network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    /// Frequency bands for the 2D coordinate encoding.
    pub coord_bands: usize,
    /// Frequency bands for the timestamp encoding.
    pub time_bands: usize,
    pub speech_dim: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            hidden_layers: 6,
            hidden_units: 128,
            coord_bands: 10,
            time_bands: 4,
            speech_dim: 64,
        }
    }
}

impl FieldConfig {
    pub fn input_dim(&self) -> usize {
        2 * (1 + 2 * self.coord_bands) + self.speech_dim + (1 + 2 * self.time_bands)
    }
}

/// Weights of the field MLP: ReLU hidden layers, sigmoid-bounded RGB output.
/// `params` holds [W0, b0, W1, b1, ...]; the final layer is zero-initialized
/// so an untrained field renders uniform 0.5 gray.
#[derive(Debug, Clone)]
pub struct FieldParams<S: Scalar> {
    pub config: FieldConfig,
    pub params: Vec<Tensor<S>>,
}

impl<S: Scalar> FieldParams<S> {
    pub fn init(config: FieldConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut dims = vec![config.input_dim()];
        for _ in 0..config.hidden_layers {
            dims.push(config.hidden_units);
        }
        dims.push(3);
        let mut params = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let scale = if last { 0.0 } else { (2.0 / fan_in as f64).sqrt() };
            let w: Vec<S> = (0..fan_in * fan_out)
                .map(|_| S::from_f64(rng.gen_range(-1.0..1.0) * scale))
                .collect();
            params.push(Tensor::new(vec![fan_in, fan_out], w).unwrap());
            params.push(Tensor::zeros(&[fan_out]));
        }
        FieldParams { config, params }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Register as trainable parameters with consecutive ids from `base`.
    pub fn register(&self, tape: &mut Tape<S>, base: usize) -> Vec<NodeId> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(ParamId(base + i), t.clone()))
            .collect()
    }

    /// Register as frozen constants.
    pub fn register_const(&self, tape: &mut Tape<S>) -> Vec<NodeId> {
        self.params.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

/// Sinusoidal positional encoding:
/// `[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^{L-1} pi x), cos(2^{L-1} pi x)]`
/// applied per component (raw components first, then per band).
pub fn positional_encode<S: Scalar>(x: &[S], bands: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len() * (1 + 2 * bands));
    out.extend_from_slice(x);
    for k in 0..bands {
        let freq = S::from_f64(std::f64::consts::PI * (1u64 << k) as f64);
        for &v in x {
            out.push((freq * v).sin());
        }
        for &v in x {
            out.push((freq * v).cos());
        }
    }
    out
}

/// Graph version of [`positional_encode`] over a [N,D] node.
pub fn positional_encode_graph<S: Scalar>(
    tape: &mut Tape<S>,
    x: NodeId,
    bands: usize,
) -> NodeId {
    let mut parts = vec![x];
    for k in 0..bands {
        let freq = S::from_f64(std::f64::consts::PI * (1u64 << k) as f64);
        let scaled = tape.affine(x, freq, S::zero());
        parts.push(tape.sin(scaled));
        parts.push(tape.cos(scaled));
    }
    tape.concat_cols(&parts)
}

/// Run the field MLP over a batch. `coords` is [N,2] in the normalized
/// [-1,1] canonical range, `speech` is [N,speech_dim], `time` is [N,1]
/// normalized to [0,1]. Returns [N,3] RGB in (0,1).
pub fn field_graph<S: Scalar>(
    tape: &mut Tape<S>,
    params: &[NodeId],
    config: &FieldConfig,
    coords: NodeId,
    speech: NodeId,
    time: NodeId,
) -> NodeId {
    let enc_xy = positional_encode_graph(tape, coords, config.coord_bands);
    let enc_t = positional_encode_graph(tape, time, config.time_bands);
    let mut h = tape.concat_cols(&[enc_xy, speech, enc_t]);
    let n_layers = params.len() / 2;
    for l in 0..n_layers {
        h = tape.matmul(h, params[2 * l]);
        h = tape.add_bias(h, params[2 * l + 1]);
        if l + 1 < n_layers {
            h = tape.relu(h);
        } else {
            h = tape.sigmoid(h);
        }
    }
    h
}

/// Evaluate the field at a single point (deterministic, no gradients).
pub fn eval_field<S: Scalar>(
    params: &FieldParams<S>,
    x: [S; 2],
    speech: &[S],
    t: S,
) -> [S; 3] {
    let out = eval_field_batch(params, &[x], speech, t);
    out[0]
}

/// Evaluate the field at many points sharing one speech feature and time.
pub fn eval_field_batch<S: Scalar>(
    params: &FieldParams<S>,
    coords: &[[S; 2]],
    speech: &[S],
    t: S,
) -> Vec<[S; 3]> {
    let n = coords.len();
    let mut tape = Tape::new();
    let nodes = params.register_const(&mut tape);
    let flat: Vec<S> = coords.iter().flat_map(|c| c.iter().copied()).collect();
    let c = tape.constant(Tensor::new(vec![n, 2], flat).unwrap());
    let mut sp = Vec::with_capacity(n * speech.len());
    for _ in 0..n {
        sp.extend_from_slice(speech);
    }
    let a = tape.constant(Tensor::new(vec![n, speech.len()], sp).unwrap());
    let tt = tape.constant(Tensor::new(vec![n, 1], vec![t; n]).unwrap());
    let out = field_graph(&mut tape, &nodes, &params.config, c, a, tt);
    let d = tape.value(out).data();
    (0..n).map(|i| [d[i * 3], d[i * 3 + 1], d[i * 3 + 2]]).collect()
}

/// Axis-aligned sampling rectangle in normalized coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Rect<S: Scalar> {
    pub x0: S,
    pub y0: S,
    pub x1: S,
    pub y1: S,
}

impl<S: Scalar> Rect<S> {
    pub fn area(&self) -> S {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Corners in {00, 10, 01, 11} order: (x0,y0), (x1,y0), (x0,y1), (x1,y1).
    pub fn corners(&self) -> [[S; 2]; 4] {
        [
            [self.x0, self.y0],
            [self.x1, self.y0],
            [self.x0, self.y1],
            [self.x1, self.y1],
        ]
    }

    /// Bilinear weights for a query inside the rectangle: each corner is
    /// weighted by the area of the sub-rectangle diagonally opposite it,
    /// normalized by the total area.
    pub fn corner_weights(&self, xc: [S; 2]) -> Result<[S; 4]> {
        let s = self.area();
        if s <= S::zero() {
            return Err(Error::Invalid("sampling rectangle must have positive area".into()));
        }
        let (dx0, dx1) = (xc[0] - self.x0, self.x1 - xc[0]);
        let (dy0, dy1) = (xc[1] - self.y0, self.y1 - xc[1]);
        Ok([dx1 * dy1 / s, dx0 * dy1 / s, dx1 * dy0 / s, dx0 * dy0 / s])
    }
}

/// Weighted corner average over a sampled rectangle (continuous sampling).
pub fn sample_continuous<S: Scalar>(
    params: &FieldParams<S>,
    xc: [S; 2],
    rect: Rect<S>,
    speech: &[S],
    t: S,
) -> Result<[S; 3]> {
    let weights = rect.corner_weights(xc)?;
    let outputs = eval_field_batch(params, &rect.corners(), speech, t);
    let mut rgb = [S::zero(); 3];
    for (w, o) in weights.iter().zip(&outputs) {
        for c in 0..3 {
            rgb[c] += *w * o[c];
        }
    }
    Ok(rgb)
}

/// Pixel box of the canonical mouth region.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64
            && x < (self.x0 + self.width) as f64
            && y >= self.y0 as f64
            && y < (self.y0 + self.height) as f64
    }

    /// Grow by a fraction of the box size on every side, clamped to a frame.
    pub fn dilated(&self, fraction: f64, frame_w: usize, frame_h: usize) -> PixelBox {
        let dx = (self.width as f64 * fraction).round() as usize;
        let dy = (self.height as f64 * fraction).round() as usize;
        let x0 = self.x0.saturating_sub(dx);
        let y0 = self.y0.saturating_sub(dy);
        let x1 = (self.x0 + self.width + dx).min(frame_w);
        let y1 = (self.y0 + self.height + dy).min(frame_h);
        PixelBox { x0, y0, width: x1 - x0, height: y1 - y0 }
    }

    /// Normalize a pixel coordinate inside this box to [-1,1].
    pub fn normalize(&self, x: f64, y: f64) -> [f64; 2] {
        let nx = if self.width > 1 {
            2.0 * (x - self.x0 as f64) / (self.width - 1) as f64 - 1.0
        } else {
            0.0
        };
        let ny = if self.height > 1 {
            2.0 * (y - self.y0 as f64) / (self.height - 1) as f64 - 1.0
        } else {
            0.0
        };
        [nx, ny]
    }
}

/// A prepared batch of field inputs for one rendered region: in train mode
/// every pixel carries a random rectangle (4 corner rows per pixel,
/// corner-major layout); in eval mode one row per pixel at its center.
pub struct RenderBatch<S: Scalar> {
    pub n_pixels: usize,
    /// [rows, 2] normalized corner/center coordinates.
    pub coords: Tensor<S>,
    /// [rows, 1] corner weights (all ones in eval mode).
    pub weights: Option<Tensor<S>>,
}

/// Build the render batch for all pixels of `region` (row-major order).
/// In train mode corner offsets are drawn uniformly from (0, r_max] pixels.
pub fn build_render_batch<S: Scalar>(
    region: PixelBox,
    train_mode: bool,
    r_max: f64,
    rng: &mut ChaCha8Rng,
) -> RenderBatch<S> {
    let n = region.width * region.height;
    if !train_mode {
        let mut coords = Vec::with_capacity(n * 2);
        for y in 0..region.height {
            for x in 0..region.width {
                let p = region.normalize((region.x0 + x) as f64, (region.y0 + y) as f64);
                coords.push(S::from_f64(p[0]));
                coords.push(S::from_f64(p[1]));
            }
        }
        return RenderBatch {
            n_pixels: n,
            coords: Tensor::new(vec![n, 2], coords).unwrap(),
            weights: None,
        };
    }
    // corner-major: all corner-0 rows, then corner-1, corner-2, corner-3
    let mut corners = vec![[0.0f64; 2]; 4 * n];
    let mut weights = vec![S::zero(); 4 * n];
    for y in 0..region.height {
        for x in 0..region.width {
            let i = y * region.width + x;
            let px = (region.x0 + x) as f64;
            let py = (region.y0 + y) as f64;
            // uniform in (0, r_max]
            let off = |rng: &mut ChaCha8Rng| r_max * (1.0 - rng.gen::<f64>());
            let rect = Rect::<f64> {
                x0: px - off(rng),
                y0: py - off(rng),
                x1: px + off(rng),
                y1: py + off(rng),
            };
            let w = rect.corner_weights([px, py]).expect("positive offsets give positive area");
            let cs = rect.corners();
            for c in 0..4 {
                corners[c * n + i] = [
                    region.normalize(cs[c][0], cs[c][1])[0],
                    region.normalize(cs[c][0], cs[c][1])[1],
                ];
                weights[c * n + i] = S::from_f64(w[c]);
            }
        }
    }
    let flat: Vec<S> = corners.iter().flat_map(|c| c.iter().map(|&v| S::from_f64(v))).collect();
    RenderBatch {
        n_pixels: n,
        coords: Tensor::new(vec![4 * n, 2], flat).unwrap(),
        weights: Some(Tensor::new(vec![4 * n, 1], weights).unwrap()),
    }
}

/// Render a batch through the field on an existing tape, combining corner
/// evaluations by their rectangle weights in train mode. Returns [N,3].
pub fn render_graph<S: Scalar>(
    tape: &mut Tape<S>,
    params: &[NodeId],
    config: &FieldConfig,
    batch: &RenderBatch<S>,
    speech: &[S],
    t: S,
) -> NodeId {
    let rows = batch.coords.shape()[0];
    let coords = tape.constant(batch.coords.clone());
    let mut sp = Vec::with_capacity(rows * speech.len());
    for _ in 0..rows {
        sp.extend_from_slice(speech);
    }
    let a = tape.constant(Tensor::new(vec![rows, speech.len()], sp).unwrap());
    let tt = tape.constant(Tensor::new(vec![rows, 1], vec![t; rows]).unwrap());
    let out = field_graph(tape, params, config, coords, a, tt);
    match &batch.weights {
        None => out,
        Some(w) => {
            let wn = tape.constant(w.clone());
            let weighted = tape.mul(out, wn);
            let n = batch.n_pixels;
            let mut acc = tape.slice_rows(weighted, 0, n);
            for c in 1..4 {
                let part = tape.slice_rows(weighted, c * n, n);
                acc = tape.add(acc, part);
            }
            acc
        }
    }
}

/// Render the canonical mouth region to an image. In train mode each pixel
/// is the continuous-rectangle sample (seeded); in eval mode the field is
/// evaluated at exact pixel centers.
pub fn render_canonical_mouth<S: Scalar>(
    params: &FieldParams<S>,
    region: PixelBox,
    speech: &[S],
    t: S,
    train_mode: bool,
    r_max: f64,
    rng: &mut ChaCha8Rng,
) -> Image<S> {
    let batch = build_render_batch::<S>(region, train_mode, r_max, rng);
    let mut tape = Tape::new();
    let nodes = params.register_const(&mut tape);
    let out = render_graph(&mut tape, &nodes, &params.config, &batch, speech, t);
    let d = tape.value(out).data();
    let mut img = Image::zeros(region.width, region.height);
    for i in 0..batch.n_pixels {
        let rgb = [
            d[i * 3].max(S::zero()).min(S::one()),
            d[i * 3 + 1].max(S::zero()).min(S::one()),
            d[i * 3 + 2].max(S::zero()).min(S::one()),
        ];
        img.set_pixel(i % region.width, i / region.width, rgb);
    }
    img
}
