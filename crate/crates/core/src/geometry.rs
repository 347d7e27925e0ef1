//! Explicit geometric mapping between canonical and observed spaces:
//! pose algebra, dense correspondence, differentiable backward warping,
//! z-buffered forward warping, and depth-map completion.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Behind-camera cutoff for projected depths.
pub const EPS_Z: f64 = 1e-6;

/// Rigid head/camera transform: rotation + translation, bottom row [0,0,0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Pose<S: Scalar> {
    m: [[S; 4]; 4],
}

impl<S: Scalar> Pose<S> {
    /// Validate the rigid-transform invariants and wrap the matrix.
    pub fn new(m: [[S; 4]; 4]) -> Result<Self> {
        let mf: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect();
        let bottom = [0.0, 0.0, 0.0, 1.0];
        for j in 0..4 {
            if mf[3][j] != bottom[j] {
                return Err(Error::Invalid("pose bottom row must be [0,0,0,1]".into()));
            }
        }
        // ||R^T R - I||_F < 1e-6 and det(R) > 0
        let mut frob = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += mf[k][i] * mf[k][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                frob += (dot - target).powi(2);
            }
        }
        if frob.sqrt() >= 1e-6 {
            return Err(Error::Invalid(format!(
                "pose rotation block is not orthonormal (||R^T R - I||_F = {:.2e})",
                frob.sqrt()
            )));
        }
        let det = mf[0][0] * (mf[1][1] * mf[2][2] - mf[1][2] * mf[2][1])
            - mf[0][1] * (mf[1][0] * mf[2][2] - mf[1][2] * mf[2][0])
            + mf[0][2] * (mf[1][0] * mf[2][1] - mf[1][1] * mf[2][0]);
        if det <= 0.0 {
            return Err(Error::Invalid("pose rotation block must have det > 0".into()));
        }
        Ok(Pose { m })
    }

    pub fn identity() -> Self {
        let mut m = [[S::zero(); 4]; 4];
        for i in 0..4 {
            m[i][i] = S::one();
        }
        Pose { m }
    }

    pub fn translation(t: [S; 3]) -> Self {
        let mut p = Self::identity();
        for i in 0..3 {
            p.m[i][3] = t[i];
        }
        p
    }

    /// Rotation about x, y, z (applied in that order) plus translation.
    pub fn from_euler(rx: f64, ry: f64, rz: f64, t: [f64; 3]) -> Self {
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let rxm = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let rym = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rzm = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let mul3 = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| {
            let mut c = [[0.0f64; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for k in 0..3 {
                        c[i][j] += a[i][k] * b[k][j];
                    }
                }
            }
            c
        };
        let r = mul3(&rzm, &mul3(&rym, &rxm));
        let mut m = [[S::zero(); 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = S::from_f64(r[i][j]);
            }
            m[i][3] = S::from_f64(t[i]);
        }
        m[3][3] = S::one();
        Pose { m }
    }

    pub fn matrix(&self) -> &[[S; 4]; 4] {
        &self.m
    }

    pub fn matrix_f64(&self) -> [[f64; 4]; 4] {
        let mut out = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = self.m[i][j].as_f64();
            }
        }
        out
    }

    pub fn from_matrix_f64(m: [[f64; 4]; 4]) -> Result<Self> {
        let mut out = [[S::zero(); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                out[i][j] = S::from_f64(m[i][j]);
            }
        }
        Pose::new(out)
    }

    /// Row-major 16 elements, for serialization.
    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0f64; 16];
        for i in 0..4 {
            for j in 0..4 {
                out[i * 4 + j] = self.m[i][j].as_f64();
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::Invalid("pose needs 16 row-major values".into()));
        }
        let mut m = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = v[i * 4 + j];
            }
        }
        Self::from_matrix_f64(m)
    }

    /// Apply to a 3D point.
    pub fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        let m = self.matrix_f64();
        let mut out = [0.0f64; 3];
        for i in 0..3 {
            out[i] = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    pub fn compose(&self, other: &Pose<S>) -> Pose<S> {
        let a = self.matrix_f64();
        let b = other.matrix_f64();
        let mut c = [[0.0f64; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        let mut m = [[S::zero(); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = S::from_f64(c[i][j]);
            }
        }
        // renormalize the bottom row against accumulated rounding
        m[3] = [S::zero(), S::zero(), S::zero(), S::one()];
        Pose { m }
    }
}

/// Pinhole camera intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics<S: Scalar> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
}

impl<S: Scalar> Intrinsics<S> {
    pub fn new(fx: S, fy: S, cx: S, cy: S) -> Result<Self> {
        if fx <= S::zero() || fy <= S::zero() {
            return Err(Error::Invalid("intrinsics: focal lengths must be positive".into()));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// K^-1 [u, v, 1].
    pub fn unproject(&self, u: f64, v: f64) -> [f64; 3] {
        [
            (u - self.cx.as_f64()) / self.fx.as_f64(),
            (v - self.cy.as_f64()) / self.fy.as_f64(),
            1.0,
        ]
    }

    /// Perspective projection of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [
            self.fx.as_f64() * p[0] / p[2] + self.cx.as_f64(),
            self.fy.as_f64() * p[1] / p[2] + self.cy.as_f64(),
        ]
    }

    pub fn cast<T: Scalar>(&self) -> Intrinsics<T> {
        Intrinsics {
            fx: T::from_f64(self.fx.as_f64()),
            fy: T::from_f64(self.fy.as_f64()),
            cx: T::from_f64(self.cx.as_f64()),
            cy: T::from_f64(self.cy.as_f64()),
        }
    }
}

/// Per-pixel depth with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<S: Scalar> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<S>,
    pub valid: Vec<bool>,
}

impl<S: Scalar> DepthMap<S> {
    pub fn new(width: usize, height: usize, values: Vec<S>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(Error::Shape("depth map buffers do not match dimensions".into()));
        }
        for i in 0..values.len() {
            if valid[i] && !(values[i] > S::zero() && values[i].is_finite()) {
                return Err(Error::Invalid("depth must be positive and finite where valid".into()));
            }
        }
        Ok(DepthMap { width, height, values, valid })
    }

    pub fn constant(width: usize, height: usize, depth: S) -> Self {
        DepthMap {
            width,
            height,
            values: vec![depth; width * height],
            valid: vec![true; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> S {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Natural log of the depth values (for log-depth parameterization).
    pub fn to_log(&self) -> Vec<S> {
        self.values.iter().map(|v| v.ln()).collect()
    }

    pub fn from_log(width: usize, height: usize, log_values: &[S]) -> Result<Self> {
        let values: Vec<S> = log_values.iter().map(|v| v.exp()).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("exp(log-depth) is not finite".into()));
        }
        DepthMap::new(width, height, values, vec![true; width * height])
    }
}

/// Dense pixel correspondence into another view.
#[derive(Debug, Clone)]
pub struct CorrespondenceField<S: Scalar> {
    pub width: usize,
    pub height: usize,
    /// Continuous (x, y) target coordinates per source pixel.
    pub targets: Vec<[S; 2]>,
    pub target_depth: Vec<S>,
    pub valid: Vec<bool>,
}

impl<S: Scalar> CorrespondenceField<S> {
    /// Identity field over a grid.
    pub fn identity(width: usize, height: usize) -> Self {
        let mut targets = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                targets.push([S::from_usize(x), S::from_usize(y)]);
            }
        }
        CorrespondenceField {
            width,
            height,
            targets,
            target_depth: vec![S::one(); width * height],
            valid: vec![true; width * height],
        }
    }
}

/// RGB image with values in [0,1] and an optional validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<S: Scalar> {
    pub width: usize,
    pub height: usize,
    /// H*W*3 row-major.
    pub pixels: Vec<S>,
    pub mask: Option<Vec<bool>>,
}

impl<S: Scalar> Image<S> {
    pub fn new(width: usize, height: usize, pixels: Vec<S>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Shape("image buffer does not match dimensions".into()));
        }
        if pixels.iter().any(|v| *v < S::zero() || *v > S::one() || !v.is_finite()) {
            return Err(Error::Invalid("image channel values must lie in [0,1]".into()));
        }
        Ok(Image { width, height, pixels, mask: None })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![S::zero(); width * height * 3], mask: None }
    }

    pub fn constant(width: usize, height: usize, rgb: [S; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Image { width, height, pixels, mask: None }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [S; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [S; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mask_at(&self, x: usize, y: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[y * self.width + x])
    }

    /// Mean absolute pixel difference over pixels where both masks hold.
    pub fn masked_mae(&self, other: &Image<S>) -> Option<f64> {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.mask_at(x, y) && other.mask_at(x, y) {
                    let a = self.pixel(x, y);
                    let b = other.pixel(x, y);
                    for c in 0..3 {
                        acc += (a[c].as_f64() - b[c].as_f64()).abs();
                    }
                    count += 3;
                }
            }
        }
        if count == 0 {
            None
        } else {
            Some(acc / count as f64)
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image<S> {
        let mut out = Image::zeros(w, h);
        let mut mask = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(x, y, self.pixel(x0 + x, y0 + y));
                mask.push(self.mask_at(x0 + x, y0 + y));
            }
        }
        if self.mask.is_some() {
            out.mask = Some(mask);
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> Image<T> {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|v| T::from_f64(v.as_f64())).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// Invert a rigid transform: (R, t) -> (R^T, -R^T t).
pub fn invert_pose<S: Scalar>(pose: &Pose<S>) -> Pose<S> {
    let m = pose.matrix_f64();
    let mut inv = [[0.0f64; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = m[j][i];
        }
    }
    for i in 0..3 {
        inv[i][3] = -(m[0][i] * m[0][3] + m[1][i] * m[1][3] + m[2][i] * m[2][3]);
    }
    inv[3][3] = 1.0;
    let mut out = [[S::zero(); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = S::from_f64(inv[i][j]);
        }
    }
    Pose { m: out }
}

/// Relative pose between two views: T_src->dst = T_dst * T_src^-1.
pub fn relative_pose<S: Scalar>(t_dst: &Pose<S>, t_src: &Pose<S>) -> Pose<S> {
    t_dst.compose(&invert_pose(t_src))
}

/// Result of mapping a single pixel into another view.
#[derive(Debug, Clone, Copy)]
pub struct MappedPoint<S: Scalar> {
    pub point: [S; 2],
    pub depth: S,
    pub valid: bool,
}

/// Lift a pixel at `depth`, apply `t_rel`, reproject. Reports invalid when
/// the transformed point falls behind the camera (z <= EPS_Z).
pub fn map_point<S: Scalar>(
    t_rel: &Pose<S>,
    k: &Intrinsics<S>,
    depth: S,
    p: [S; 2],
) -> MappedPoint<S> {
    let ray = k.unproject(p[0].as_f64(), p[1].as_f64());
    let d = depth.as_f64();
    let x = [ray[0] * d, ray[1] * d, ray[2] * d];
    let xp = t_rel.transform(x);
    if xp[2] <= EPS_Z {
        return MappedPoint { point: [S::zero(); 2], depth: S::from_f64(xp[2]), valid: false };
    }
    let uv = k.project(xp);
    MappedPoint {
        point: [S::from_f64(uv[0]), S::from_f64(uv[1])],
        depth: S::from_f64(xp[2]),
        valid: true,
    }
}

/// Dense correspondence from every valid pixel of `d_src` into the view
/// reached by `t_rel`. Targets outside the `target_width x target_height`
/// bounds are marked invalid.
pub fn build_correspondence<S: Scalar>(
    t_rel: &Pose<S>,
    k: &Intrinsics<S>,
    d_src: &DepthMap<S>,
    target_width: usize,
    target_height: usize,
) -> CorrespondenceField<S> {
    let (w, h) = (d_src.width, d_src.height);
    let mut targets = Vec::with_capacity(w * h);
    let mut target_depth = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            if !d_src.is_valid(x, y) {
                targets.push([S::zero(); 2]);
                target_depth.push(S::zero());
                valid.push(false);
                continue;
            }
            let mp = map_point(t_rel, k, d_src.at(x, y), [S::from_usize(x), S::from_usize(y)]);
            let in_bounds = mp.valid
                && mp.point[0].as_f64() >= 0.0
                && mp.point[0].as_f64() <= (target_width - 1) as f64
                && mp.point[1].as_f64() >= 0.0
                && mp.point[1].as_f64() <= (target_height - 1) as f64;
            targets.push(mp.point);
            target_depth.push(mp.depth);
            valid.push(in_bounds);
        }
    }
    CorrespondenceField { width: w, height: h, targets, target_depth, valid }
}

/// Backward warp: per destination pixel, bilinearly sample `src` at the
/// correspondence target. Output mask requires a valid correspondence and
/// all four bilinear taps in bounds; invalid pixels are set to 0.
pub fn backward_warp<S: Scalar>(src: &Image<S>, corr: &CorrespondenceField<S>) -> Image<S> {
    let (w, h) = (corr.width, corr.height);
    let mut out = Image::zeros(w, h);
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !corr.valid[i] {
                continue;
            }
            let tx = corr.targets[i][0].as_f64();
            let ty = corr.targets[i][1].as_f64();
            let x0 = tx.floor();
            let y0 = ty.floor();
            let (x1, y1) = (x0 + 1.0, y0 + 1.0);
            // degenerate-at-border: an exactly integral coordinate on the
            // last row/column only needs one tap in that direction
            let fx = tx - x0;
            let fy = ty - y0;
            let x1 = if fx == 0.0 { x0 } else { x1 };
            let y1 = if fy == 0.0 { y0 } else { y1 };
            if x0 < 0.0
                || y0 < 0.0
                || x1 > (src.width - 1) as f64
                || y1 > (src.height - 1) as f64
            {
                continue;
            }
            let (c0, c1) = (x0 as usize, x1 as usize);
            let (r0, r1) = (y0 as usize, y1 as usize);
            let p00 = src.pixel(c0, r0);
            let p10 = src.pixel(c1, r0);
            let p01 = src.pixel(c0, r1);
            let p11 = src.pixel(c1, r1);
            let mut rgb = [S::zero(); 3];
            for c in 0..3 {
                let top = p00[c].as_f64() * (1.0 - fx) + p10[c].as_f64() * fx;
                let bot = p01[c].as_f64() * (1.0 - fx) + p11[c].as_f64() * fx;
                rgb[c] = S::from_f64(top * (1.0 - fy) + bot * fy);
            }
            out.set_pixel(x, y, rgb);
            mask[i] = true;
        }
    }
    out.mask = Some(mask);
    out
}

/// Forward warp by nearest-pixel z-buffer splatting. Each valid source
/// pixel lands on its rounded target; strictly nearer depth wins and ties
/// keep the earlier (row-major) source pixel. Returns the warped image and
/// the hole mask (true where nothing landed).
pub fn forward_warp<S: Scalar>(
    src: &Image<S>,
    d_src: &DepthMap<S>,
    t_rel: &Pose<S>,
    k: &Intrinsics<S>,
) -> (Image<S>, Vec<bool>) {
    let (w, h) = (src.width, src.height);
    let mut out = Image::zeros(w, h);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut hole = vec![true; w * h];
    for y in 0..h {
        for x in 0..w {
            if !d_src.is_valid(x, y) || !src.mask_at(x, y) {
                continue;
            }
            let mp = map_point(t_rel, k, d_src.at(x, y), [S::from_usize(x), S::from_usize(y)]);
            if !mp.valid {
                continue;
            }
            let tx = mp.point[0].as_f64().round();
            let ty = mp.point[1].as_f64().round();
            if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64 {
                continue;
            }
            let ti = ty as usize * w + tx as usize;
            let z = mp.depth.as_f64();
            if z < zbuf[ti] {
                zbuf[ti] = z;
                out.set_pixel(tx as usize, ty as usize, src.pixel(x, y));
                hole[ti] = false;
            }
        }
    }
    out.mask = Some(hole.iter().map(|&hl| !hl).collect());
    (out, hole)
}

/// Forward-project a depth map into another view (z-buffered), producing
/// the target-view depth. Used to derive D_o from the optimized D_c.
pub fn project_depth<S: Scalar>(
    d_src: &DepthMap<S>,
    t_rel: &Pose<S>,
    k: &Intrinsics<S>,
) -> DepthMap<S> {
    let (w, h) = (d_src.width, d_src.height);
    let mut values = vec![S::zero(); w * h];
    let mut valid = vec![false; w * h];
    let mut zbuf = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            if !d_src.is_valid(x, y) {
                continue;
            }
            let mp = map_point(t_rel, k, d_src.at(x, y), [S::from_usize(x), S::from_usize(y)]);
            if !mp.valid {
                continue;
            }
            let tx = mp.point[0].as_f64().round();
            let ty = mp.point[1].as_f64().round();
            if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f64 || ty > (h - 1) as f64 {
                continue;
            }
            let ti = ty as usize * w + tx as usize;
            let z = mp.depth.as_f64();
            if z < zbuf[ti] {
                zbuf[ti] = z;
                values[ti] = mp.depth;
                valid[ti] = true;
            }
        }
    }
    DepthMap { width: w, height: h, values, valid }
}

/// Fill the invalid region of a depth map by Laplacian diffusion from the
/// valid boundary, iterated to max-update residual < 1e-4.
pub fn complete_depth<S: Scalar>(partial: &DepthMap<S>) -> Result<DepthMap<S>> {
    let (w, h) = (partial.width, partial.height);
    let n_valid = partial.valid_count();
    if n_valid == 0 {
        return Err(Error::Invalid("complete_depth: no valid pixels to diffuse from".into()));
    }
    if n_valid == w * h {
        return Ok(partial.clone());
    }
    let mean = partial
        .values
        .iter()
        .zip(&partial.valid)
        .filter(|(_, &v)| v)
        .map(|(d, _)| d.as_f64())
        .sum::<f64>()
        / n_valid as f64;
    let mut field: Vec<f64> = partial
        .values
        .iter()
        .zip(&partial.valid)
        .map(|(d, &v)| if v { d.as_f64() } else { mean })
        .collect();

    // Red-black Gauss-Seidel on the unknown pixels.
    let max_iters = 40 * (w + h) * (w + h);
    for _ in 0..max_iters {
        let mut residual = 0.0f64;
        for parity in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    if (x + y) % 2 != parity || partial.valid[y * w + x] {
                        continue;
                    }
                    let mut acc = 0.0f64;
                    let mut count = 0usize;
                    if x > 0 {
                        acc += field[y * w + x - 1];
                        count += 1;
                    }
                    if x + 1 < w {
                        acc += field[y * w + x + 1];
                        count += 1;
                    }
                    if y > 0 {
                        acc += field[(y - 1) * w + x];
                        count += 1;
                    }
                    if y + 1 < h {
                        acc += field[(y + 1) * w + x];
                        count += 1;
                    }
                    let new = acc / count as f64;
                    residual = residual.max((new - field[y * w + x]).abs());
                    field[y * w + x] = new;
                }
            }
        }
        if residual < 1e-4 {
            break;
        }
    }
    DepthMap::new(w, h, field.iter().map(|&v| S::from_f64(v)).collect(), vec![true; w * h])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn test_intrinsics() -> Intrinsics<f64> {
        Intrinsics::new(80.0, 80.0, 32.0, 32.0).unwrap()
    }

    #[test]
    fn invert_identity() {
        let p = Pose::<f64>::identity();
        assert_eq!(invert_pose(&p), Pose::identity());
    }

    #[test]
    fn invert_pure_translation() {
        let p = Pose::<f64>::translation([1.0, -2.0, 3.0]);
        let inv = invert_pose(&p);
        assert_eq!(inv, Pose::translation([-1.0, 2.0, -3.0]));
    }

    #[test]
    fn relative_pose_identities() {
        let t = Pose::<f64>::from_euler(0.1, -0.2, 0.05, [0.3, 0.1, -0.2]);
        let rel = relative_pose(&t, &t);
        let m = rel.matrix_f64();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(m[i][j], expect, epsilon = 1e-9);
            }
        }
        let rel2 = relative_pose(&t, &Pose::identity());
        let (a, b) = (rel2.matrix_f64(), t.matrix_f64());
        for i in 0..4 {
            for j in 0..4 {
                assert_abs_diff_eq!(a[i][j], b[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn pose_invariants_enforced() {
        let mut m = [[0.0f64; 4]; 4];
        for i in 0..4 {
            m[i][i] = 1.0;
        }
        m[0][0] = 2.0; // not orthonormal
        assert!(Pose::new(m).is_err());
        let mut m2 = Pose::<f64>::identity().matrix_f64();
        m2[3][0] = 0.5; // bad bottom row
        assert!(Pose::from_matrix_f64(m2).is_err());
    }

    #[test]
    fn map_point_identity() {
        let k = test_intrinsics();
        let mp = map_point(&Pose::identity(), &k, 2.5, [10.0, 20.0]);
        assert!(mp.valid);
        assert_abs_diff_eq!(mp.point[0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mp.point[1], 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mp.depth, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn map_point_principal_axis_translation() {
        let k = test_intrinsics();
        let t = Pose::<f64>::translation([0.0, 0.0, 0.7]);
        let mp = map_point(&t, &k, 2.0, [32.0, 32.0]);
        assert!(mp.valid);
        assert_abs_diff_eq!(mp.point[0], 32.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mp.point[1], 32.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mp.depth, 2.7, epsilon = 1e-12);
    }

    #[test]
    fn map_point_behind_camera_is_invalid() {
        let k = test_intrinsics();
        let t = Pose::<f64>::translation([0.0, 0.0, -5.0]);
        let mp = map_point(&t, &k, 2.0, [32.0, 32.0]);
        assert!(!mp.valid);
    }

    #[test]
    fn correspondence_identity_is_pixel_grid() {
        let k = test_intrinsics();
        let d = DepthMap::constant(8, 6, 2.0);
        let corr = build_correspondence(&Pose::identity(), &k, &d, 8, 6);
        for y in 0..6 {
            for x in 0..8 {
                let i = y * 8 + x;
                assert!(corr.valid[i]);
                assert_abs_diff_eq!(corr.targets[i][0], x as f64, epsilon = 1e-12);
                assert_abs_diff_eq!(corr.targets[i][1], y as f64, epsilon = 1e-12);
                assert_abs_diff_eq!(corr.target_depth[i], 2.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn correspondence_inplane_translation_shift() {
        // constant depth plane + in-plane x translation: shift = fx * tx / depth
        let k = test_intrinsics();
        let depth = 2.0;
        let tx = 0.05;
        let d = DepthMap::constant(16, 16, depth);
        let t = Pose::<f64>::translation([tx, 0.0, 0.0]);
        let corr = build_correspondence(&t, &k, &d, 16, 16);
        let shift = 80.0 * tx / depth;
        for y in 0..16 {
            for x in 0..16 {
                let i = y * 16 + x;
                if corr.valid[i] {
                    assert_abs_diff_eq!(corr.targets[i][0], x as f64 + shift, epsilon = 1e-10);
                    assert_abs_diff_eq!(corr.targets[i][1], y as f64, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn backward_warp_identity_reproduces_source() {
        let mut src = Image::<f64>::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                let v = ((x * 8 + y) as f64) / 80.0;
                src.set_pixel(x, y, [v, v / 2.0, 1.0 - v]);
            }
        }
        let out = backward_warp(&src, &CorrespondenceField::identity(8, 8));
        for y in 0..8 {
            for x in 0..8 {
                assert!(out.mask_at(x, y));
                let (a, b) = (out.pixel(x, y), src.pixel(x, y));
                for c in 0..3 {
                    assert_abs_diff_eq!(a[c], b[c], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_warp_constant_source() {
        let src = Image::<f64>::constant(8, 8, [0.3, 0.6, 0.9]);
        let mut corr = CorrespondenceField::identity(8, 8);
        for t in corr.targets.iter_mut() {
            t[0] = (t[0] * 0.9 + 0.3).min(7.0);
            t[1] = (t[1] * 0.8 + 0.2).min(7.0);
        }
        let out = backward_warp(&src, &corr);
        for y in 0..8 {
            for x in 0..8 {
                if out.mask_at(x, y) {
                    let p = out.pixel(x, y);
                    assert_abs_diff_eq!(p[0], 0.3, epsilon = 1e-12);
                    assert_abs_diff_eq!(p[1], 0.6, epsilon = 1e-12);
                    assert_abs_diff_eq!(p[2], 0.9, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_warp_integer_shift_oracle() {
        // a (+3, 0) shift field equals an index-shifted copy
        let mut src = Image::<f64>::zeros(10, 4);
        for y in 0..4 {
            for x in 0..10 {
                src.set_pixel(x, y, [(x as f64) / 10.0, (y as f64) / 4.0, 0.5]);
            }
        }
        let mut corr = CorrespondenceField::identity(10, 4);
        for (i, t) in corr.targets.iter_mut().enumerate() {
            t[0] = t[0] + 3.0;
            corr.valid[i] = t[0].as_f64() <= 9.0;
        }
        let out = backward_warp(&src, &corr);
        for y in 0..4 {
            for x in 0..10 {
                if x + 3 < 10 {
                    assert!(out.mask_at(x, y));
                    assert_eq!(out.pixel(x, y), src.pixel(x + 3, y));
                } else {
                    assert!(!out.mask_at(x, y));
                }
            }
        }
    }

    #[test]
    fn forward_warp_identity_no_holes() {
        let mut src = Image::<f64>::zeros(8, 8);
        for y in 0..8 {
            for x in 0..8 {
                src.set_pixel(x, y, [(x as f64) / 8.0, (y as f64) / 8.0, 0.25]);
            }
        }
        let d = DepthMap::constant(8, 8, 2.0);
        let k = test_intrinsics();
        let (out, holes) = forward_warp(&src, &d, &Pose::identity(), &k);
        for y in 0..8 {
            for x in 0..8 {
                assert!(!holes[y * 8 + x]);
                assert_eq!(out.pixel(x, y), src.pixel(x, y));
            }
        }
    }

    #[test]
    fn forward_warp_large_motion_leaves_holes() {
        let src = Image::<f64>::constant(16, 16, [0.5, 0.5, 0.5]);
        let d = DepthMap::constant(16, 16, 2.0);
        let k = Intrinsics::new(40.0, 40.0, 8.0, 8.0).unwrap();
        let t = Pose::<f64>::translation([0.4, 0.0, 0.0]);
        let (_, holes) = forward_warp(&src, &d, &t, &k);
        let n_holes = holes.iter().filter(|&&h| h).count();
        assert!(n_holes > 0);
        // holes cover exactly the unreached columns on the left edge
        let shift = (40.0 * 0.4 / 2.0_f64).round() as usize;
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(holes[y * 16 + x], x < shift, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn complete_depth_fully_valid_unchanged() {
        let d = DepthMap::constant(6, 6, 3.0);
        let out = complete_depth(&d).unwrap();
        assert_eq!(out, d);
    }

    #[test]
    fn complete_depth_constant_region() {
        let mut valid = vec![false; 36];
        for y in 0..6 {
            for x in 0..3 {
                valid[y * 6 + x] = true;
            }
        }
        let d = DepthMap::new(6, 6, vec![2.5; 36], valid).unwrap();
        let out = complete_depth(&d).unwrap();
        for v in &out.values {
            assert_abs_diff_eq!(*v, 2.5, epsilon = 1e-3);
        }
        assert!(out.valid.iter().all(|&v| v));
    }

    #[test]
    fn complete_depth_ramp_extrapolates_harmonically() {
        // left half holds a linear ramp in x; the harmonic fill of a strip
        // continues the ramp (flattening near the free right boundary)
        let (w, h) = (16, 8);
        let mut values = vec![0.0f64; w * h];
        let mut valid = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                values[y * w + x] = 1.0 + 0.1 * x as f64;
                valid[y * w + x] = x < w / 2;
            }
        }
        let d = DepthMap::new(w, h, values.clone(), valid).unwrap();
        let out = complete_depth(&d).unwrap();
        // interior filled columns near the boundary stay within 5% of the ramp
        for y in 0..h {
            for x in w / 2..w / 2 + 3 {
                let expect = 1.0 + 0.1 * x as f64;
                let got = out.at(x, y);
                assert!(
                    (got - expect).abs() / expect < 0.05,
                    "({x},{y}): got {got}, ramp {expect}"
                );
            }
        }
    }

    #[test]
    fn complete_depth_rejects_fully_invalid() {
        let d = DepthMap::<f64> {
            width: 4,
            height: 4,
            values: vec![0.0; 16],
            valid: vec![false; 16],
        };
        assert!(complete_depth(&d).is_err());
    }

    #[test]
    fn mask_monotonicity() {
        // shrinking the source depth mask never enlarges output masks
        let k = test_intrinsics();
        let t = Pose::<f64>::from_euler(0.02, -0.03, 0.01, [0.01, 0.0, 0.02]);
        let mut d_full = DepthMap::constant(12, 12, 2.0);
        let corr_full = build_correspondence(&t, &k, &d_full, 12, 12);
        for i in (0..144).step_by(3) {
            d_full.valid[i] = false;
        }
        let corr_small = build_correspondence(&t, &k, &d_full, 12, 12);
        for i in 0..144 {
            assert!(!corr_small.valid[i] || corr_full.valid[i]);
        }
    }
}
