//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records a DAG of operations; [`Tape::backward`] walks it in
//! reverse, producing analytic adjoints for every reachable parameter.
//! The op set is exactly what the pipeline needs: elementwise math,
//! matmul, small convolutions, bilinear sampling, and the depth-driven
//! pixel projection. All reductions accumulate in `f64` with a fixed
//! summation order, so training is bitwise reproducible given a seed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Stable identity of a trainable parameter across tapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Const,
    Param(ParamId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// [N,K] x [K,M] -> [N,M]
    MatMul(NodeId, NodeId),
    /// [N,M] + [M]
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    /// scale * x + offset
    Affine(NodeId, S, S),
    Sum(NodeId),
    Mean(NodeId),
    /// [N,Mi] -> [N, sum Mi]
    ConcatCols(Vec<NodeId>),
    /// contiguous rows [start, start+len) of a rank-2 tensor
    SliceRows(NodeId, usize, usize),
    /// arbitrary rows of a rank-1 or rank-2 tensor
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    /// [h*w, c] -> [c, h, w]
    RowsToChw(NodeId, usize, usize),
    /// [c, h, w] -> [h*w, c]
    ChwToRows(NodeId),
    /// [Ci,H,W] -> [sum Ci, H, W]
    ConcatChannels(Vec<NodeId>),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    /// nearest-neighbor [C,H,W] -> [C,2H,2W]
    Upsample2x(NodeId),
    /// clamp to [0,1]; gradient passes through inside the range, zero outside
    ClampUnit(NodeId),
    /// img [H,W,C], coords [N,2] (x,y in pixel units) -> [N,C]
    BilinearSample { img: NodeId, coords: NodeId },
    /// log-depth [N] -> projected pixel coords [N,2]
    DepthProject {
        log_depth: NodeId,
        proj: Box<Projection<S>>,
    },
    /// copy `base`, overwrite `rows` with the rows of `src`
    PasteRows {
        base: Tensor<S>,
        rows: Vec<usize>,
        src: NodeId,
    },
}

/// Constant data of a depth-driven projection: source pixel rays and the
/// rigid transform, fixed at graph construction.
#[derive(Debug, Clone)]
pub struct Projection<S: Scalar> {
    /// K^-1 [u,v,1] per source pixel, rotated into the target frame.
    rot_rays: Vec<[f64; 3]>,
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    eps_z: f64,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> Projection<S> {
    pub fn new(t_rel: &Pose<S>, k: &Intrinsics<S>, pixels: &[[S; 2]], eps_z: f64) -> Self {
        let m = t_rel.matrix_f64();
        let (fx, fy, cx, cy) = (k.fx.as_f64(), k.fy.as_f64(), k.cx.as_f64(), k.cy.as_f64());
        let rot_rays = pixels
            .iter()
            .map(|p| {
                let r = [(p[0].as_f64() - cx) / fx, (p[1].as_f64() - cy) / fy, 1.0];
                [
                    m[0][0] * r[0] + m[0][1] * r[1] + m[0][2] * r[2],
                    m[1][0] * r[0] + m[1][1] * r[1] + m[1][2] * r[2],
                    m[2][0] * r[0] + m[2][1] * r[1] + m[2][2] * r[2],
                ]
            })
            .collect();
        Projection {
            rot_rays,
            translation: [m[0][3], m[1][3], m[2][3]],
            fx,
            fy,
            cx,
            cy,
            eps_z,
            _marker: std::marker::PhantomData,
        }
    }

    fn len(&self) -> usize {
        self.rot_rays.len()
    }

    /// Forward projection of one pixel at depth `d`; returns (u', v', z').
    fn project(&self, n: usize, d: f64) -> (f64, f64, f64) {
        let q = self.rot_rays[n];
        let t = self.translation;
        let x = d * q[0] + t[0];
        let y = d * q[1] + t[1];
        let z = d * q[2] + t[2];
        if z <= self.eps_z {
            return (0.0, 0.0, z);
        }
        (self.fx * x / z + self.cx, self.fy * y / z + self.cy, z)
    }
}

struct NodeRec<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradients produced by a backward pass, addressable by node or parameter.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    params: HashMap<ParamId, NodeId>,
}

impl<S: Scalar> Gradients<S> {
    pub fn by_node(&self, n: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(n.0).and_then(|g| g.as_ref())
    }

    pub fn by_param(&self, p: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&p).and_then(|&n| self.by_node(n))
    }
}

/// Records a computation and replays it in reverse for gradients.
pub struct Tape<S: Scalar> {
    nodes: Vec<NodeRec<S>>,
    params: HashMap<ParamId, NodeId>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(NodeRec { value, op });
        id
    }

    pub fn value(&self, n: NodeId) -> &Tensor<S> {
        &self.nodes[n.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Const)
    }

    pub fn scalar(&mut self, v: S) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Register a trainable parameter. Each `ParamId` may appear once per tape.
    pub fn param(&mut self, id: ParamId, t: Tensor<S>) -> NodeId {
        assert!(!self.params.contains_key(&id), "parameter registered twice on one tape");
        let n = self.push(t, Op::Param(id));
        self.params.insert(id, n);
        n
    }

    // ---- elementwise binary ----

    fn binary_shape(&self, a: NodeId, b: NodeId, what: &str) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ok = sa == sb
            || self.value(b).numel() == 1
            || self.value(a).numel() == 1
            || (sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0] && sb[1] == 1);
        assert!(ok, "{what}: incompatible shapes {sa:?} vs {sb:?}");
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape(a, b, "add");
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape(a, b, "sub");
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape(a, b, "mul");
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_shape(a, b, "div");
        let v = broadcast_zip(self.value(a), self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); n * m];
        let da = self.value(a).data();
        let db = self.value(b).data();
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0f64;
                for l in 0..k {
                    acc += da[i * k + l].as_f64() * db[l * m + j].as_f64();
                }
                out[i * m + j] = S::from_f64(acc);
            }
        }
        self.push(Tensor::new(vec![n, m], out).unwrap(), Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert!(sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0], "add_bias: {sa:?} + {sb:?}");
        let (n, m) = (sa[0], sa[1]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let out: Vec<S> = (0..n * m).map(|i| da[i] + db[i % m]).collect();
        self.push(Tensor::new(vec![n, m], out).unwrap(), Op::AddBias(a, b))
    }

    // ---- elementwise unary ----

    fn unary(&mut self, a: NodeId, f: impl Fn(S) -> S, op: Op<S>) -> NodeId {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.cos(), Op::Cos(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn affine(&mut self, a: NodeId, scale: S, offset: S) -> NodeId {
        self.unary(a, |x| scale * x + offset, Op::Affine(a, scale, offset))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.affine(a, -S::one(), S::zero())
    }

    pub fn clamp_unit(&mut self, a: NodeId) -> NodeId {
        self.unary(
            a,
            |x| {
                if x < S::zero() {
                    S::zero()
                } else if x > S::one() {
                    S::one()
                } else {
                    x
                }
            },
            Op::ClampUnit(a),
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = S::from_f64(self.value(a).sum_f64());
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel();
        let s = S::from_f64(self.value(a).sum_f64() / n as f64);
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    // ---- structure ----

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).shape()[0];
        let mut total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            assert!(s.len() == 2 && s[0] == n, "concat_cols: bad shape {s:?}");
            total += s[1];
        }
        let mut out = vec![S::zero(); n * total];
        let mut col = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            let m = s[1];
            let d = self.value(p).data();
            for i in 0..n {
                out[i * total + col..i * total + col + m].copy_from_slice(&d[i * m..(i + 1) * m]);
            }
            col += m;
        }
        self.push(Tensor::new(vec![n, total], out).unwrap(), Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let s = self.value(a).shape().to_vec();
        assert!(s.len() == 2 && start + len <= s[0], "slice_rows out of range");
        let m = s[1];
        let d = self.value(a).data();
        let out = d[start * m..(start + len) * m].to_vec();
        self.push(Tensor::new(vec![len, m], out).unwrap(), Op::SliceRows(a, start, len))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let s = self.value(a).shape().to_vec();
        assert!(s.len() == 1 || s.len() == 2, "gather_rows: rank must be 1 or 2");
        let m = if s.len() == 2 { s[1] } else { 1 };
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            assert!(r < s[0], "gather_rows index {r} out of range {}", s[0]);
            out.extend_from_slice(&d[r * m..r * m + m]);
        }
        let shape = if s.len() == 2 { vec![rows.len(), m] } else { vec![rows.len()] };
        self.push(Tensor::new(shape, out).unwrap(), Op::GatherRows(a, rows.to_vec()))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(a).clone().reshaped(shape).expect("reshape numel mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn rows_to_chw(&mut self, a: NodeId, h: usize, w: usize) -> NodeId {
        let s = self.value(a).shape().to_vec();
        assert!(s.len() == 2 && s[0] == h * w, "rows_to_chw: {s:?} vs {h}x{w}");
        let c = s[1];
        let d = self.value(a).data();
        let mut out = vec![S::zero(); c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                out[ch * h * w + p] = d[p * c + ch];
            }
        }
        self.push(Tensor::new(vec![c, h, w], out).unwrap(), Op::RowsToChw(a, h, w))
    }

    pub fn chw_to_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).shape().to_vec();
        assert!(s.len() == 3, "chw_to_rows: rank-3 expected, got {s:?}");
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.value(a).data();
        let mut out = vec![S::zero(); c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                out[p * c + ch] = d[ch * h * w + p];
            }
        }
        self.push(Tensor::new(vec![h * w, c], out).unwrap(), Op::ChwToRows(a))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let s0 = self.value(parts[0]).shape().to_vec();
        assert!(s0.len() == 3);
        let (h, w) = (s0[1], s0[2]);
        let mut out = Vec::new();
        let mut c_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            assert!(s.len() == 3 && s[1] == h && s[2] == w, "concat_channels: bad shape {s:?}");
            c_total += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(vec![c_total, h, w], out).unwrap(), Op::ConcatChannels(parts.to_vec()))
    }

    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).shape().to_vec();
        assert!(s.len() == 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let d = self.value(a).data();
        let mut out = vec![S::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    out[ch * 4 * h * w + y * 2 * w + x] = d[ch * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, 2 * h, 2 * w], out).unwrap(), Op::Upsample2x(a))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        assert!(si.len() == 3 && sw.len() == 4 && si[0] == sw[1], "conv2d: {si:?} * {sw:?}");
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let di = self.value(input).data().to_vec();
        let dw = self.value(weight).data().to_vec();
        let db: Option<Vec<S>> = bias.map(|b| {
            assert_eq!(self.value(b).shape(), &[c_out], "conv2d: bias shape");
            self.value(b).data().to_vec()
        });
        let mut out = vec![S::zero(); c_out * oh * ow];
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = db.as_ref().map_or(0.0, |b| b[o].as_f64());
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += di[c * h * w + iy as usize * w + ix as usize].as_f64()
                                    * dw[((o * c_in + c) * kh + ky) * kw + kx].as_f64();
                            }
                        }
                    }
                    out[o * oh * ow + oy * ow + ox] = S::from_f64(acc);
                }
            }
        }
        self.push(
            Tensor::new(vec![c_out, oh, ow], out).unwrap(),
            Op::Conv2d { input, weight, bias, stride, pad },
        )
    }

    /// Differentiable bilinear sampling of `img` ([H,W,C]) at continuous
    /// pixel coordinates `coords` ([N,2], (x,y)). Taps are clamped to the
    /// image border; validity is the caller's concern.
    pub fn bilinear_sample(&mut self, img: NodeId, coords: NodeId) -> NodeId {
        let si = self.value(img).shape().to_vec();
        let sc = self.value(coords).shape().to_vec();
        assert!(si.len() == 3 && sc.len() == 2 && sc[1] == 2, "bilinear_sample: {si:?}, {sc:?}");
        let (h, w, c) = (si[0], si[1], si[2]);
        let n = sc[0];
        let di = self.value(img).data();
        let dc = self.value(coords).data();
        let mut out = vec![S::zero(); n * c];
        for i in 0..n {
            let taps = bilinear_taps(dc[i * 2].as_f64(), dc[i * 2 + 1].as_f64(), h, w);
            for ch in 0..c {
                let mut acc = 0.0f64;
                for t in &taps {
                    acc += t.weight * di[(t.row * w + t.col) * c + ch].as_f64();
                }
                out[i * c + ch] = S::from_f64(acc);
            }
        }
        self.push(Tensor::new(vec![n, c], out).unwrap(), Op::BilinearSample { img, coords })
    }

    /// Project source pixels through per-pixel depth `exp(log_depth)` into a
    /// target view; output is [N,2] continuous target coordinates,
    /// differentiable with respect to the log-depth.
    pub fn depth_project(&mut self, log_depth: NodeId, proj: Projection<S>) -> NodeId {
        let s = self.value(log_depth).shape().to_vec();
        assert!(s.len() == 1 && s[0] == proj.len(), "depth_project: {s:?} vs {}", proj.len());
        let d = self.value(log_depth).data();
        let mut out = vec![S::zero(); s[0] * 2];
        for i in 0..s[0] {
            let (u, v, _z) = proj.project(i, d[i].as_f64().exp());
            out[i * 2] = S::from_f64(u);
            out[i * 2 + 1] = S::from_f64(v);
        }
        self.push(
            Tensor::new(vec![s[0], 2], out).unwrap(),
            Op::DepthProject { log_depth, proj: Box::new(proj) },
        )
    }

    /// Copy `base` and overwrite the listed rows with the rows of `src`.
    pub fn paste_rows(&mut self, base: Tensor<S>, rows: Vec<usize>, src: NodeId) -> NodeId {
        let sb = base.shape().to_vec();
        let ss = self.value(src).shape().to_vec();
        assert!(sb.len() == 2 && ss.len() == 2 && sb[1] == ss[1] && ss[0] == rows.len());
        let m = sb[1];
        let mut out = base.data().to_vec();
        let ds = self.value(src).data();
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < sb[0], "paste_rows: row {r} out of range");
            out[r * m..r * m + m].copy_from_slice(&ds[i * m..(i + 1) * m]);
        }
        self.push(Tensor::new(sb, out).unwrap(), Op::PasteRows { base, rows, src })
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss; fresh gradient buffers.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        let mut grads = Gradients {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            params: self.params.clone(),
        };
        self.backward_accumulate(loss, &mut grads)?;
        Ok(grads)
    }

    /// Reverse pass accumulating into existing buffers.
    pub fn backward_accumulate(&self, loss: NodeId, grads: &mut Gradients<S>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if grads.grads.len() != self.nodes.len() {
            return Err(Error::Shape("gradient buffer does not match tape".into()));
        }
        // Local adjoints for this pass; merged into `grads` at the end so
        // repeated calls accumulate.
        let mut adj: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(S::one()));

        for id in (0..=loss.0).rev() {
            let g = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.adjoint(id, &g, &mut adj);
            // keep the node's own gradient
            match &mut grads.grads[id] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(adj: &mut [Option<Tensor<S>>], target: NodeId, delta: Tensor<S>) {
        match &mut adj[target.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), delta.shape());
                for (a, b) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn adjoint(&self, id: usize, g: &Tensor<S>, adj: &mut Vec<Option<Tensor<S>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::Add(a, b) => {
                Self::accumulate(adj, *a, reduce_to(g, self.value(*a).shape()));
                Self::accumulate(adj, *b, reduce_to(g, self.value(*b).shape()));
            }
            Op::Sub(a, b) => {
                Self::accumulate(adj, *a, reduce_to(g, self.value(*a).shape()));
                let neg = g.map(|x| -x);
                Self::accumulate(adj, *b, reduce_to(&neg, self.value(*b).shape()));
            }
            Op::Mul(a, b) => {
                let ga = broadcast_zip(g, self.value(*b), |x, y| x * y);
                let gb = broadcast_zip(g, self.value(*a), |x, y| x * y);
                Self::accumulate(adj, *a, reduce_to(&ga, self.value(*a).shape()));
                Self::accumulate(adj, *b, reduce_to(&gb, self.value(*b).shape()));
            }
            Op::Div(a, b) => {
                // d(a/b)/da = 1/b ; d(a/b)/db = -a/b^2
                let ga = broadcast_zip(g, self.value(*b), |x, y| x / y);
                let av = self.value(*a);
                let bv = self.value(*b);
                let quot = broadcast_zip(av, bv, |x, y| x / (y * y));
                let gb = broadcast_zip(g, &quot, |x, q| -x * q);
                Self::accumulate(adj, *a, reduce_to(&ga, av.shape()));
                Self::accumulate(adj, *b, reduce_to(&gb, bv.shape()));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape().to_vec(), self.value(*b).shape().to_vec());
                let (n, k, m) = (sa[0], sa[1], sb[1]);
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let dg = g.data();
                // dA = G B^T
                let mut ga = vec![S::zero(); n * k];
                for i in 0..n {
                    for l in 0..k {
                        let mut acc = 0.0f64;
                        for j in 0..m {
                            acc += dg[i * m + j].as_f64() * db[l * m + j].as_f64();
                        }
                        ga[i * k + l] = S::from_f64(acc);
                    }
                }
                // dB = A^T G
                let mut gb = vec![S::zero(); k * m];
                for l in 0..k {
                    for j in 0..m {
                        let mut acc = 0.0f64;
                        for i in 0..n {
                            acc += da[i * k + l].as_f64() * dg[i * m + j].as_f64();
                        }
                        gb[l * m + j] = S::from_f64(acc);
                    }
                }
                Self::accumulate(adj, *a, Tensor::new(vec![n, k], ga).unwrap());
                Self::accumulate(adj, *b, Tensor::new(vec![k, m], gb).unwrap());
            }
            Op::AddBias(a, b) => {
                Self::accumulate(adj, *a, g.clone());
                let m = self.value(*b).numel();
                let n = g.numel() / m;
                let dg = g.data();
                let mut gb = vec![S::zero(); m];
                for j in 0..m {
                    let mut acc = 0.0f64;
                    for i in 0..n {
                        acc += dg[i * m + j].as_f64();
                    }
                    gb[j] = S::from_f64(acc);
                }
                Self::accumulate(adj, *b, Tensor::new(vec![m], gb).unwrap());
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let ga = zip_map(g, av, |gy, x| if x > S::zero() { gy } else { S::zero() });
                Self::accumulate(adj, *a, ga);
            }
            Op::Sigmoid(a) => {
                let yv = &node.value;
                let ga = zip_map(g, yv, |gy, y| gy * y * (S::one() - y));
                Self::accumulate(adj, *a, ga);
            }
            Op::Tanh(a) => {
                let yv = &node.value;
                let ga = zip_map(g, yv, |gy, y| gy * (S::one() - y * y));
                Self::accumulate(adj, *a, ga);
            }
            Op::Sin(a) => {
                let av = self.value(*a);
                let ga = zip_map(g, av, |gy, x| gy * x.cos());
                Self::accumulate(adj, *a, ga);
            }
            Op::Cos(a) => {
                let av = self.value(*a);
                let ga = zip_map(g, av, |gy, x| -gy * x.sin());
                Self::accumulate(adj, *a, ga);
            }
            Op::Exp(a) => {
                let yv = &node.value;
                let ga = zip_map(g, yv, |gy, y| gy * y);
                Self::accumulate(adj, *a, ga);
            }
            Op::Log(a) => {
                let av = self.value(*a);
                let ga = zip_map(g, av, |gy, x| gy / x);
                Self::accumulate(adj, *a, ga);
            }
            Op::Sqrt(a) => {
                let yv = &node.value;
                let two = S::from_f64(2.0);
                let ga = zip_map(g, yv, |gy, y| gy / (two * y));
                Self::accumulate(adj, *a, ga);
            }
            Op::Affine(a, scale, _) => {
                let s = *scale;
                Self::accumulate(adj, *a, g.map(|x| x * s));
            }
            Op::Sum(a) => {
                let gy = g.item();
                Self::accumulate(adj, *a, Tensor::full(self.value(*a).shape(), gy));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                let gy = g.item() / S::from_usize(n);
                Self::accumulate(adj, *a, Tensor::full(self.value(*a).shape(), gy));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let dg = g.data();
                let mut col = 0usize;
                for &p in parts {
                    let m = self.value(p).shape()[1];
                    let mut gp = vec![S::zero(); n * m];
                    for i in 0..n {
                        gp[i * m..(i + 1) * m]
                            .copy_from_slice(&dg[i * total + col..i * total + col + m]);
                    }
                    Self::accumulate(adj, p, Tensor::new(vec![n, m], gp).unwrap());
                    col += m;
                }
            }
            Op::SliceRows(a, start, len) => {
                let sa = self.value(*a).shape().to_vec();
                let m = sa[1];
                let mut ga = vec![S::zero(); sa[0] * m];
                ga[start * m..(start + len) * m].copy_from_slice(g.data());
                Self::accumulate(adj, *a, Tensor::new(sa, ga).unwrap());
            }
            Op::GatherRows(a, rows) => {
                let sa = self.value(*a).shape().to_vec();
                let m = if sa.len() == 2 { sa[1] } else { 1 };
                let mut ga = vec![S::zero(); self.value(*a).numel()];
                let dg = g.data();
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..m {
                        ga[r * m + j] += dg[i * m + j];
                    }
                }
                Self::accumulate(adj, *a, Tensor::new(sa, ga).unwrap());
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshaped(self.value(*a).shape().to_vec()).unwrap();
                Self::accumulate(adj, *a, ga);
            }
            Op::RowsToChw(a, h, w) => {
                let c = self.value(*a).shape()[1];
                let (h, w) = (*h, *w);
                let dg = g.data();
                let mut ga = vec![S::zero(); h * w * c];
                for ch in 0..c {
                    for p in 0..h * w {
                        ga[p * c + ch] = dg[ch * h * w + p];
                    }
                }
                Self::accumulate(adj, *a, Tensor::new(vec![h * w, c], ga).unwrap());
            }
            Op::ChwToRows(a) => {
                let sa = self.value(*a).shape().to_vec();
                let (c, h, w) = (sa[0], sa[1], sa[2]);
                let dg = g.data();
                let mut ga = vec![S::zero(); c * h * w];
                for p in 0..h * w {
                    for ch in 0..c {
                        ga[ch * h * w + p] = dg[p * c + ch];
                    }
                }
                Self::accumulate(adj, *a, Tensor::new(sa, ga).unwrap());
            }
            Op::ConcatChannels(parts) => {
                let dg = g.data();
                let mut offset = 0usize;
                for &p in parts {
                    let n = self.value(p).numel();
                    let gp = dg[offset..offset + n].to_vec();
                    Self::accumulate(
                        adj,
                        p,
                        Tensor::new(self.value(p).shape().to_vec(), gp).unwrap(),
                    );
                    offset += n;
                }
            }
            Op::Conv2d { input, weight, bias, stride, pad } => {
                let si = self.value(*input).shape().to_vec();
                let sw = self.value(*weight).shape().to_vec();
                let (c_in, h, w) = (si[0], si[1], si[2]);
                let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
                let so = node.value.shape().to_vec();
                let (oh, ow) = (so[1], so[2]);
                let di = self.value(*input).data();
                let dw = self.value(*weight).data();
                let dg = g.data();
                let mut gi = vec![0.0f64; c_in * h * w];
                let mut gw = vec![0.0f64; c_out * c_in * kh * kw];
                let mut gb = vec![0.0f64; c_out];
                for o in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gy = dg[o * oh * ow + oy * ow + ox].as_f64();
                            gb[o] += gy;
                            for c in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let ii = c * h * w + iy as usize * w + ix as usize;
                                        let wi = ((o * c_in + c) * kh + ky) * kw + kx;
                                        gi[ii] += dw[wi].as_f64() * gy;
                                        gw[wi] += di[ii].as_f64() * gy;
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accumulate(
                    adj,
                    *input,
                    Tensor::new(si, gi.iter().map(|&v| S::from_f64(v)).collect()).unwrap(),
                );
                Self::accumulate(
                    adj,
                    *weight,
                    Tensor::new(sw, gw.iter().map(|&v| S::from_f64(v)).collect()).unwrap(),
                );
                if let Some(b) = bias {
                    Self::accumulate(
                        adj,
                        *b,
                        Tensor::from_vec(gb.iter().map(|&v| S::from_f64(v)).collect()),
                    );
                }
            }
            Op::Upsample2x(a) => {
                let sa = self.value(*a).shape().to_vec();
                let (c, h, w) = (sa[0], sa[1], sa[2]);
                let dg = g.data();
                let mut ga = vec![0.0f64; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            ga[ch * h * w + (y / 2) * w + x / 2] +=
                                dg[ch * 4 * h * w + y * 2 * w + x].as_f64();
                        }
                    }
                }
                Self::accumulate(
                    adj,
                    *a,
                    Tensor::new(sa, ga.iter().map(|&v| S::from_f64(v)).collect()).unwrap(),
                );
            }
            Op::ClampUnit(a) => {
                let av = self.value(*a);
                let ga = zip_map(g, av, |gy, x| {
                    if x >= S::zero() && x <= S::one() {
                        gy
                    } else {
                        S::zero()
                    }
                });
                Self::accumulate(adj, *a, ga);
            }
            Op::BilinearSample { img, coords } => {
                let si = self.value(*img).shape().to_vec();
                let (h, w, c) = (si[0], si[1], si[2]);
                let dc = self.value(*coords).data();
                let di = self.value(*img).data();
                let dg = g.data();
                let n = self.value(*coords).shape()[0];
                let mut gi = vec![0.0f64; h * w * c];
                let mut gc = vec![0.0f64; n * 2];
                for i in 0..n {
                    let x = dc[i * 2].as_f64();
                    let y = dc[i * 2 + 1].as_f64();
                    let taps = bilinear_taps(x, y, h, w);
                    for ch in 0..c {
                        let gy = dg[i * c + ch].as_f64();
                        let mut dx = 0.0f64;
                        let mut dy = 0.0f64;
                        for t in &taps {
                            let v = di[(t.row * w + t.col) * c + ch].as_f64();
                            gi[(t.row * w + t.col) * c + ch] += t.weight * gy;
                            dx += t.dwx * v;
                            dy += t.dwy * v;
                        }
                        gc[i * 2] += gy * dx;
                        gc[i * 2 + 1] += gy * dy;
                    }
                }
                Self::accumulate(
                    adj,
                    *img,
                    Tensor::new(si, gi.iter().map(|&v| S::from_f64(v)).collect()).unwrap(),
                );
                Self::accumulate(
                    adj,
                    *coords,
                    Tensor::new(vec![n, 2], gc.iter().map(|&v| S::from_f64(v)).collect()).unwrap(),
                );
            }
            Op::DepthProject { log_depth, proj } => {
                let d = self.value(*log_depth).data();
                let dg = g.data();
                let n = d.len();
                let mut gl = vec![S::zero(); n];
                for i in 0..n {
                    let depth = d[i].as_f64().exp();
                    let q = proj.rot_rays[i];
                    let t = proj.translation;
                    let x = depth * q[0] + t[0];
                    let y = depth * q[1] + t[1];
                    let z = depth * q[2] + t[2];
                    if z <= proj.eps_z {
                        continue;
                    }
                    let du_dd = proj.fx * (q[0] * z - x * q[2]) / (z * z);
                    let dv_dd = proj.fy * (q[1] * z - y * q[2]) / (z * z);
                    let gd = dg[i * 2].as_f64() * du_dd + dg[i * 2 + 1].as_f64() * dv_dd;
                    gl[i] = S::from_f64(gd * depth); // chain through exp
                }
                Self::accumulate(adj, *log_depth, Tensor::from_vec(gl));
            }
            Op::PasteRows { base: _, rows, src } => {
                let m = self.value(*src).shape()[1];
                let dg = g.data();
                let mut gs = Vec::with_capacity(rows.len() * m);
                for &r in rows {
                    gs.extend_from_slice(&dg[r * m..r * m + m]);
                }
                Self::accumulate(adj, *src, Tensor::new(vec![rows.len(), m], gs).unwrap());
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

/// Elementwise combine with the limited broadcasting the tape supports.
fn broadcast_zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    if a.shape() == b.shape() {
        return zip_map(a, b, f);
    }
    if b.numel() == 1 {
        let y = b.item();
        return a.map(|x| f(x, y));
    }
    if a.numel() == 1 {
        let x = a.item();
        return b.map(|y| f(x, y));
    }
    // [N,C] combined with [N,1]
    let (n, c) = (a.shape()[0], a.shape()[1]);
    let da = a.data();
    let db = b.data();
    let out: Vec<S> = (0..n * c).map(|i| f(da[i], db[i / c])).collect();
    Tensor::new(vec![n, c], out).unwrap()
}

/// Sum a gradient down to the shape of a broadcast operand.
fn reduce_to<S: Scalar>(g: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g.clone();
    }
    let target: usize = shape.iter().product();
    if target == 1 {
        return Tensor::scalar(S::from_f64(g.sum_f64())).reshaped(shape.to_vec()).unwrap();
    }
    // [N,C] -> [N,1]
    let (n, c) = (g.shape()[0], g.shape()[1]);
    debug_assert_eq!(shape, &[n, 1]);
    let dg = g.data();
    let mut out = vec![S::zero(); n];
    for i in 0..n {
        let mut acc = 0.0f64;
        for j in 0..c {
            acc += dg[i * c + j].as_f64();
        }
        out[i] = S::from_f64(acc);
    }
    Tensor::new(vec![n, 1], out).unwrap()
}

struct Tap {
    row: usize,
    col: usize,
    weight: f64,
    dwx: f64,
    dwy: f64,
}

/// The four taps of a bilinear sample at (x, y), clamped to the border.
fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [Tap; 4] {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor().min((w - 1) as f64 - 1.0).max(0.0);
    let y0 = yc.floor().min((h - 1) as f64 - 1.0).max(0.0);
    let x0 = if w == 1 { 0.0 } else { x0 };
    let y0 = if h == 1 { 0.0 } else { y0 };
    let fx = xc - x0;
    let fy = yc - y0;
    let (c0, c1) = (x0 as usize, (x0 as usize + 1).min(w - 1));
    let (r0, r1) = (y0 as usize, (y0 as usize + 1).min(h - 1));
    // derivative of the clamp is dropped at the border; inside the image
    // the weights are exact
    [
        Tap { row: r0, col: c0, weight: (1.0 - fx) * (1.0 - fy), dwx: -(1.0 - fy), dwy: -(1.0 - fx) },
        Tap { row: r0, col: c1, weight: fx * (1.0 - fy), dwx: 1.0 - fy, dwy: -fx },
        Tap { row: r1, col: c0, weight: (1.0 - fx) * fy, dwx: -fy, dwy: 1.0 - fx },
        Tap { row: r1, col: c1, weight: fx * fy, dwx: fy, dwy: fx },
    ]
}

// ---- gradient checking ----

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error over coordinates with a trustworthy difference
    /// quotient.
    pub max_rel_err: f64,
    /// Coordinates where halving the step changed the quotient too much
    /// (a kink or severe cancellation); excluded from `max_rel_err`.
    pub unreliable: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// at `point`. `f` builds a scalar loss from a single parameter node.
pub fn grad_check<S: Scalar>(
    f: &dyn Fn(&mut Tape<S>, NodeId) -> NodeId,
    point: &Tensor<S>,
    step: f64,
    _tolerance: f64,
) -> GradCheckReport {
    let eval = |t: &Tensor<S>| -> f64 {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), t.clone());
        let loss = f(&mut tape, p);
        tape.value(loss).item().as_f64()
    };

    let mut tape = Tape::new();
    let p = tape.param(ParamId(0), point.clone());
    let loss = f(&mut tape, p);
    let grads = tape.backward(loss).expect("grad_check loss must be scalar");
    let analytic = grads.by_param(ParamId(0)).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut max_rel = 0.0f64;
    let mut unreliable = 0usize;
    let mut checked = 0usize;
    for i in 0..point.numel() {
        let fd = |h: f64| -> f64 {
            let mut plus = point.clone();
            plus.data_mut()[i] = plus.data()[i] + S::from_f64(h);
            let mut minus = point.clone();
            minus.data_mut()[i] = minus.data()[i] - S::from_f64(h);
            (eval(&plus) - eval(&minus)) / (2.0 * h)
        };
        let fd1 = fd(step);
        let fd2 = fd(step / 2.0);
        let scale = fd1.abs().max(fd2.abs()).max(1e-8);
        if (fd1 - fd2).abs() > 0.05 * scale {
            unreliable += 1;
            continue;
        }
        let a = analytic.data()[i].as_f64();
        let denom = a.abs().max(fd2.abs()).max(1e-8);
        let rel = (a - fd2).abs() / denom;
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    GradCheckReport { max_rel_err: max_rel, unreliable, checked }
}
