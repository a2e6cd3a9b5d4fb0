//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records each operation as a node; [`Tape::backward`] walks the
//! tape in reverse and accumulates gradients. Gradients are only accumulated
//! into nodes that require them, so frozen parameters enter the graph as
//! constants: gradient flows *through* their operations but never *into*
//! them. Every op is deterministic — the same inputs produce bitwise
//! identical values and gradients.

use ndarray::{concatenate, s, Array2, Axis};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    /// C = A · B
    Matmul { a: NodeId, b: NodeId },
    /// C = A · Bᵀ
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    /// X + v, v a 1×c row broadcast over the rows of X.
    AddRow { x: NodeId, v: NodeId },
    /// X ⊙ v, v a 1×c row broadcast over the rows of X.
    MulRow { x: NodeId, v: NodeId },
    /// scale·x + shift, elementwise. The shift is recorded for completeness
    /// but drops out of the derivative.
    Affine {
        x: NodeId,
        scale: f64,
        #[allow(dead_code)]
        shift: f64,
    },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Log { x: NodeId },
    /// Gradient passes only where lo ≤ x ≤ hi.
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Sigmoid { x: NodeId },
    /// tanh-approximation GELU.
    Gelu { x: NodeId },
    /// Row-wise normalization over features; xhat/inv_std cached at forward.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows { x: NodeId },
    /// Y[i] = X[indices[i]]; backward scatter-adds, so repeated indices are fine.
    GatherRows { x: NodeId, indices: Vec<usize> },
    NarrowCols { x: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    /// Non-overlapping transposed convolution: each token row of X expands to
    /// a stride×stride pixel block via its own column block of W.
    PatchExpand { x: NodeId, w: NodeId, grid: usize, stride: usize },
    /// Spatial 2× bilinear upsampling of the matrix itself (half-pixel centers).
    BilinearUp2 { x: NodeId },
    Reshape { x: NodeId },
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, if any was accumulated.
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on a non-1×1 node");
        v[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array2<f64>, trainable: bool) -> NodeId {
        self.push(value, Op::Leaf, trainable)
    }

    /// Leaf that receives gradient.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.leaf(value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimensions");
        let value = va.dot(vb);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Matmul { a, b }, rg)
    }

    /// A · Bᵀ without materializing the transpose on the tape.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt inner dimensions");
        let value = va.dot(&vb.t());
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatmulNT { a, b }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.dim(), vb.dim(), "add shape");
        let value = va + vb;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.dim(), vb.dim(), "sub shape");
        let value = va - vb;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.dim(), vb.dim(), "mul shape");
        let value = va * vb;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul { a, b }, rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        assert_eq!(va.dim(), vb.dim(), "div shape");
        let value = va / vb;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Div { a, b }, rg)
    }

    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        assert_eq!(vv.dim(), (1, vx.ncols()), "add_row vector shape");
        let value = vx + vv;
        let rg = self.rg(&[x, v]);
        self.push(value, Op::AddRow { x, v }, rg)
    }

    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        assert_eq!(vv.dim(), (1, vx.ncols()), "mul_row vector shape");
        let value = vx * vv;
        let rg = self.rg(&[x, v]);
        self.push(value, Op::MulRow { x, v }, rg)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale, shift }, rg)
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.affine(x, k, 0.0)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Array2::from_elem((1, 1), self.nodes[x.0].value.sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let value = Array2::from_elem((1, 1), vx.sum() / vx.len() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean { x }, rg)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(f64::ln);
        let rg = self.rg(&[x]);
        self.push(value, Op::Log { x }, rg)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(gelu_fn);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu { x }, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let vg = &self.nodes[gamma.0].value;
        let vb = &self.nodes[beta.0].value;
        let (rows, c) = vx.dim();
        assert_eq!(vg.dim(), (1, c), "layer_norm gamma shape");
        assert_eq!(vb.dim(), (1, c), "layer_norm beta shape");
        let mut xhat = Array2::zeros((rows, c));
        let mut inv_std = vec![0.0; rows];
        let mut out = Array2::zeros((rows, c));
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[[r, j]] = xh;
                out[[r, j]] = xh * vg[[0, j]] + vb[[0, j]];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (rows, c) = vx.dim();
        let mut out = Array2::zeros((rows, c));
        for r in 0..rows {
            let row = vx.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[[r, j]] = e;
                denom += e;
            }
            for j in 0..c {
                out[[r, j]] /= denom;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows { x }, rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let c = vx.ncols();
        let mut out = Array2::zeros((indices.len(), c));
        for (i, &src) in indices.iter().enumerate() {
            assert!(src < vx.nrows(), "gather_rows index out of range");
            out.row_mut(i).assign(&vx.row(src));
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::GatherRows { x, indices: indices.to_vec() }, rg)
    }

    pub fn narrow_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert!(start + len <= vx.ncols(), "narrow_cols out of range");
        let value = vx.slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[x]);
        self.push(value, Op::NarrowCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols row counts");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows col counts");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    /// X: (grid², c_in) token rows; W: (c_in, stride²·c_out) with one column
    /// block per in-block pixel offset. Output: ((grid·stride)², c_out) where
    /// row (gr·stride+dr)·(grid·stride) + (gc·stride+dc) holds token
    /// (gr,gc)'s projection through offset (dr,dc). Add bias via `add_row`.
    pub fn patch_expand(&mut self, x: NodeId, w: NodeId, grid: usize, stride: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let c_in = vx.ncols();
        assert_eq!(vx.nrows(), grid * grid, "patch_expand token count");
        assert_eq!(vw.nrows(), c_in, "patch_expand weight rows");
        assert_eq!(vw.ncols() % (stride * stride), 0, "patch_expand weight cols");
        let c_out = vw.ncols() / (stride * stride);
        let side = grid * stride;
        let mut out = Array2::zeros((side * side, c_out));
        for gr in 0..grid {
            for gc in 0..grid {
                let t = gr * grid + gc;
                for dr in 0..stride {
                    for dc in 0..stride {
                        let block = (dr * stride + dc) * c_out;
                        let o = (gr * stride + dr) * side + (gc * stride + dc);
                        for co in 0..c_out {
                            let mut acc = 0.0;
                            for ci in 0..c_in {
                                acc += vx[[t, ci]] * vw[[ci, block + co]];
                            }
                            out[[o, co]] = acc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        self.push(out, Op::PatchExpand { x, w, grid, stride }, rg)
    }

    pub fn bilinear_up2(&mut self, x: NodeId) -> NodeId {
        let value = bilinear_upsample2(&self.nodes[x.0].value);
        let rg = self.rg(&[x]);
        self.push(value, Op::BilinearUp2 { x }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert_eq!(vx.len(), rows * cols, "reshape element count");
        let data: Vec<f64> = vx.iter().cloned().collect();
        let value = Array2::from_shape_vec((rows, cols), data).unwrap();
        let rg = self.rg(&[x]);
        self.push(value, Op::Reshape { x }, rg)
    }

    /// Accumulate d(root)/d(node) for every node that requires gradient.
    /// `root` must be 1×1.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let n = self.nodes.len();
        assert_eq!(self.nodes[root.0].value.dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::MatmulNT { a, b } => {
                    let da = g.dot(&self.nodes[b.0].value);
                    let db = g.t().dot(&self.nodes[a.0].value);
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, -g);
                }
                Op::Mul { a, b } => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Div { a, b } => {
                    let vb = &self.nodes[b.0].value;
                    let va = &self.nodes[a.0].value;
                    let da = &g / vb;
                    let db = -(&g * va / (vb * vb));
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::AddRow { x, v } => {
                    let dv = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(&mut grads, *x, g);
                    self.accum(&mut grads, *v, dv);
                }
                Op::MulRow { x, v } => {
                    let vx = &self.nodes[x.0].value;
                    let vv = &self.nodes[v.0].value;
                    let dx = &g * vv;
                    let dv = (&g * vx).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *v, dv);
                }
                Op::Affine { x, scale, .. } => {
                    self.accum(&mut grads, *x, g.mapv(|v| v * scale));
                }
                Op::Sum { x } => {
                    let dx = Array2::from_elem(self.nodes[x.0].value.dim(), g[[0, 0]]);
                    self.accum(&mut grads, *x, dx);
                }
                Op::Mean { x } => {
                    let vx = &self.nodes[x.0].value;
                    let dx = Array2::from_elem(vx.dim(), g[[0, 0]] / vx.len() as f64);
                    self.accum(&mut grads, *x, dx);
                }
                Op::Log { x } => {
                    let dx = &g / &self.nodes[x.0].value;
                    self.accum(&mut grads, *x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let vx = &self.nodes[x.0].value;
                    let mut dx = g;
                    dx.zip_mut_with(vx, |gv, &xv| {
                        if xv < *lo || xv > *hi {
                            *gv = 0.0;
                        }
                    });
                    self.accum(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[i].value;
                    let dx = &g * &(y * &y.mapv(|v| 1.0 - v));
                    self.accum(&mut grads, *x, dx);
                }
                Op::Gelu { x } => {
                    let vx = &self.nodes[x.0].value;
                    let dx = &g * &vx.mapv(gelu_grad_fn);
                    self.accum(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let vg = &self.nodes[gamma.0].value;
                    let (rows, c) = g.dim();
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let mut dx = Array2::zeros((rows, c));
                    for r in 0..rows {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxh = g[[r, j]] * vg[[0, j]];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[[r, j]];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        for j in 0..c {
                            let dxh = g[[r, j]] * vg[[0, j]];
                            dx[[r, j]] =
                                inv_std[r] * (dxh - mean_dxhat - xhat[[r, j]] * mean_dxhat_xhat);
                        }
                    }
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *gamma, dgamma);
                    self.accum(&mut grads, *beta, dbeta);
                }
                Op::SoftmaxRows { x } => {
                    let y = &self.nodes[i].value;
                    let (rows, c) = y.dim();
                    let mut dx = Array2::zeros((rows, c));
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dot += g[[r, j]] * y[[r, j]];
                        }
                        for j in 0..c {
                            dx[[r, j]] = y[[r, j]] * (g[[r, j]] - dot);
                        }
                    }
                    self.accum(&mut grads, *x, dx);
                }
                Op::GatherRows { x, indices } => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for (i_out, &src) in indices.iter().enumerate() {
                        let grow = g.row(i_out);
                        dx.row_mut(src).zip_mut_with(&grow, |a, b| *a += b);
                    }
                    self.accum(&mut grads, *x, dx);
                }
                Op::NarrowCols { x, start } => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    self.accum(&mut grads, *x, dx);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let dp = g.slice(s![.., offset..offset + w]).to_owned();
                        self.accum(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.nodes[p.0].value.nrows();
                        let dp = g.slice(s![offset..offset + h, ..]).to_owned();
                        self.accum(&mut grads, p, dp);
                        offset += h;
                    }
                }
                Op::PatchExpand { x, w, grid, stride } => {
                    let vx = &self.nodes[x.0].value;
                    let vw = &self.nodes[w.0].value;
                    let c_in = vx.ncols();
                    let c_out = vw.ncols() / (stride * stride);
                    let side = grid * stride;
                    let mut dx = Array2::zeros(vx.dim());
                    let mut dw = Array2::zeros(vw.dim());
                    for gr in 0..*grid {
                        for gc in 0..*grid {
                            let t = gr * grid + gc;
                            for dr in 0..*stride {
                                for dc in 0..*stride {
                                    let block = (dr * stride + dc) * c_out;
                                    let o = (gr * stride + dr) * side + (gc * stride + dc);
                                    for co in 0..c_out {
                                        let go = g[[o, co]];
                                        for ci in 0..c_in {
                                            dx[[t, ci]] += go * vw[[ci, block + co]];
                                            dw[[ci, block + co]] += go * vx[[t, ci]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *w, dw);
                }
                Op::BilinearUp2 { x } => {
                    let (h, w) = self.nodes[x.0].value.dim();
                    let mut dx = Array2::zeros((h, w));
                    for o_r in 0..2 * h {
                        let (r0, r1, wr) = bilinear_taps(h, o_r);
                        for o_c in 0..2 * w {
                            let (c0, c1, wc) = bilinear_taps(w, o_c);
                            let gv = g[[o_r, o_c]];
                            dx[[r0, c0]] += (1.0 - wr) * (1.0 - wc) * gv;
                            dx[[r0, c1]] += (1.0 - wr) * wc * gv;
                            dx[[r1, c0]] += wr * (1.0 - wc) * gv;
                            dx[[r1, c1]] += wr * wc * gv;
                        }
                    }
                    self.accum(&mut grads, *x, dx);
                }
                Op::Reshape { x } => {
                    let dim = self.nodes[x.0].value.dim();
                    let data: Vec<f64> = g.iter().cloned().collect();
                    let dx = Array2::from_shape_vec(dim, data).unwrap();
                    self.accum(&mut grads, *x, dx);
                }
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

fn gelu_fn(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad_fn(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// Source taps for 2× upsampling with half-pixel centers: output index `o`
/// samples source coordinate (o+0.5)/2 − 0.5, border-clamped.
fn bilinear_taps(n: usize, o: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    let floor = src.floor();
    let frac = src - floor;
    let i0 = floor as isize;
    let lo = i0.clamp(0, n as isize - 1) as usize;
    let hi = (i0 + 1).clamp(0, n as isize - 1) as usize;
    (lo, hi, frac)
}

/// Spatial 2× bilinear upsampling of a matrix (rows and cols both doubled).
pub(crate) fn bilinear_upsample2(input: &Array2<f64>) -> Array2<f64> {
    let (h, w) = input.dim();
    let mut out = Array2::zeros((2 * h, 2 * w));
    for o_r in 0..2 * h {
        let (r0, r1, wr) = bilinear_taps(h, o_r);
        for o_c in 0..2 * w {
            let (c0, c1, wc) = bilinear_taps(w, o_c);
            out[[o_r, o_c]] = (1.0 - wr) * (1.0 - wc) * input[[r0, c0]]
                + (1.0 - wr) * wc * input[[r0, c1]]
                + wr * (1.0 - wc) * input[[r1, c0]]
                + wr * wc * input[[r1, c1]];
        }
    }
    out
}
