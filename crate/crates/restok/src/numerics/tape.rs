//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] records every primitive application in topological order.
//! Node values are immutable once written; [`Tape::backward`] walks the
//! list in reverse and visits each node exactly once. Nodes that do not
//! contribute to the root keep a zero (absent) gradient.

use std::sync::Arc;

use super::{BoolMat, Scalar, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a tape node. Ids are assigned in topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, T),
    MulScalar(NodeId, T),
    Sqrt(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    AddRowBcast {
        mat: NodeId,
        vec: NodeId,
    },
    SliceRows {
        a: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    GatherRows {
        a: NodeId,
        idx: Arc<Vec<usize>>,
    },
    Patchify {
        a: NodeId,
        h: usize,
        w: usize,
        f: usize,
    },
    Unpatchify {
        a: NodeId,
        h: usize,
        w: usize,
        f: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanRows(NodeId),
    Rotary {
        a: NodeId,
        cos: Arc<Vec<T>>,
        sin: Arc<Vec<T>>,
    },
    SoftmaxRowsMasked {
        a: NodeId,
        mask: Arc<BoolMat>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    AvgPool2d {
        a: NodeId,
        h: usize,
        w: usize,
        f: usize,
    },
    NearestResize {
        a: NodeId,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    },
    StopGrad(NodeId),
    CrossEntropyMean {
        logits: NodeId,
        targets: Arc<Vec<i64>>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    /// Forward-pass byproducts needed by backward (layer-norm statistics,
    /// cross-entropy probabilities).
    saved: Option<Arc<Vec<T>>>,
    op: Op<T>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.index()].as_deref()
    }

    /// Gradient of a node, densified to zeros when the node was unused.
    pub fn dense(&self, tape: &Tape<T>, id: NodeId) -> Vec<T> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![T::ZERO; tape.value(id).len()],
        }
    }
}

/// Records primitive applications for one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> NodeId {
        self.push_node(Node {
            shape,
            value: Arc::new(value),
            saved: None,
            op,
        })
    }

    fn push_node(&mut self, node: Node<T>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(node);
        id
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.index()].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.index()].shape
    }

    pub fn rows(&self, id: NodeId) -> usize {
        let s = self.shape(id);
        if s.len() <= 1 {
            1
        } else {
            s[..s.len() - 1].iter().product()
        }
    }

    pub fn cols(&self, id: NodeId) -> usize {
        *self.shape(id).last().unwrap_or(&1)
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        Tensor::from_shared(
            self.shape(id).to_vec(),
            Arc::clone(&self.nodes[id.index()].value),
        )
    }

    /// True when every node value on the tape is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.value.iter().all(|v| v.is_finite()))
    }

    // ---- leaves ---------------------------------------------------------

    /// Stages a tensor onto the tape without copying its storage.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push_node(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            saved: None,
            op: Op::Leaf,
        })
    }

    pub fn leaf_owned(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(&t)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.push(vec![1], vec![v], Op::Leaf)
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x / y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), v, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).iter().map(|&x| x + c).collect();
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), v, Op::MulScalar(a, c))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| x.sqrt()).collect();
        self.push(self.shape(a).to_vec(), v, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| x.maximum(T::ZERO)).collect();
        self.push(self.shape(a).to_vec(), v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        self.push(self.shape(a).to_vec(), v, Op::Gelu(a))
    }

    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        self.push_node(Node {
            shape: self.shape(a).to_vec(),
            value: Arc::clone(&self.nodes[a.index()].value),
            saved: None,
            op: Op::StopGrad(a),
        })
    }

    // ---- linear algebra -------------------------------------------------

    /// `C = op(A) * op(B)` where `ta`/`tb` transpose the operand views.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner extents {ka} vs {kb} (a {:?} ta={ta}, b {:?} tb={tb})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::ZERO; m * n];
        let (ars, acs) = view_strides(ar, ac, ta);
        let (brs, bcs) = view_strides(br, bc, tb);
        unsafe {
            T::gemm(
                m,
                ka,
                n,
                T::ONE,
                self.value(a).as_ptr(),
                ars,
                acs,
                self.value(b).as_ptr(),
                brs,
                bcs,
                T::ZERO,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }))
    }

    /// `[n, d] + [d]` broadcast along rows.
    pub fn add_row_bcast(&mut self, mat: NodeId, vec: NodeId) -> Result<NodeId> {
        let d = self.cols(mat);
        if self.value(vec).len() != d {
            return Err(Error::Dimension(format!(
                "row broadcast: matrix cols {d} vs vector len {}",
                self.value(vec).len()
            )));
        }
        let n = self.rows(mat);
        let mv = self.value(mat);
        let vv = self.value(vec);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                out.push(mv[r * d + c] + vv[c]);
            }
        }
        Ok(self.push(vec![n, d], out, Op::AddRowBcast { mat, vec }))
    }

    // ---- sequence shuffling ----------------------------------------------

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = (self.rows(a), self.cols(a));
        if start + len > n {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {}) out of {n}",
                start + len
            )));
        }
        let v = self.value(a)[start * d..(start + len) * d].to_vec();
        Ok(self.push(vec![len, d], v, Op::SliceRows { a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows of zero parts".into()));
        }
        let d = self.cols(parts[0]);
        let mut v = Vec::new();
        let mut n = 0;
        for &p in parts {
            if self.cols(p) != d {
                return Err(Error::Dimension(format!(
                    "concat_rows column mismatch {d} vs {}",
                    self.cols(p)
                )));
            }
            n += self.rows(p);
            v.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![n, d], v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = (self.rows(a), self.cols(a));
        if start + len > d {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {}) out of {d}",
                start + len
            )));
        }
        let av = self.value(a);
        let mut v = Vec::with_capacity(n * len);
        for r in 0..n {
            v.extend_from_slice(&av[r * d + start..r * d + start + len]);
        }
        Ok(self.push(vec![n, len], v, Op::SliceCols { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols of zero parts".into()));
        }
        let n = self.rows(parts[0]);
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        for &p in parts {
            if self.rows(p) != n {
                return Err(Error::Dimension(format!(
                    "concat_cols row mismatch {n} vs {}",
                    self.rows(p)
                )));
            }
        }
        let mut v = vec![T::ZERO; n * total];
        let mut off = 0;
        for &p in parts {
            let d = self.cols(p);
            let pv = self.value(p);
            for r in 0..n {
                v[r * total + off..r * total + off + d].copy_from_slice(&pv[r * d..(r + 1) * d]);
            }
            off += d;
        }
        Ok(self.push(vec![n, total], v, Op::ConcatCols(parts.to_vec())))
    }

    /// Row lookup: `out[i] = a[idx[i]]`. Gradient scatter-adds over duplicates.
    pub fn gather_rows(&mut self, a: NodeId, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let (n, d) = (self.rows(a), self.cols(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather_rows index {bad} out of {n} rows"
            )));
        }
        let av = self.value(a);
        let mut v = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            v.extend_from_slice(&av[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![idx.len(), d], v, Op::GatherRows { a, idx }))
    }

    /// `[h*w, c]` pixel rows into `[(h/f)*(w/f), f*f*c]` patch rows.
    pub fn patchify(&mut self, a: NodeId, h: usize, w: usize, f: usize) -> Result<NodeId> {
        let c = self.cols(a);
        check_grid(self.rows(a), h, w)?;
        if h % f != 0 || w % f != 0 {
            return Err(Error::Geometry(format!(
                "patchify: {h}x{w} not divisible by {f}"
            )));
        }
        let (gh, gw) = (h / f, w / f);
        let av = self.value(a);
        let mut v = vec![T::ZERO; gh * gw * f * f * c];
        for pi in 0..gh {
            for pj in 0..gw {
                let p = pi * gw + pj;
                for di in 0..f {
                    for dj in 0..f {
                        let src = ((pi * f + di) * w + (pj * f + dj)) * c;
                        let dst = p * f * f * c + (di * f + dj) * c;
                        v[dst..dst + c].copy_from_slice(&av[src..src + c]);
                    }
                }
            }
        }
        Ok(self.push(vec![gh * gw, f * f * c], v, Op::Patchify { a, h, w, f }))
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, a: NodeId, h: usize, w: usize, f: usize) -> Result<NodeId> {
        let fc = self.cols(a);
        if fc % (f * f) != 0 {
            return Err(Error::Dimension(format!(
                "unpatchify: cols {fc} not divisible by f*f = {}",
                f * f
            )));
        }
        let c = fc / (f * f);
        let (gh, gw) = (h / f, w / f);
        if h % f != 0 || w % f != 0 || self.rows(a) != gh * gw {
            return Err(Error::Geometry(format!(
                "unpatchify: {} patch rows vs grid {h}x{w} factor {f}",
                self.rows(a)
            )));
        }
        let av = self.value(a);
        let mut v = vec![T::ZERO; h * w * c];
        for pi in 0..gh {
            for pj in 0..gw {
                let p = pi * gw + pj;
                for di in 0..f {
                    for dj in 0..f {
                        let dst = ((pi * f + di) * w + (pj * f + dj)) * c;
                        let src = p * f * f * c + (di * f + dj) * c;
                        v[dst..dst + c].copy_from_slice(&av[src..src + c]);
                    }
                }
            }
        }
        Ok(self.push(vec![h * w, c], v, Op::Unpatchify { a, h, w, f }))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut s = T::ZERO;
        for &v in self.value(a) {
            s += v;
        }
        self.push(vec![1], vec![s], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let mut s = T::ZERO;
        for &v in self.value(a) {
            s += v;
        }
        let m = s * (T::ONE / T::from_f64(n as f64));
        self.push(vec![1], vec![m], Op::MeanAll(a))
    }

    /// Column means over rows: `[n, d] -> [1, d]` (global average pooling).
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let (n, d) = (self.rows(a), self.cols(a));
        let av = self.value(a);
        let inv = T::ONE / T::from_f64(n as f64);
        let mut out = vec![T::ZERO; d];
        for r in 0..n {
            for c in 0..d {
                out[c] += av[r * d + c];
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(vec![1, d], out, Op::MeanRows(a))
    }

    // ---- attention pieces -------------------------------------------------

    /// Rotates adjacent column pairs of `[n, d]` by per-row, per-pair angles.
    pub fn rotary(&mut self, a: NodeId, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>) -> Result<NodeId> {
        let (n, d) = (self.rows(a), self.cols(a));
        if d % 2 != 0 {
            return Err(Error::Dimension(format!(
                "rotary requires an even column count, got {d}"
            )));
        }
        let pairs = d / 2;
        if cos.len() != n * pairs || sin.len() != n * pairs {
            return Err(Error::Dimension(format!(
                "rotary table len {} vs {} rows x {} pairs",
                cos.len(),
                n,
                pairs
            )));
        }
        let av = self.value(a);
        let mut v = vec![T::ZERO; n * d];
        for r in 0..n {
            for p in 0..pairs {
                let (c, s) = (cos[r * pairs + p], sin[r * pairs + p]);
                let x = av[r * d + 2 * p];
                let y = av[r * d + 2 * p + 1];
                v[r * d + 2 * p] = x * c - y * s;
                v[r * d + 2 * p + 1] = x * s + y * c;
            }
        }
        Ok(self.push(vec![n, d], v, Op::Rotary { a, cos, sin }))
    }

    /// Row softmax restricted to mask-allowed columns; disallowed entries are
    /// exactly zero. Errors if any row allows nothing.
    pub fn softmax_rows_masked(&mut self, a: NodeId, mask: Arc<BoolMat>) -> Result<NodeId> {
        let (n, m) = (self.rows(a), self.cols(a));
        if mask.rows() != n || mask.cols() != m {
            return Err(Error::Dimension(format!(
                "mask {}x{} vs scores {n}x{m}",
                mask.rows(),
                mask.cols()
            )));
        }
        if let Some(row) = mask.empty_row() {
            return Err(Error::MaskedRow { row });
        }
        let av = self.value(a);
        let mut v = vec![T::ZERO; n * m];
        for r in 0..n {
            let row = &av[r * m..(r + 1) * m];
            let allowed = mask.row(r);
            let mut mx: Option<T> = None;
            for (j, &x) in row.iter().enumerate() {
                if allowed[j] {
                    mx = Some(match mx {
                        Some(cur) => cur.maximum(x),
                        None => x,
                    });
                }
            }
            let mx = mx.expect("non-empty row checked above");
            let mut z = T::ZERO;
            for j in 0..m {
                if allowed[j] {
                    let e = (row[j] - mx).exp();
                    v[r * m + j] = e;
                    z += e;
                }
            }
            let inv = T::ONE / z;
            for j in 0..m {
                if allowed[j] {
                    v[r * m + j] *= inv;
                }
            }
        }
        Ok(self.push(vec![n, m], v, Op::SoftmaxRowsMasked { a, mask }))
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (n, d) = (self.rows(x), self.cols(x));
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Dimension(format!(
                "layer_norm: feature dim {d} vs gamma {} / beta {}",
                self.value(gamma).len(),
                self.value(beta).len()
            )));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_d = T::ONE / T::from_f64(d as f64);
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut v = vec![T::ZERO; n * d];
        let mut saved = vec![T::ZERO; 2 * n];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &x in row {
                mean += x;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for &x in row {
                let c = x - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv_std = T::ONE / (var + eps).sqrt();
            saved[2 * r] = mean;
            saved[2 * r + 1] = inv_std;
            for c in 0..d {
                let xhat = (row[c] - mean) * inv_std;
                v[r * d + c] = xhat * gv[c] + bv[c];
            }
        }
        let id = self.push(vec![n, d], v, Op::LayerNorm { x, gamma, beta });
        self.nodes[id.index()].saved = Some(Arc::new(saved));
        Ok(id)
    }

    // ---- grid resampling ---------------------------------------------------

    /// Mean over `f x f` blocks of an `[h*w, c]` grid.
    pub fn avg_pool2d(&mut self, a: NodeId, h: usize, w: usize, f: usize) -> Result<NodeId> {
        let c = self.cols(a);
        check_grid(self.rows(a), h, w)?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Geometry(format!(
                "avg_pool2d: {h}x{w} not divisible by factor {f}"
            )));
        }
        let (oh, ow) = (h / f, w / f);
        let inv = T::ONE / T::from_f64((f * f) as f64);
        let av = self.value(a);
        let mut v = vec![T::ZERO; oh * ow * c];
        for i in 0..oh {
            for j in 0..ow {
                for di in 0..f {
                    for dj in 0..f {
                        let src = ((i * f + di) * w + (j * f + dj)) * c;
                        let dst = (i * ow + j) * c;
                        for ch in 0..c {
                            v[dst + ch] += av[src + ch];
                        }
                    }
                }
            }
        }
        v.iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(vec![oh * ow, c], v, Op::AvgPool2d { a, h, w, f }))
    }

    /// Nearest-neighbor resize of an `[h*w, c]` grid; the sample point is the
    /// top-left representative `floor(i * src / dst)`. Gradient scatters back
    /// to source cells, summing over duplicates.
    pub fn nearest_resize(
        &mut self,
        a: NodeId,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<NodeId> {
        let c = self.cols(a);
        check_grid(self.rows(a), h, w)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Geometry(format!(
                "nearest_resize to empty target {out_h}x{out_w}"
            )));
        }
        let av = self.value(a);
        let mut v = vec![T::ZERO; out_h * out_w * c];
        for i in 0..out_h {
            let si = i * h / out_h;
            for j in 0..out_w {
                let sj = j * w / out_w;
                let src = (si * w + sj) * c;
                let dst = (i * out_w + j) * c;
                v[dst..dst + c].copy_from_slice(&av[src..src + c]);
            }
        }
        Ok(self.push(
            vec![out_h * out_w, c],
            v,
            Op::NearestResize {
                a,
                h,
                w,
                out_h,
                out_w,
            },
        ))
    }

    // ---- losses -------------------------------------------------------------

    /// Mean cross-entropy over supervised rows; `target = -1` skips a row.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Arc<Vec<i64>>) -> Result<NodeId> {
        let (n, k) = (self.rows(logits), self.cols(logits));
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} rows vs {} targets",
                targets.len()
            )));
        }
        let supervised = targets.iter().filter(|&&t| t >= 0).count();
        if supervised == 0 {
            return Err(Error::Data("cross_entropy: no supervised rows".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k as i64) {
            return Err(Error::Data(format!(
                "cross_entropy: target {bad} out of {k} classes"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::ZERO; n * k];
        let mut loss = T::ZERO;
        for r in 0..n {
            let row = &lv[r * k..(r + 1) * k];
            let mut mx = row[0];
            for &x in row.iter() {
                mx = mx.maximum(x);
            }
            let mut z = T::ZERO;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[r * k + j] = e;
                z += e;
            }
            let inv = T::ONE / z;
            for j in 0..k {
                probs[r * k + j] *= inv;
            }
            let t = targets[r];
            if t >= 0 {
                loss -= (row[t as usize] - mx - z.ln()) * T::ONE;
            }
        }
        loss *= T::ONE / T::from_f64(supervised as f64);
        let id = self.push(vec![1], vec![loss], Op::CrossEntropyMean { logits, targets });
        self.nodes[id.index()].saved = Some(Arc::new(probs));
        Ok(id)
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from a scalar root. Visits nodes in strictly descending
    /// id order, so each node's gradient is complete before it propagates.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.index()] = Some(vec![T::ONE]);
        for id in (0..=root.index()).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(NodeId(id as u32), &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn ensure<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> &'a mut Vec<T> {
        let slot = &mut grads[id.index()];
        if slot.is_none() {
            *slot = Some(vec![T::ZERO; self.value(id).len()]);
        }
        slot.as_mut().unwrap()
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id.index()];
        match &node.op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                let ga = self.ensure(grads, *a);
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
                let gb = self.ensure(grads, *b);
                for (x, &gi) in gb.iter_mut().zip(g) {
                    *x += gi;
                }
            }
            Op::Sub(a, b) => {
                let ga = self.ensure(grads, *a);
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
                let gb = self.ensure(grads, *b);
                for (x, &gi) in gb.iter_mut().zip(g) {
                    *x -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                let ga = self.ensure(grads, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                let gb = self.ensure(grads, *b);
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                let ga = self.ensure(grads, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
                let gb = self.ensure(grads, *b);
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
            Op::AddScalar(a, _) => {
                let ga = self.ensure(grads, *a);
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                let ga = self.ensure(grads, *a);
                for (x, &gi) in ga.iter_mut().zip(g) {
                    *x += gi * c;
                }
            }
            Op::Sqrt(a) => {
                let out = node.value.clone();
                let half = T::from_f64(0.5);
                let ga = self.ensure(grads, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] * half / out[i];
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).to_vec();
                let ga = self.ensure(grads, *a);
                for i in 0..g.len() {
                    if av[i] > T::ZERO {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).to_vec();
                let ga = self.ensure(grads, *a);
                for i in 0..g.len() {
                    ga[i] += g[i] * gelu_bwd(av[i]);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = (self.rows(*a), self.cols(*a));
                let (br, bc) = (self.rows(*b), self.cols(*b));
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let (ars, acs) = view_strides(ar, ac, *ta);
                let (brs, bcs) = view_strides(br, bc, *tb);
                let av = self.value(*a).as_ptr();
                let bv = self.value(*b).as_ptr();
                // dA(view) += g * B(view)^T
                {
                    let ga = self.ensure(grads, *a);
                    unsafe {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::ONE,
                            g.as_ptr(),
                            n as isize,
                            1,
                            bv,
                            bcs,
                            brs,
                            T::ONE,
                            ga.as_mut_ptr(),
                            ars,
                            acs,
                        );
                    }
                }
                // dB(view) += A(view)^T * g
                {
                    let gb = self.ensure(grads, *b);
                    unsafe {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::ONE,
                            av,
                            acs,
                            ars,
                            g.as_ptr(),
                            n as isize,
                            1,
                            T::ONE,
                            gb.as_mut_ptr(),
                            brs,
                            bcs,
                        );
                    }
                }
            }
            Op::AddRowBcast { mat, vec } => {
                let d = self.cols(*mat);
                let n = self.rows(*mat);
                let gm = self.ensure(grads, *mat);
                for (x, &gi) in gm.iter_mut().zip(g) {
                    *x += gi;
                }
                let gv = self.ensure(grads, *vec);
                for r in 0..n {
                    for c in 0..d {
                        gv[c] += g[r * d + c];
                    }
                }
            }
            Op::SliceRows { a, start } => {
                let d = self.cols(*a);
                let ga = self.ensure(grads, *a);
                for (i, &gi) in g.iter().enumerate() {
                    ga[start * d + i] += gi;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let gp = self.ensure(grads, p);
                    for i in 0..len {
                        gp[i] += g[off + i];
                    }
                    off += len;
                }
            }
            Op::SliceCols { a, start } => {
                let d = self.cols(*a);
                let len = self.cols(id);
                let n = self.rows(id);
                let ga = self.ensure(grads, *a);
                for r in 0..n {
                    for c in 0..len {
                        ga[r * d + start + c] += g[r * len + c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.rows(id);
                let total = self.cols(id);
                let mut off = 0;
                for &p in parts {
                    let d = self.cols(p);
                    let gp = self.ensure(grads, p);
                    for r in 0..n {
                        for c in 0..d {
                            gp[r * d + c] += g[r * total + off + c];
                        }
                    }
                    off += d;
                }
            }
            Op::GatherRows { a, idx } => {
                let d = self.cols(*a);
                let ga = self.ensure(grads, *a);
                for (i, &src) in idx.iter().enumerate() {
                    for c in 0..d {
                        ga[src * d + c] += g[i * d + c];
                    }
                }
            }
            Op::Patchify { a, h, w, f } => {
                let (h, w, f) = (*h, *w, *f);
                let c = self.cols(*a);
                let (gh, gw) = (h / f, w / f);
                let ga = self.ensure(grads, *a);
                for pi in 0..gh {
                    for pj in 0..gw {
                        let p = pi * gw + pj;
                        for di in 0..f {
                            for dj in 0..f {
                                let src = ((pi * f + di) * w + (pj * f + dj)) * c;
                                let dst = p * f * f * c + (di * f + dj) * c;
                                for ch in 0..c {
                                    ga[src + ch] += g[dst + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Unpatchify { a, h, w, f } => {
                let (h, w, f) = (*h, *w, *f);
                let fc = self.cols(*a);
                let c = fc / (f * f);
                let (gh, gw) = (h / f, w / f);
                let ga = self.ensure(grads, *a);
                for pi in 0..gh {
                    for pj in 0..gw {
                        let p = pi * gw + pj;
                        for di in 0..f {
                            for dj in 0..f {
                                let dst = ((pi * f + di) * w + (pj * f + dj)) * c;
                                let src = p * f * f * c + (di * f + dj) * c;
                                for ch in 0..c {
                                    ga[src + ch] += g[dst + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                let ga = self.ensure(grads, *a);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let gi = g[0] * (T::ONE / T::from_f64(n as f64));
                let ga = self.ensure(grads, *a);
                for x in ga.iter_mut() {
                    *x += gi;
                }
            }
            Op::MeanRows(a) => {
                let (n, d) = (self.rows(*a), self.cols(*a));
                let inv = T::ONE / T::from_f64(n as f64);
                let ga = self.ensure(grads, *a);
                for r in 0..n {
                    for c in 0..d {
                        ga[r * d + c] += g[c] * inv;
                    }
                }
            }
            Op::Rotary { a, cos, sin } => {
                let d = self.cols(*a);
                let pairs = d / 2;
                let n = self.rows(*a);
                let ga = self.ensure(grads, *a);
                for r in 0..n {
                    for p in 0..pairs {
                        let (c, s) = (cos[r * pairs + p], sin[r * pairs + p]);
                        let gx = g[r * d + 2 * p];
                        let gy = g[r * d + 2 * p + 1];
                        // Inverse rotation.
                        ga[r * d + 2 * p] += gx * c + gy * s;
                        ga[r * d + 2 * p + 1] += gy * c - gx * s;
                    }
                }
            }
            Op::SoftmaxRowsMasked { a, mask } => {
                let (n, m) = (self.rows(*a), self.cols(*a));
                let p = node.value.clone();
                let ga = self.ensure(grads, *a);
                for r in 0..n {
                    let allowed = mask.row(r);
                    let mut dot = T::ZERO;
                    for j in 0..m {
                        if allowed[j] {
                            dot += p[r * m + j] * g[r * m + j];
                        }
                    }
                    for j in 0..m {
                        if allowed[j] {
                            ga[r * m + j] += p[r * m + j] * (g[r * m + j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (n, d) = (self.rows(*x), self.cols(*x));
                let saved = node.saved.as_ref().expect("layer_norm saved stats");
                let xv = self.value(*x).to_vec();
                let gv = self.value(*gamma).to_vec();
                let inv_d = T::ONE / T::from_f64(d as f64);
                {
                    let gx = self.ensure(grads, *x);
                    for r in 0..n {
                        let mean = saved[2 * r];
                        let inv_std = saved[2 * r + 1];
                        let mut sum_gh = T::ZERO;
                        let mut sum_ghx = T::ZERO;
                        for c in 0..d {
                            let xhat = (xv[r * d + c] - mean) * inv_std;
                            let gh = g[r * d + c] * gv[c];
                            sum_gh += gh;
                            sum_ghx += gh * xhat;
                        }
                        sum_gh *= inv_d;
                        sum_ghx *= inv_d;
                        for c in 0..d {
                            let xhat = (xv[r * d + c] - mean) * inv_std;
                            let gh = g[r * d + c] * gv[c];
                            gx[r * d + c] += inv_std * (gh - sum_gh - xhat * sum_ghx);
                        }
                    }
                }
                {
                    let gg = self.ensure(grads, *gamma);
                    for r in 0..n {
                        let mean = saved[2 * r];
                        let inv_std = saved[2 * r + 1];
                        for c in 0..d {
                            let xhat = (xv[r * d + c] - mean) * inv_std;
                            gg[c] += g[r * d + c] * xhat;
                        }
                    }
                }
                {
                    let gb = self.ensure(grads, *beta);
                    for r in 0..n {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::AvgPool2d { a, h, w, f } => {
                let (h, w, f) = (*h, *w, *f);
                let c = self.cols(*a);
                let (oh, ow) = (h / f, w / f);
                let inv = T::ONE / T::from_f64((f * f) as f64);
                let ga = self.ensure(grads, *a);
                for i in 0..oh {
                    for j in 0..ow {
                        let dst = (i * ow + j) * c;
                        for di in 0..f {
                            for dj in 0..f {
                                let src = ((i * f + di) * w + (j * f + dj)) * c;
                                for ch in 0..c {
                                    ga[src + ch] += g[dst + ch] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::NearestResize {
                a,
                h,
                w,
                out_h,
                out_w,
            } => {
                let (h, w, oh, ow) = (*h, *w, *out_h, *out_w);
                let c = self.cols(*a);
                let ga = self.ensure(grads, *a);
                for i in 0..oh {
                    let si = i * h / oh;
                    for j in 0..ow {
                        let sj = j * w / ow;
                        let src = (si * w + sj) * c;
                        let dst = (i * ow + j) * c;
                        for ch in 0..c {
                            ga[src + ch] += g[dst + ch];
                        }
                    }
                }
            }
            Op::CrossEntropyMean { logits, targets } => {
                let (n, k) = (self.rows(*logits), self.cols(*logits));
                let probs = node.saved.as_ref().expect("cross_entropy saved probs");
                let supervised = targets.iter().filter(|&&t| t >= 0).count();
                let inv = g[0] * (T::ONE / T::from_f64(supervised as f64));
                let gl = self.ensure(grads, *logits);
                for r in 0..n {
                    let t = targets[r];
                    if t < 0 {
                        continue;
                    }
                    for j in 0..k {
                        let delta = if j as i64 == t { T::ONE } else { T::ZERO };
                        gl[r * k + j] += (probs[r * k + j] - delta) * inv;
                    }
                }
            }
        }
    }
}

fn view_strides(rows: usize, cols: usize, transpose: bool) -> (isize, isize) {
    let _ = rows;
    if transpose {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

fn check_grid(rows: usize, h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Geometry(format!("empty grid {h}x{w}")));
    }
    if rows != h * w {
        return Err(Error::Geometry(format!(
            "grid {h}x{w} wants {} rows, got {rows}",
            h * w
        )));
    }
    Ok(())
}

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(0.797_884_560_802_865_4);
    let c1 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_bwd<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(0.797_884_560_802_865_4);
    let c1 = T::from_f64(0.044715);
    let three = T::from_f64(3.0);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c0 * (T::ONE + three * c1 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_all_transpose_combos() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&tensor(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(&tensor(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]));
        let c = tape.matmul(a, b, false, false).unwrap();
        assert_eq!(tape.value(c), &[58., 64., 139., 154.]);

        // A^T * B^T = (B * A)^T
        let at = tape.leaf(&tensor(vec![3, 2], vec![1., 4., 2., 5., 3., 6.]));
        let bt = tape.leaf(&tensor(vec![2, 3], vec![7., 9., 11., 8., 10., 12.]));
        let c2 = tape.matmul(at, bt, true, true).unwrap();
        assert_eq!(tape.value(c2), tape.value(c));
    }

    #[test]
    fn backward_visits_shared_inputs_once() {
        // y = (x + x) summed: dy/dx = 2 per element.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![2], vec![3., 4.]));
        let s = tape.add(x, x).unwrap();
        let y = tape.sum_all(s);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2., 2.]);
    }

    #[test]
    fn unused_nodes_have_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![2], vec![3., 4.]));
        let unused = tape.mul_scalar(x, 5.0);
        let y = tape.sum_all(x);
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1., 1.]);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![2], vec![3., 4.]));
        let frozen = tape.stop_grad(x);
        let prod = tape.mul(x, frozen).unwrap();
        let y = tape.sum_all(prod);
        let grads = tape.backward(y).unwrap();
        // d/dx x * const(x) = const(x)
        assert_eq!(grads.get(x).unwrap(), &[3., 4.]);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_and_zero_elsewhere() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![2, 3], vec![0.3, -1.0, 2.0, 1.0, 1.0, 1.0]));
        let mut mask = BoolMat::new_true(2, 3);
        mask.set(0, 1, false);
        let p = tape.softmax_rows_masked(x, Arc::new(mask)).unwrap();
        let v = tape.value(p);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] + v[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![1, 2], vec![0.0, 0.0]));
        let mask = BoolMat::new_false(1, 2);
        let err = tape.softmax_rows_masked(x, Arc::new(mask)).unwrap_err();
        assert!(matches!(err, Error::MaskedRow { row: 0 }));
    }

    #[test]
    fn avg_pool_matches_hand_mean() {
        let mut tape = Tape::<f64>::new();
        // 2x2 grid [1, 2; 3, 5], one channel.
        let x = tape.leaf(&tensor(vec![4, 1], vec![1., 2., 3., 5.]));
        let y = tape.avg_pool2d(x, 2, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[2.75]);
        let ident = tape.avg_pool2d(x, 2, 2, 1).unwrap();
        assert_eq!(tape.value(ident), tape.value(x));
        assert!(tape.avg_pool2d(x, 2, 2, 3).is_err());
    }

    #[test]
    fn nearest_resize_index_map() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![16, 1], (0..16).map(|v| v as f64).collect()));
        let down = tape.nearest_resize(x, 4, 4, 2, 2).unwrap();
        // picks (0,0), (0,2), (2,0), (2,2)
        assert_eq!(tape.value(down), &[0., 2., 8., 10.]);
        let same = tape.nearest_resize(x, 4, 4, 4, 4).unwrap();
        assert_eq!(tape.value(same), tape.value(x));
        let one = tape.leaf(&tensor(vec![1, 1], vec![7.0]));
        let up = tape.nearest_resize(one, 1, 1, 4, 4).unwrap();
        assert!(tape.value(up).iter().all(|&v| v == 7.0));
        assert!(tape.nearest_resize(x, 4, 4, 0, 2).is_err());
    }

    #[test]
    fn pool_of_upsample_is_identity_on_coarse_grid() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![4, 1], vec![1., -2., 3., 0.5]));
        let up = tape.nearest_resize(x, 2, 2, 4, 4).unwrap();
        let back = tape.avg_pool2d(up, 4, 4, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn patchify_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::from_fn(vec![16, 3], |i| i as f64));
        let p = tape.patchify(x, 4, 4, 2).unwrap();
        assert_eq!(tape.shape(p), &[4, 12]);
        let back = tape.unpatchify(p, 4, 4, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(&Tensor::zeros(vec![2, 8]));
        let loss = tape
            .cross_entropy_mean(logits, Arc::new(vec![3, -1]))
            .unwrap();
        assert!((tape.value(loss)[0] - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn rotary_zero_angle_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&tensor(vec![1, 4], vec![1., 2., 3., 4.]));
        let cos = Arc::new(vec![1.0, 1.0]);
        let sin = Arc::new(vec![0.0, 0.0]);
        let y = tape.rotary(x, cos, sin).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
}
