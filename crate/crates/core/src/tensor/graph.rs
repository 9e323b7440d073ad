//! Define-by-run tape: ops are recorded during the forward pass and replayed
//! in reverse for gradients. The tape is rebuilt for every forward pass and
//! confined to one thread; independent tapes may run concurrently.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on one [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Silu { a: usize },
    Matmul { a: usize, b: usize },
    SoftmaxRows { a: usize },
    LayerNorm { x: usize, scale: usize, shift: usize, eps: f64 },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    GatherRows { a: usize, axis: usize, idx: Arc<Vec<usize>> },
    Rope { a: usize, positions: Arc<Vec<f64>>, base: f64 },
    SumAll { a: usize },
    MeanAll { a: usize },
}

struct Node {
    dims: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    requires_grad: bool,
    op: Op,
}

/// Topologically ordered op records; every node's parents precede it.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; dims.len()];
    let mut acc = 1;
    for d in (0..dims.len()).rev() {
        strides[d] = acc;
        acc *= dims[d];
    }
    strides
}

fn broadcast_dims(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape(format!(
                "shapes {a:?} and {b:?} do not broadcast"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Strides of `dims` viewed in `out`-space: right-aligned, 0 on broadcast axes.
fn broadcast_strides(dims: &[usize], out: &[usize]) -> Vec<usize> {
    let native = row_major_strides(dims);
    let pad = out.len() - dims.len();
    let mut s = vec![0; out.len()];
    for i in 0..dims.len() {
        s[pad + i] = if dims[i] == 1 && out[pad + i] != 1 { 0 } else { native[i] };
    }
    s
}

/// Odometer walk over `out_dims`, yielding offsets into two parents.
fn for_each_pair(out_dims: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let numel: usize = out_dims.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_dims.len();
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_dims[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_dims[d];
            ib -= sb[d] * out_dims[d];
        }
    }
}

// Dense 2-D kernels. `mm`: C += A[m,k]·B[k,n]; `mm_nt`: C += A[m,n]·Bᵀ[n,k]
// with B given as [k,n]; `mm_tn`: C += Aᵀ[k,m]·B[m,n] with A given as [m,k].
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for (arow, orow) in a.chunks_exact(n).zip(out.chunks_exact_mut(k)).take(m) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(n)) {
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, dims: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            dims,
            data,
            grad: None,
            needs_grad,
            requires_grad: false,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a tensor as a leaf; its `requires_grad` flag decides whether
    /// backward accumulates a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        let id = self.push(t.dims().to_vec(), t.into_data(), rg, Op::Leaf);
        self.nodes[id.0].requires_grad = rg;
        id
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let dims = t.dims().to_vec();
        self.push(dims, t.into_data(), false, Op::Leaf)
    }

    pub fn dims(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].dims
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].dims.clone(), self.nodes[id.0].data.clone())
            .expect("node dims and data always agree")
    }

    pub fn zero_grads(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary(&mut self, a: NodeId, b: NodeId, op: fn(f64, f64) -> f64, rec: Op) -> Result<NodeId> {
        let out_dims = broadcast_dims(&self.nodes[a.0].dims, &self.nodes[b.0].dims)?;
        let sa = broadcast_strides(&self.nodes[a.0].dims, &out_dims);
        let sb = broadcast_strides(&self.nodes[b.0].dims, &out_dims);
        let mut data = vec![0.0; out_dims.iter().product()];
        if self.nodes[a.0].dims == self.nodes[b.0].dims {
            for ((o, &x), &y) in data
                .iter_mut()
                .zip(self.nodes[a.0].data.iter())
                .zip(self.nodes[b.0].data.iter())
            {
                *o = op(x, y);
            }
        } else {
            let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
            for_each_pair(&out_dims, &sa, &sb, |flat, ia, ib| {
                data[flat] = op(da[ia], db[ib]);
            });
        }
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out_dims, data, ng, rec))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let dims = self.nodes[a.0].dims.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(dims, data, ng, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let dims = self.nodes[a.0].dims.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(dims, data, ng, Op::AddScalar { a: a.0 })
    }

    /// SiLU activation, x·sigmoid(x). The one nonlinearity used in MLPs.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * sigmoid(x)).collect();
        let dims = self.nodes[a.0].dims.clone();
        let ng = self.nodes[a.0].needs_grad;
        self.push(dims, data, ng, Op::Silu { a: a.0 })
    }

    // ── Matmul ──────────────────────────────────────────────────────────

    /// `a`: [..., m, k]; `b`: [k, n] (shared weights, broadcast over leading
    /// axes) or [..., k, n] with identical leading axes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ad, bd) = (&self.nodes[a.0].dims, &self.nodes[b.0].dims);
        if ad.len() < 2 || bd.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank >= 2, got {ad:?} x {bd:?}"
            )));
        }
        let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
        let (bk, n) = (bd[bd.len() - 2], bd[bd.len() - 1]);
        let shared_b = bd.len() == 2;
        if k != bk || (!shared_b && ad[..ad.len() - 2] != bd[..bd.len() - 2]) {
            return Err(Error::Shape(format!("matmul shape mismatch: {ad:?} x {bd:?}")));
        }
        let batch: usize = ad[..ad.len() - 2].iter().product();
        let mut out_dims = ad[..ad.len() - 2].to_vec();
        out_dims.extend([m, n]);
        let mut data = vec![0.0; batch * m * n];
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        for bi in 0..batch {
            let bb = if shared_b { db.as_slice() } else { &db[bi * k * n..(bi + 1) * k * n] };
            mm(&da[bi * m * k..(bi + 1) * m * k], bb, m, k, n, &mut data[bi * m * n..(bi + 1) * m * n]);
        }
        let ng = self.needs(&[a.0, b.0]);
        Ok(self.push(out_dims, data, ng, Op::Matmul { a: a.0, b: b.0 }))
    }

    // ── Normalization ───────────────────────────────────────────────────

    /// Softmax along the trailing axis, stabilized by max-subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let dims = self.nodes[a.0].dims.clone();
        let n = *dims.last().ok_or_else(|| Error::Shape("softmax_rows on rank-0 tensor".into()))?;
        if n == 0 {
            return Err(Error::Shape("softmax_rows over empty trailing axis".into()));
        }
        let mut data = self.nodes[a.0].data.clone();
        for row in data.chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(dims, data, ng, Op::SoftmaxRows { a: a.0 }))
    }

    /// Per-row normalization over the trailing axis followed by an affine map;
    /// `scale`/`shift` have shape [d]. Adaptive variants pass unit scale and
    /// zero shift here and modulate outside.
    pub fn layer_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let dims = self.nodes[x.0].dims.clone();
        let d = *dims.last().ok_or_else(|| Error::Shape("layer_norm on rank-0 tensor".into()))?;
        if self.nodes[scale.0].dims != [d] || self.nodes[shift.0].dims != [d] {
            return Err(Error::Shape(format!(
                "layer_norm scale/shift must be [{d}], got {:?} / {:?}",
                self.nodes[scale.0].dims, self.nodes[shift.0].dims
            )));
        }
        let mut data = vec![0.0; self.nodes[x.0].data.len()];
        {
            let xs = &self.nodes[x.0].data;
            let sc = &self.nodes[scale.0].data;
            let sh = &self.nodes[shift.0].data;
            for (row, out) in xs.chunks_exact(d).zip(data.chunks_exact_mut(d)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    out[j] = (row[j] - mean) * inv * sc[j] + sh[j];
                }
            }
        }
        let ng = self.needs(&[x.0, scale.0, shift.0]);
        Ok(self.push(dims, data, ng, Op::LayerNorm { x: x.0, scale: scale.0, shift: shift.0, eps }))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let base = self.nodes[parts[0].0].dims.clone();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut axis_total = 0;
        for p in parts {
            let d = &self.nodes[p.0].dims;
            if d.len() != base.len()
                || d.iter().zip(base.iter()).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::Shape(format!(
                    "concat parts disagree off-axis: {base:?} vs {d:?}"
                )));
            }
            axis_total += d[axis];
        }
        let mut out_dims = base.clone();
        out_dims[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = vec![0.0; out_dims.iter().product()];
        let out_block = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let pd = &self.nodes[p.0];
            let p_block = pd.dims[axis] * inner;
            for o in 0..outer {
                let src = &pd.data[o * p_block..(o + 1) * p_block];
                data[o * out_block + offset..o * out_block + offset + p_block].copy_from_slice(src);
            }
            offset += p_block;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.needs(&ids);
        Ok(self.push(out_dims, data, ng, Op::Concat { parts: ids, axis }))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let dims = self.nodes[a.0].dims.clone();
        if axis >= dims.len() || start + len > dims[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {start}+{len}) on axis {axis} out of range for {dims:?}"
            )));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out_dims = dims.clone();
        out_dims[axis] = len;
        let in_block = dims[axis] * inner;
        let out_block = len * inner;
        let mut data = vec![0.0; outer * out_block];
        for o in 0..outer {
            let src = &self.nodes[a.0].data[o * in_block + start * inner..o * in_block + (start + len) * inner];
            data[o * out_block..(o + 1) * out_block].copy_from_slice(src);
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(out_dims, data, ng, Op::Slice { a: a.0, axis, start }))
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let dims = self.nodes[a.0].dims.clone();
        let rank = dims.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
        let out_strides = row_major_strides(&out_dims);
        // stride of input axis d inside the output layout
        let mut map_stride = vec![0usize; rank];
        for (opos, &d) in perm.iter().enumerate() {
            map_stride[d] = out_strides[opos];
        }
        let numel = self.nodes[a.0].data.len();
        let mut data = vec![0.0; numel];
        let mut coords = vec![0usize; rank];
        let mut of = 0usize;
        let src = &self.nodes[a.0].data;
        for flat in 0..numel {
            data[of] = src[flat];
            for d in (0..rank).rev() {
                coords[d] += 1;
                of += map_stride[d];
                if coords[d] < dims[d] {
                    break;
                }
                coords[d] = 0;
                of -= map_stride[d] * dims[d];
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(out_dims, data, ng, Op::Permute { a: a.0, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, a: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let numel: usize = dims.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {dims:?} changes element count",
                self.nodes[a.0].dims
            )));
        }
        let data = self.nodes[a.0].data.clone();
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(dims, data, ng, Op::Reshape { a: a.0 }))
    }

    /// Select rows along `axis`: out[.., j, ..] = a[.., idx[j], ..]. Indices
    /// may repeat (upsampling) — backward scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, axis: usize, idx: Arc<Vec<usize>>) -> Result<NodeId> {
        let dims = self.nodes[a.0].dims.clone();
        if axis >= dims.len() {
            return Err(Error::Shape(format!("gather axis {axis} out of range for {dims:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= dims[axis]) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for axis extent {}",
                dims[axis]
            )));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out_dims = dims.clone();
        out_dims[axis] = idx.len();
        let in_block = dims[axis] * inner;
        let out_block = idx.len() * inner;
        let mut data = vec![0.0; outer * out_block];
        let src = &self.nodes[a.0].data;
        for o in 0..outer {
            for (j, &i) in idx.iter().enumerate() {
                data[o * out_block + j * inner..o * out_block + (j + 1) * inner]
                    .copy_from_slice(&src[o * in_block + i * inner..o * in_block + (i + 1) * inner]);
            }
        }
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(out_dims, data, ng, Op::GatherRows { a: a.0, axis, idx }))
    }

    /// Rotary position encoding over adjacent feature pairs (2i, 2i+1) of the
    /// trailing axis; `positions[l]` is the angle index of row `l` along the
    /// second-to-last axis. Pure rotation: preserves per-pair norms exactly.
    pub fn rope(&mut self, a: NodeId, positions: Arc<Vec<f64>>, base: f64) -> Result<NodeId> {
        let dims = self.nodes[a.0].dims.clone();
        if dims.len() < 2 {
            return Err(Error::Shape(format!("rope needs rank >= 2, got {dims:?}")));
        }
        let d = dims[dims.len() - 1];
        let l = dims[dims.len() - 2];
        if d % 2 != 0 {
            return Err(Error::Shape(format!("rope feature dim {d} must be even")));
        }
        if positions.len() != l {
            return Err(Error::Shape(format!(
                "rope got {} positions for sequence length {l}",
                positions.len()
            )));
        }
        let mut data = self.nodes[a.0].data.clone();
        rope_apply(&mut data, &dims, &positions, base, false);
        let ng = self.nodes[a.0].needs_grad;
        Ok(self.push(dims, data, ng, Op::Rope { a: a.0, positions, base }))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let ng = self.nodes[a.0].needs_grad;
        self.push(vec![1], vec![s], ng, Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len().max(1) as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / n;
        let ng = self.nodes[a.0].needs_grad;
        self.push(vec![1], vec![s], ng, Op::MeanAll { a: a.0 })
    }

    // ── Composites ──────────────────────────────────────────────────────

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].dims != self.nodes[b.0].dims {
            return Err(Error::Shape(format!(
                "mse shape mismatch: {:?} vs {:?}",
                self.nodes[a.0].dims, self.nodes[b.0].dims
            )));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of `requires_grad` leaves
    /// accumulate across calls; `zero_grads` resets them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].dims
            )));
        }
        let n = self.nodes.len();
        // fresh sweep buffers so repeated backward calls accumulate exactly once
        let mut sweep: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        sweep[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = sweep[i].take() else { continue };
            self.propagate(i, &g, &mut sweep);
            if self.nodes[i].requires_grad {
                match &mut self.nodes[i].grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.iter()) {
                            *a += b;
                        }
                    }
                    None => self.nodes[i].grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accum(&self, sweep: &mut [Option<Vec<f64>>], target: usize, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let buf = sweep[target].get_or_insert_with(|| vec![0.0; self.nodes[target].data.len()]);
        add(buf);
    }

    fn propagate(&self, i: usize, g: &[f64], sweep: &mut [Option<Vec<f64>>]) {
        let out_dims = &self.nodes[i].dims;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate_b = matches!(self.nodes[i].op, Op::Sub { .. });
                for (p, negate) in [(*a, false), (*b, negate_b)] {
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    let sp = broadcast_strides(&self.nodes[p].dims, out_dims);
                    let zero = vec![0usize; out_dims.len()];
                    self.accum(sweep, p, |buf| {
                        for_each_pair(out_dims, &sp, &zero, |flat, ip, _| {
                            buf[ip] += if negate { -g[flat] } else { g[flat] };
                        });
                    });
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let sa = broadcast_strides(&self.nodes[a].dims, out_dims);
                let sb = broadcast_strides(&self.nodes[b].dims, out_dims);
                if self.nodes[a].needs_grad {
                    let db = &self.nodes[b].data;
                    self.accum(sweep, a, |buf| {
                        for_each_pair(out_dims, &sa, &sb, |flat, ia, ib| {
                            buf[ia] += g[flat] * db[ib];
                        });
                    });
                }
                if self.nodes[b].needs_grad {
                    let da = &self.nodes[a].data;
                    self.accum(sweep, b, |buf| {
                        for_each_pair(out_dims, &sa, &sb, |flat, ia, ib| {
                            buf[ib] += g[flat] * da[ia];
                        });
                    });
                }
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accum(sweep, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o += gv * c;
                    }
                });
            }
            Op::AddScalar { a } => {
                self.accum(sweep, *a, |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o += gv;
                    }
                });
            }
            Op::Silu { a } => {
                let xs = &self.nodes[*a].data;
                self.accum(sweep, *a, |buf| {
                    for ((o, &gv), &x) in buf.iter_mut().zip(g.iter()).zip(xs.iter()) {
                        let s = sigmoid(x);
                        *o += gv * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let ad = &self.nodes[a].dims;
                let bd = &self.nodes[b].dims;
                let (m, k) = (ad[ad.len() - 2], ad[ad.len() - 1]);
                let n = bd[bd.len() - 1];
                let shared_b = bd.len() == 2;
                let batch: usize = ad[..ad.len() - 2].iter().product();
                if self.nodes[a].needs_grad {
                    let db = &self.nodes[b].data;
                    self.accum(sweep, a, |buf| {
                        for bi in 0..batch {
                            let bb = if shared_b { db.as_slice() } else { &db[bi * k * n..(bi + 1) * k * n] };
                            mm_nt(&g[bi * m * n..(bi + 1) * m * n], bb, m, n, k, &mut buf[bi * m * k..(bi + 1) * m * k]);
                        }
                    });
                }
                if self.nodes[b].needs_grad {
                    let da = &self.nodes[a].data;
                    self.accum(sweep, b, |buf| {
                        for bi in 0..batch {
                            let ob = if shared_b { &mut buf[..] } else { &mut buf[bi * k * n..(bi + 1) * k * n] };
                            mm_tn(&da[bi * m * k..(bi + 1) * m * k], &g[bi * m * n..(bi + 1) * m * n], m, k, n, ob);
                        }
                    });
                }
            }
            Op::SoftmaxRows { a } => {
                let n = *out_dims.last().unwrap();
                let ys = &self.nodes[i].data;
                self.accum(sweep, *a, |buf| {
                    for ((orow, grow), yrow) in buf
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(ys.chunks_exact(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(&gv, &yv)| gv * yv).sum();
                        for j in 0..n {
                            orow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, scale, shift, eps } => {
                let (x, scale, shift, eps) = (*x, *scale, *shift, *eps);
                let d = *out_dims.last().unwrap();
                let xs = &self.nodes[x].data;
                let sc = &self.nodes[scale].data;
                if self.nodes[x].needs_grad {
                    self.accum(sweep, x, |buf| {
                        for ((xrow, grow), orow) in xs
                            .chunks_exact(d)
                            .zip(g.chunks_exact(d))
                            .zip(buf.chunks_exact_mut(d))
                        {
                            let df = d as f64;
                            let mean = xrow.iter().sum::<f64>() / df;
                            let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                            let inv = 1.0 / (var + eps).sqrt();
                            let mut dxhat_sum = 0.0;
                            let mut dxhat_dot = 0.0;
                            for j in 0..d {
                                let xhat = (xrow[j] - mean) * inv;
                                let dxhat = grow[j] * sc[j];
                                dxhat_sum += dxhat;
                                dxhat_dot += dxhat * xhat;
                            }
                            for j in 0..d {
                                let xhat = (xrow[j] - mean) * inv;
                                let dxhat = grow[j] * sc[j];
                                orow[j] += inv / df * (df * dxhat - dxhat_sum - xhat * dxhat_dot);
                            }
                        }
                    });
                }
                if self.nodes[scale].needs_grad {
                    self.accum(sweep, scale, |buf| {
                        for (xrow, grow) in xs.chunks_exact(d).zip(g.chunks_exact(d)) {
                            let df = d as f64;
                            let mean = xrow.iter().sum::<f64>() / df;
                            let var = xrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / df;
                            let inv = 1.0 / (var + eps).sqrt();
                            for j in 0..d {
                                buf[j] += grow[j] * (xrow[j] - mean) * inv;
                            }
                        }
                    });
                }
                if self.nodes[shift].needs_grad {
                    self.accum(sweep, shift, |buf| {
                        for grow in g.chunks_exact(d) {
                            for j in 0..d {
                                buf[j] += grow[j];
                            }
                        }
                    });
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let outer: usize = out_dims[..axis].iter().product();
                let inner: usize = out_dims[axis + 1..].iter().product();
                let out_block = out_dims[axis] * inner;
                let mut offset = 0;
                for &p in parts.iter() {
                    let p_block = self.nodes[p].dims[axis] * inner;
                    if self.nodes[p].needs_grad {
                        self.accum(sweep, p, |buf| {
                            for o in 0..outer {
                                let src = &g[o * out_block + offset..o * out_block + offset + p_block];
                                for (bv, &gv) in buf[o * p_block..(o + 1) * p_block].iter_mut().zip(src.iter()) {
                                    *bv += gv;
                                }
                            }
                        });
                    }
                    offset += p_block;
                }
            }
            Op::Slice { a, axis, start } => {
                let (a, axis, start) = (*a, *axis, *start);
                let in_dims = &self.nodes[a].dims;
                let outer: usize = in_dims[..axis].iter().product();
                let inner: usize = in_dims[axis + 1..].iter().product();
                let in_block = in_dims[axis] * inner;
                let out_block = out_dims[axis] * inner;
                self.accum(sweep, a, |buf| {
                    for o in 0..outer {
                        let dst = &mut buf[o * in_block + start * inner..o * in_block + start * inner + out_block];
                        for (bv, &gv) in dst.iter_mut().zip(g[o * out_block..(o + 1) * out_block].iter()) {
                            *bv += gv;
                        }
                    }
                });
            }
            Op::Permute { a, perm } => {
                let in_dims = &self.nodes[*a].dims;
                let rank = in_dims.len();
                let out_strides = row_major_strides(out_dims);
                let mut map_stride = vec![0usize; rank];
                for (opos, &d) in perm.iter().enumerate() {
                    map_stride[d] = out_strides[opos];
                }
                let numel = self.nodes[*a].data.len();
                let dims = in_dims.clone();
                self.accum(sweep, *a, |buf| {
                    let mut coords = vec![0usize; rank];
                    let mut of = 0usize;
                    for flat in 0..numel {
                        buf[flat] += g[of];
                        for d in (0..rank).rev() {
                            coords[d] += 1;
                            of += map_stride[d];
                            if coords[d] < dims[d] {
                                break;
                            }
                            coords[d] = 0;
                            of -= map_stride[d] * dims[d];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.accum(sweep, *a, |buf| {
                    for (bv, &gv) in buf.iter_mut().zip(g.iter()) {
                        *bv += gv;
                    }
                });
            }
            Op::GatherRows { a, axis, idx } => {
                let (a, axis) = (*a, *axis);
                let in_dims = &self.nodes[a].dims;
                let outer: usize = in_dims[..axis].iter().product();
                let inner: usize = in_dims[axis + 1..].iter().product();
                let in_block = in_dims[axis] * inner;
                let out_block = idx.len() * inner;
                let idx = idx.clone();
                self.accum(sweep, a, |buf| {
                    for o in 0..outer {
                        for (j, &src_row) in idx.iter().enumerate() {
                            let grow = &g[o * out_block + j * inner..o * out_block + (j + 1) * inner];
                            let brow = &mut buf[o * in_block + src_row * inner..o * in_block + (src_row + 1) * inner];
                            for (bv, &gv) in brow.iter_mut().zip(grow.iter()) {
                                *bv += gv;
                            }
                        }
                    }
                });
            }
            Op::Rope { a, positions, base } => {
                // transpose of a rotation is the inverse rotation
                let mut gr = g.to_vec();
                rope_apply(&mut gr, out_dims, positions, *base, true);
                self.accum(sweep, *a, |buf| {
                    for (bv, &gv) in buf.iter_mut().zip(gr.iter()) {
                        *bv += gv;
                    }
                });
            }
            Op::SumAll { a } => {
                let gv = g[0];
                self.accum(sweep, *a, |buf| {
                    for bv in buf.iter_mut() {
                        *bv += gv;
                    }
                });
            }
            Op::MeanAll { a } => {
                let n = self.nodes[*a].data.len().max(1) as f64;
                let gv = g[0] / n;
                self.accum(sweep, *a, |buf| {
                    for bv in buf.iter_mut() {
                        *bv += gv;
                    }
                });
            }
        }
    }
}

/// In-place pairwise rotation; `inverse` applies the transposed rotation.
fn rope_apply(data: &mut [f64], dims: &[usize], positions: &[f64], base: f64, inverse: bool) {
    let d = dims[dims.len() - 1];
    let l = dims[dims.len() - 2];
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-(2.0 * i as f64) / d as f64))
        .collect();
    for block in data.chunks_exact_mut(l * d) {
        for (row, &pos) in block.chunks_exact_mut(d).zip(positions.iter()) {
            for (pair, &f) in row.chunks_exact_mut(2).zip(freqs.iter()) {
                let angle = pos * f;
                let (sin, cos) = angle.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let (x0, x1) = (pair[0], pair[1]);
                pair[0] = x0 * cos - x1 * sin;
                pair[1] = x0 * sin + x1 * cos;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_orthogonal_vectors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = g.constant(t(&[2, 1], &[0.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn matmul_batched_matches_per_sample() {
        let mut rng = rng::from_seed(5);
        let a = Tensor::randn(vec![3, 2, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let an = g.constant(a.clone());
        let bn = g.constant(b.clone());
        let c = g.matmul(an, bn).unwrap();
        for bi in 0..3 {
            let mut g2 = Graph::new();
            let ai = g2.constant(t(&[2, 4], &a.data()[bi * 8..(bi + 1) * 8]));
            let bi2 = g2.constant(b.clone());
            let ci = g2.matmul(ai, bi2).unwrap();
            assert_eq!(&g.data(c)[bi * 10..(bi + 1) * 10], g2.data(ci));
        }
    }

    #[test]
    fn matmul_associative_on_random_triples() {
        let mut rng = rng::from_seed(11);
        for _ in 0..5 {
            let a = Tensor::randn(vec![4, 5], 0.5, &mut rng);
            let b = Tensor::randn(vec![5, 3], 0.5, &mut rng);
            let c = Tensor::randn(vec![3, 6], 0.5, &mut rng);
            let mut g = Graph::new();
            let (an, bn, cn) = (g.constant(a.clone()), g.constant(b.clone()), g.constant(c.clone()));
            let ab = g.matmul(an, bn).unwrap();
            let ab_c = g.matmul(ab, cn).unwrap();
            let bc = g.matmul(bn, cn).unwrap();
            let a_bc = g.matmul(an, bc).unwrap();
            for (x, y) in g.data(ab_c).iter().zip(g.data(a_bc).iter()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax_rows(a).unwrap();
        assert_eq!(g.data(s), &[0.5, 0.5]);

        let b = g.constant(t(&[2], &[1000.0, 0.0]));
        let s2 = g.softmax_rows(b).unwrap();
        assert!(g.data(s2)[0] > 1.0 - 1e-12 && g.data(s2)[1] < 1e-12);
        assert!(g.data(s2).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = rng::from_seed(3);
        let x = Tensor::randn(vec![4, 7], 10.0, &mut rng);
        let mut g = Graph::new();
        let a = g.constant(x);
        let s = g.softmax_rows(a).unwrap();
        for row in g.data(s).chunks_exact(7) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
        }
    }

    #[test]
    fn softmax_empty_trailing_axis_is_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![3, 0]));
        assert!(matches!(g.softmax_rows(a), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[3.0; 4]));
        let sc = g.constant(Tensor::full(vec![4], 1.0));
        let sh = g.constant(Tensor::zeros(vec![4]));
        let y = g.layer_norm(x, sc, sh, 1e-5).unwrap();
        for v in g.data(y) {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_preserves_already_normalized_row() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
        let sc = g.constant(Tensor::full(vec![2], 1.0));
        let sh = g.constant(Tensor::zeros(vec![2]));
        let y = g.layer_norm(x, sc, sh, 1e-14).unwrap();
        assert!((g.data(y)[0] - 1.0).abs() < 1e-7);
        assert!((g.data(y)[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 4]));
        let sc = g.constant(Tensor::full(vec![4], 1.0));
        let sh = g.constant(Tensor::zeros(vec![4]));
        assert!(matches!(g.layer_norm(x, sc, sh, 0.0), Err(Error::Parameter(_))));
        assert!(matches!(g.layer_norm(x, sc, sh, -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_analytic() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.rope(x, Arc::new(vec![0.0]), 10000.0).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = rng::from_seed(9);
        let x = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = g.rope(xn, Arc::new(vec![0.0, 3.0, 17.0]), 10000.0).unwrap();
        for (xr, yr) in x.data().chunks_exact(6).zip(g.data(y).chunks_exact(6)) {
            for i in 0..3 {
                let nx = xr[2 * i] * xr[2 * i] + xr[2 * i + 1] * xr[2 * i + 1];
                let ny = yr[2 * i] * yr[2 * i] + yr[2 * i + 1] * yr[2 * i + 1];
                assert!((nx - ny).abs() < 1e-12, "{nx} vs {ny}");
            }
        }
    }

    #[test]
    fn rope_matches_explicit_rotation_matrix() {
        // one pair, position p: y = R(p·freq)·x with R a 2x2 rotation
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[3.0, -4.0]));
        let pos = 2.5;
        let y = g.rope(x, Arc::new(vec![pos]), 10000.0).unwrap();
        let angle = pos * 1.0; // freq of pair 0 is base^0 = 1
        let expect = [
            3.0 * angle.cos() - (-4.0) * angle.sin(),
            3.0 * angle.sin() + (-4.0) * angle.cos(),
        ];
        assert!((g.data(y)[0] - expect[0]).abs() < 1e-15);
        assert!((g.data(y)[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut rng = rng::from_seed(21);
        let a = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![2, 5, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let (an, bn) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.concat(&[an, bn], 1).unwrap();
        assert_eq!(g.dims(c), &[2, 8, 4]);
        let a2 = g.slice(c, 1, 0, 3).unwrap();
        let b2 = g.slice(c, 1, 3, 5).unwrap();
        assert_eq!(g.data(a2), a.data());
        assert_eq!(g.data(b2), b.data());
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = rng::from_seed(2);
        let x = Tensor::randn(vec![2, 3, 4, 5], 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let p = g.permute(xn, &[0, 2, 1, 3]).unwrap();
        assert_eq!(g.dims(p), &[2, 4, 3, 5]);
        let back = g.permute(p, &[0, 2, 1, 3]).unwrap();
        assert_eq!(g.data(back), x.data());
    }

    #[test]
    fn gather_rows_selects_and_repeats() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.gather_rows(x, 1, Arc::new(vec![2, 0, 0])).unwrap();
        assert_eq!(g.data(y), &[5.0, 6.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn broadcast_add_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 3], &[0.0; 12]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn determinism_same_seed_bitwise() {
        let run = || {
            let mut rng = rng::from_seed(77);
            let x = Tensor::randn(vec![3, 4], 1.0, &mut rng).with_grad();
            let w = Tensor::randn(vec![4, 2], 1.0, &mut rng).with_grad();
            let mut g = Graph::new();
            let (xn, wn) = (g.leaf(x), g.leaf(w));
            let y = g.matmul(xn, wn).unwrap();
            let s = g.softmax_rows(y).unwrap();
            let l = g.mean_all(s);
            g.backward(l).unwrap();
            (g.data(s).to_vec(), g.grad(xn).unwrap().to_vec())
        };
        let (a1, g1) = run();
        let (a2, g2) = run();
        assert_eq!(a1, a2);
        assert_eq!(g1, g2);
    }

    // gradient wiring for every op against brute-force central differences
    #[test]
    fn per_op_gradients_match_central_differences() {
        type Build = fn(&mut Graph, NodeId) -> NodeId;
        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("silu", vec![2, 3], |g, x| {
                let y = g.silu(x);
                g.sum_all(y)
            }),
            ("softmax", vec![2, 4], |g, x| {
                let y = g.softmax_rows(x).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("scale_addscalar", vec![5], |g, x| {
                let y = g.scale(x, -2.5);
                let z = g.add_scalar(y, 1.0);
                let sq = g.mul(z, z).unwrap();
                g.sum_all(sq)
            }),
            ("permute", vec![2, 3, 4], |g, x| {
                let y = g.permute(x, &[1, 2, 0]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("gather", vec![1, 4, 3], |g, x| {
                let y = g.gather_rows(x, 1, Arc::new(vec![0, 0, 3, 2])).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.sum_all(sq)
            }),
            ("rope", vec![2, 3, 4], |g, x| {
                let y = g.rope(x, Arc::new(vec![0.0, 1.0, 2.0]), 100.0).unwrap();
                let sq = g.mul(y, y).unwrap();
                let z = g.silu(sq);
                g.sum_all(z)
            }),
            ("slice_concat", vec![2, 4, 2], |g, x| {
                let a = g.slice(x, 1, 0, 2).unwrap();
                let b = g.slice(x, 1, 2, 2).unwrap();
                let c = g.concat(&[b, a], 1).unwrap();
                let sq = g.mul(c, c).unwrap();
                g.sum_all(sq)
            }),
            ("reshape_mean", vec![3, 4], |g, x| {
                let y = g.reshape(x, vec![2, 6]).unwrap();
                let sq = g.mul(y, y).unwrap();
                g.mean_all(sq)
            }),
        ];
        let mut rng = rng::from_seed(123);
        for (name, dims, build) in cases {
            let x = Tensor::randn(dims.clone(), 1.0, &mut rng);
            let f = |xt: &Tensor| -> crate::Result<(f64, Vec<f64>)> {
                let mut g = Graph::new();
                let xn = g.leaf(xt.clone().with_grad());
                let loss = build(&mut g, xn);
                g.backward(loss)?;
                Ok((g.data(loss)[0], g.grad(xn).unwrap().to_vec()))
            };
            let err = crate::tensor::finite_diff_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn matmul_gradient_vs_central_differences() {
        let mut rng = rng::from_seed(31);
        let a = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        // check d/dA with B fixed
        let fa = |xt: &Tensor| {
            let mut g = Graph::new();
            let an = g.leaf(xt.clone().with_grad());
            let bn = g.constant(b.clone());
            let c = g.matmul(an, bn)?;
            let sq = g.mul(c, c)?;
            let loss = g.sum_all(sq);
            g.backward(loss)?;
            Ok((g.data(loss)[0], g.grad(an).unwrap().to_vec()))
        };
        let err_a = crate::tensor::finite_diff_check(fa, &a, 1e-5).unwrap();
        assert!(err_a < 1e-6, "dA err {err_a}");
        // and d/dB with A fixed, including the broadcast-batched case
        let a3 = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
        let fb = |xt: &Tensor| {
            let mut g = Graph::new();
            let an = g.constant(a3.clone());
            let bn = g.leaf(xt.clone().with_grad());
            let c = g.matmul(an, bn)?;
            let sq = g.mul(c, c)?;
            let loss = g.sum_all(sq);
            g.backward(loss)?;
            Ok((g.data(loss)[0], g.grad(bn).unwrap().to_vec()))
        };
        let err_b = crate::tensor::finite_diff_check(fb, &b, 1e-5).unwrap();
        assert!(err_b < 1e-6, "dB err {err_b}");
    }

    #[test]
    fn layer_norm_gradient_vs_central_differences() {
        let mut rng = rng::from_seed(41);
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let sc = Tensor::randn(vec![5], 0.5, &mut rng);
        let sh = Tensor::randn(vec![5], 0.5, &mut rng);
        for target in 0..3 {
            let f = |xt: &Tensor| {
                let mut g = Graph::new();
                let inputs = [x.clone(), sc.clone(), sh.clone()];
                let mut ids = Vec::new();
                for (i, t) in inputs.iter().enumerate() {
                    let t = if i == target { xt.clone().with_grad() } else { t.clone() };
                    ids.push(g.leaf(t));
                }
                let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                let sq = g.mul(y, y)?;
                let loss = g.sum_all(sq);
                g.backward(loss)?;
                Ok((g.data(loss)[0], g.grad(ids[target]).unwrap().to_vec()))
            };
            let arg = [&x, &sc, &sh][target];
            let err = crate::tensor::finite_diff_check(f, arg, 1e-5).unwrap();
            assert!(err < 1e-6, "layer_norm input {target}: err {err}");
        }
    }

    #[test]
    fn broadcast_mul_gradients() {
        let mut rng = rng::from_seed(51);
        let x = Tensor::randn(vec![2, 3, 4], 1.0, &mut rng);
        let gate = Tensor::randn(vec![2, 1, 4], 1.0, &mut rng);
        let f = |gt: &Tensor| {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let gn = g.leaf(gt.clone().with_grad());
            let y = g.mul(xn, gn)?;
            let s = g.silu(y);
            let loss = g.sum_all(s);
            g.backward(loss)?;
            Ok((g.data(loss)[0], g.grad(gn).unwrap().to_vec()))
        };
        let err = crate::tensor::finite_diff_check(f, &gate, 1e-5).unwrap();
        assert!(err < 1e-6, "broadcast mul err {err}");
    }

    #[test]
    fn gradcheck_on_three_distinct_shapes_stays_below_1e5() {
        // crate invariant: every differentiable op on >= 3 shapes below 1e-5
        let shapes = [vec![4], vec![2, 6], vec![2, 2, 4]];
        let mut rng = rng::from_seed(61);
        for dims in &shapes {
            let x = Tensor::randn(dims.clone(), 1.0, &mut rng);
            let f = |xt: &Tensor| {
                let mut g = Graph::new();
                let xn = g.leaf(xt.clone().with_grad());
                let s = g.silu(xn);
                let sm = if dims.len() > 1 { g.softmax_rows(s)? } else { s };
                let sq = g.mul(sm, sm)?;
                let loss = g.mean_all(sq);
                g.backward(loss)?;
                Ok((g.data(loss)[0], g.grad(xn).unwrap().to_vec()))
            };
            let err = crate::tensor::finite_diff_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-5, "shape {dims:?}: err {err}");
        }
    }

    #[test]
    fn graphs_run_concurrently_on_separate_threads() {
        let handles: Vec<_> = (0..4)
            .map(|seed| {
                std::thread::spawn(move || {
                    let mut r = rng::from_seed(seed);
                    let x = Tensor::randn(vec![8, 8], 1.0, &mut r).with_grad();
                    let mut g = Graph::new();
                    let xn = g.leaf(x);
                    let y = g.matmul(xn, xn).unwrap();
                    let l = g.mean_all(y);
                    g.backward(l).unwrap();
                    g.data(l)[0]
                })
            })
            .collect();
        for h in handles {
            assert!(h.join().unwrap().is_finite());
        }
    }

    #[test]
    fn broadcast_shapes_reject_incompatible() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 4]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn rng_gen_smoke() {
        // keep the rand import exercised in this module
        let mut r = rng::from_seed(1);
        let _: f64 = r.gen();
    }
}
