use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::quant::{self, QuantizedTensor};

type Backward = Box<dyn Fn(&[f32], &mut GradSink<'_>)>;

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    needs_grad: bool,
    leaf: Option<String>,
    backward: Option<Backward>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    spent: bool,
}

/// Linear record of operations; node ids are assigned in construction order,
/// so construction order is already a topological order.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of the loss with respect to every named leaf reachable from it.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_name: BTreeMap<String, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.by_name.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Adds the gradient recorded for `name` (if any) into `tensor.grad`.
    pub fn accumulate_into(&self, name: &str, tensor: &mut Tensor) -> Result<()> {
        match self.by_name.get(name) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

pub(crate) struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f32>>],
    needs: &'a [bool],
    sizes: &'a [usize],
}

impl GradSink<'_> {
    fn wants(&self, id: usize) -> bool {
        self.needs[id]
    }

    /// Zero-initialized-on-demand gradient slot for node `id`.
    fn slot(&mut self, id: usize) -> &mut [f32] {
        let n = self.sizes[id];
        self.grads[id].get_or_insert_with(|| vec![0.0; n])
    }

    fn add(&mut self, id: usize, delta: &[f32]) {
        if !self.wants(id) {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }
}

/// Keys and values already seen by one attention layer, one `[len × head_dim]`
/// buffer per head.
#[derive(Clone, Copy)]
pub struct AttnPast<'a> {
    pub keys: &'a [Vec<f32>],
    pub values: &'a [Vec<f32>],
    pub len: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Scalar,
    Row,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let b_numel: usize = b.iter().product();
    if a == b {
        Ok(Broadcast::Same)
    } else if b_numel == 1 {
        Ok(Broadcast::Scalar)
    } else if b.len() == 1 && a.last() == Some(&b[0]) {
        Ok(Broadcast::Row)
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn reduce_to(kind: Broadcast, full: &[f32], len: usize) -> Vec<f32> {
    match kind {
        Broadcast::Same => full.to_vec(),
        Broadcast::Scalar => vec![full.iter().sum()],
        Broadcast::Row => {
            let mut out = vec![0.0; len];
            for row in full.chunks(len) {
                out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
            }
            out
        }
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<f32>>,
        needs_grad: bool,
        leaf: Option<String>,
        backward: Option<Backward>,
    ) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            shape,
            value,
            needs_grad,
            leaf,
            backward: if needs_grad { backward } else { None },
        });
        Var { tape: self, id }
    }

    /// Records `tensor` as a leaf. Only tensors with `requires_grad` are
    /// differentiated; everything else enters as a constant.
    pub fn leaf(&self, name: &str, tensor: &Tensor) -> Var<'_> {
        let trainable = tensor.requires_grad();
        self.push(
            tensor.shape().to_vec(),
            Arc::clone(tensor.shared()),
            trainable,
            trainable.then(|| name.to_string()),
            None,
        )
    }

    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push(
            tensor.shape().to_vec(),
            Arc::clone(tensor.shared()),
            false,
            None,
            None,
        )
    }

    pub fn input(&self, shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Var<'_>> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[u32]) -> Result<Var<'t>> {
        let shape = table.shape();
        let [vocab, dim] = shape[..] else {
            return Err(Error::shape("embedding", &shape, &[0, 0]));
        };
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let src = table.value();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let id = id as usize;
            out.extend_from_slice(&src[id * dim..(id + 1) * dim]);
        }
        let ids = ids.to_vec();
        let tid = table.id;
        Ok(self.push(
            vec![ids.len(), dim],
            Arc::new(out),
            table.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                let slot = sink.slot(tid);
                for (t, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    slot[id * dim..(id + 1) * dim]
                        .iter_mut()
                        .zip(&g[t * dim..(t + 1) * dim])
                        .for_each(|(s, v)| *s += v);
                }
            })),
        ))
    }

    /// Runs reverse accumulation from the scalar `loss` and clears the tape.
    /// A tape can be differentiated once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        if inner.spent {
            return Err(Error::Tape(
                "backward already ran on this tape; re-run the forward pass".into(),
            ));
        }
        let loss_node = &inner.nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                loss_node.shape
            )));
        }
        inner.spent = true;
        let nodes = std::mem::take(&mut inner.nodes);
        drop(inner);

        let needs: Vec<bool> = nodes.iter().map(|n| n.needs_grad).collect();
        let sizes: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        let mut out = Gradients::default();
        if !needs[loss.id] {
            return Ok(out);
        }
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(name) = &node.leaf {
                match out.by_name.get_mut(name) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.by_name.insert(name.clone(), g);
                    }
                }
                continue;
            }
            if let Some(bw) = &node.backward {
                let mut sink = GradSink {
                    grads: &mut grads,
                    needs: &needs,
                    sizes: &sizes,
                };
                bw(&g, &mut sink);
            }
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    fn node<R>(&self, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id])
    }

    fn check_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node(|n| n.shape.clone())
    }

    pub fn value(&self) -> Arc<Vec<f32>> {
        self.node(|n| Arc::clone(&n.value))
    }

    pub fn needs_grad(&self) -> bool {
        self.node(|n| n.needs_grad)
    }

    pub fn to_tensor(&self) -> Tensor {
        let (shape, value) = self.node(|n| (n.shape.clone(), Arc::clone(&n.value)));
        Tensor::from_shared(shape, value)
    }

    pub fn item(&self) -> f32 {
        self.value()[0]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape()[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    /// `self[m×k] · rhs[k×n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let (a, b) = (self.value(), rhs.value());
        let out = kernels::matmul(&a, m, k, &b, n);
        let (aid, bid) = (self.id, rhs.id);
        Ok(self.tape.push(
            vec![m, n],
            Arc::new(out),
            self.needs_grad() || rhs.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                if sink.wants(aid) {
                    let da = kernels::matmul_nt(g, m, n, &b, k);
                    sink.add(aid, &da);
                }
                if sink.wants(bid) {
                    kernels::matmul_tn_into(&a, m, k, g, n, sink.slot(bid));
                }
            })),
        ))
    }

    /// `self[m×k] · rhs[n×k]ᵀ`.
    pub fn matmul_nt(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = rhs.dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let (a, b) = (self.value(), rhs.value());
        let out = kernels::matmul_nt(&a, m, k, &b, n);
        let (aid, bid) = (self.id, rhs.id);
        Ok(self.tape.push(
            vec![m, n],
            Arc::new(out),
            self.needs_grad() || rhs.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                if sink.wants(aid) {
                    kernels::matmul_into(g, m, n, &b, k, sink.slot(aid));
                }
                if sink.wants(bid) {
                    kernels::matmul_tn_into(g, m, n, &a, k, sink.slot(bid));
                }
            })),
        ))
    }

    /// `self · W` where `W` is a frozen quantized matrix. No gradient reaches `W`.
    pub fn qmatmul(self, weight: &Arc<QuantizedTensor>) -> Result<Var<'t>> {
        let (m, k) = self.dims2("qmatmul")?;
        let x = self.value();
        let out = quant::qmatmul_raw(&x, m, k, weight)?;
        let n = weight.cols();
        let w = Arc::clone(weight);
        let xid = self.id;
        Ok(self.tape.push(
            vec![m, n],
            Arc::new(out),
            self.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                let mut row = vec![0.0; n];
                let slot = sink.slot(xid);
                for p in 0..k {
                    w.dequantize_row_into(p, &mut row);
                    for i in 0..m {
                        slot[i * k + p] += kernels::dot(&g[i * n..(i + 1) * n], &row);
                    }
                }
            })),
        ))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        let kind = broadcast_kind("add", &sa, &sb)?;
        let (a, b) = (self.value(), rhs.value());
        let blen = b.len();
        let out: Vec<f32> = a
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % blen])
            .collect();
        let (aid, bid) = (self.id, rhs.id);
        Ok(self.tape.push(
            sa,
            Arc::new(out),
            self.needs_grad() || rhs.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                sink.add(aid, g);
                if sink.wants(bid) {
                    sink.add(bid, &reduce_to(kind, g, blen));
                }
            })),
        ))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let (sa, sb) = (self.shape(), rhs.shape());
        let kind = broadcast_kind("mul", &sa, &sb)?;
        let (a, b) = (self.value(), rhs.value());
        let blen = b.len();
        let out: Vec<f32> = a
            .iter()
            .enumerate()
            .map(|(i, x)| x * b[i % blen])
            .collect();
        let (aid, bid) = (self.id, rhs.id);
        Ok(self.tape.push(
            sa,
            Arc::new(out),
            self.needs_grad() || rhs.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                if sink.wants(aid) {
                    let da: Vec<f32> =
                        g.iter().enumerate().map(|(i, v)| v * b[i % blen]).collect();
                    sink.add(aid, &da);
                }
                if sink.wants(bid) {
                    let full: Vec<f32> = g.iter().zip(a.iter()).map(|(v, x)| v * x).collect();
                    sink.add(bid, &reduce_to(kind, &full, blen));
                }
            })),
        ))
    }

    pub fn scale(self, factor: f32) -> Var<'t> {
        let out: Vec<f32> = self.value().iter().map(|x| x * factor).collect();
        let id = self.id;
        self.tape.push(
            self.shape(),
            Arc::new(out),
            self.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                let d: Vec<f32> = g.iter().map(|v| v * factor).collect();
                sink.add(id, &d);
            })),
        )
    }

    /// `x · sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        let x = self.value();
        let out: Vec<f32> = x.iter().map(|&v| v * sigmoid(v)).collect();
        let id = self.id;
        self.tape.push(
            self.shape(),
            Arc::new(out),
            self.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                let d: Vec<f32> = x
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                sink.add(id, &d);
            })),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let total: f32 = self.value().iter().sum();
        let n = self.node(|node| node.value.len());
        let id = self.id;
        self.tape.push(
            vec![1],
            Arc::new(vec![total]),
            self.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                sink.add(id, &vec![g[0]; n]);
            })),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.value();
        let mut y = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0f32;
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[idx(j)] /= total;
                }
            }
        }
        let y = Arc::new(y);
        let saved = Arc::clone(&y);
        let id = self.id;
        Ok(self.tape.push(
            shape,
            y,
            self.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                let mut d = vec![0.0f32; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dotp: f32 = (0..len).map(|j| g[idx(j)] * saved[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = saved[idx(j)] * (g[idx(j)] - dotp);
                        }
                    }
                }
                sink.add(id, &d);
            })),
        ))
    }

    /// `x / sqrt(mean(x²) + eps) · weight`, normalizing over the last dimension.
    pub fn rms_norm(self, weight: Var<'t>, eps: f32) -> Result<Var<'t>> {
        self.check_tape(&weight);
        let shape = self.shape();
        let dim = *shape.last().unwrap_or(&0);
        let wshape = weight.shape();
        if wshape != [dim] {
            return Err(Error::shape("rms_norm", &shape, &wshape));
        }
        let x = self.value();
        let w = weight.value();
        let rows = x.len() / dim.max(1);
        let mut inv = vec![0.0f32; rows];
        let mut normed = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for r in 0..rows {
            let xr = &x[r * dim..(r + 1) * dim];
            let ms = xr.iter().map(|v| v * v).sum::<f32>() / dim as f32;
            let ir = 1.0 / (ms + eps).sqrt();
            inv[r] = ir;
            for j in 0..dim {
                let n = xr[j] * ir;
                normed[r * dim + j] = n;
                out[r * dim + j] = n * w[j];
            }
        }
        let (xid, wid) = (self.id, weight.id);
        Ok(self.tape.push(
            shape,
            Arc::new(out),
            self.needs_grad() || weight.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                if sink.wants(wid) {
                    let slot = sink.slot(wid);
                    for r in 0..rows {
                        for j in 0..dim {
                            slot[j] += g[r * dim + j] * normed[r * dim + j];
                        }
                    }
                }
                if sink.wants(xid) {
                    let mut dx = vec![0.0f32; g.len()];
                    for r in 0..rows {
                        let base = r * dim;
                        let mut proj = 0.0f32;
                        for j in 0..dim {
                            proj += g[base + j] * w[j] * normed[base + j];
                        }
                        proj /= dim as f32;
                        for j in 0..dim {
                            let dn = g[base + j] * w[j];
                            dx[base + j] = inv[r] * (dn - normed[base + j] * proj);
                        }
                    }
                    sink.add(xid, &dx);
                }
            })),
        ))
    }

    /// Rotary position embedding over `[T × n_heads·head_dim]`, row `t` sitting
    /// at absolute position `offset + t`.
    pub fn rope(self, n_heads: usize, offset: usize, theta: f32) -> Result<Var<'t>> {
        let shape = self.shape();
        let (rows, dim) = self.dims2("rope")?;
        if n_heads == 0 || dim % n_heads != 0 || (dim / n_heads) % 2 != 0 {
            return Err(Error::Config(format!(
                "rope needs an even head_dim; dim {dim} with {n_heads} heads"
            )));
        }
        let head_dim = dim / n_heads;
        let table = Arc::new(rope_table(rows, head_dim, offset, theta));
        let x = self.value();
        let out = rotate(&x, rows, n_heads, head_dim, &table, false);
        let id = self.id;
        Ok(self.tape.push(
            shape,
            Arc::new(out),
            self.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                let d = rotate(g, rows, n_heads, head_dim, &table, true);
                sink.add(id, &d);
            })),
        ))
    }

    /// Mean of `-log softmax(logits)[target]` over positions whose mask is 1.
    pub fn cross_entropy(self, targets: &[u32], mask: &[u8]) -> Result<Var<'t>> {
        let (rows, vocab) = self.dims2("cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                &[rows, vocab],
                &[targets.len(), mask.len()],
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Data(format!(
                "target id {t} out of range for vocabulary of {vocab}"
            )));
        }
        let count = mask.iter().filter(|&&m| m != 0).count();
        if count == 0 {
            return Err(Error::Data("no supervised positions".into()));
        }
        let logits = self.value();
        let mut probs = vec![0.0f32; logits.len()];
        let mut total = 0.0f64;
        for r in 0..rows {
            if mask[r] == 0 {
                continue;
            }
            let row = &logits[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * vocab + j] = e;
                z += e;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            let t = targets[r] as usize;
            total += f64::from(max + z.ln() - row[t]);
        }
        let loss = (total / count as f64) as f32;
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        let id = self.id;
        Ok(self.tape.push(
            vec![1],
            Arc::new(vec![loss]),
            self.needs_grad(),
            None,
            Some(Box::new(move |g, sink| {
                let scale = g[0] / count as f32;
                let slot = sink.slot(id);
                for r in 0..rows {
                    if mask[r] == 0 {
                        continue;
                    }
                    let base = r * vocab;
                    for j in 0..vocab {
                        slot[base + j] += scale * probs[base + j];
                    }
                    slot[base + targets[r] as usize] -= scale;
                }
            })),
        ))
    }
}

/// Multi-head causal scaled-dot-product attention. `q`, `k`, `v` are
/// `[T × n_heads·head_dim]`; `past` holds keys/values of earlier positions,
/// which are constants for differentiation.
pub fn causal_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    n_heads: usize,
    past: Option<AttnPast<'_>>,
) -> Result<Var<'t>> {
    q.check_tape(&k);
    q.check_tape(&v);
    let (t_new, dim) = q.dims2("attention")?;
    let ks = k.shape();
    let vs = v.shape();
    if ks != [t_new, dim] || vs != [t_new, dim] {
        return Err(Error::shape("attention", &[t_new, dim], &ks));
    }
    if n_heads == 0 || dim % n_heads != 0 {
        return Err(Error::Config(format!("dim {dim} not divisible by {n_heads} heads")));
    }
    let hd = dim / n_heads;
    let past_len = past.map_or(0, |p| p.len);
    let total = past_len + t_new;
    let scale = 1.0 / (hd as f32).sqrt();
    let (qv, kv, vv) = (q.value(), k.value(), v.value());

    let gather = |src: &[f32], past_rows: Option<&[Vec<f32>]>, h: usize| {
        let mut buf = Vec::with_capacity(total * hd);
        if let Some(rows) = past_rows {
            buf.extend_from_slice(&rows[h][..past_len * hd]);
        }
        for t in 0..t_new {
            buf.extend_from_slice(&src[t * dim + h * hd..t * dim + (h + 1) * hd]);
        }
        buf
    };

    let mut out = vec![0.0f32; t_new * dim];
    let mut keys = Vec::with_capacity(n_heads);
    let mut values = Vec::with_capacity(n_heads);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let kh = gather(&kv, past.map(|p| p.keys), h);
        let vh = gather(&vv, past.map(|p| p.values), h);
        let mut ph = vec![0.0f32; t_new * total];
        for t in 0..t_new {
            let qrow = &qv[t * dim + h * hd..t * dim + (h + 1) * hd];
            let visible = past_len + t + 1;
            let prow = &mut ph[t * total..t * total + visible];
            let mut max = f32::NEG_INFINITY;
            for (j, p) in prow.iter_mut().enumerate() {
                *p = kernels::dot(qrow, &kh[j * hd..(j + 1) * hd]) * scale;
                max = max.max(*p);
            }
            let mut z = 0.0f32;
            for p in prow.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            let orow = &mut out[t * dim + h * hd..t * dim + (h + 1) * hd];
            for (j, p) in prow.iter_mut().enumerate() {
                *p /= z;
                kernels::axpy(*p, &vh[j * hd..(j + 1) * hd], orow);
            }
        }
        keys.push(kh);
        values.push(vh);
        probs.push(ph);
    }

    let (qid, kid, vid) = (q.id, k.id, v.id);
    let needs = q.needs_grad() || k.needs_grad() || v.needs_grad();
    Ok(q.tape.push(
        vec![t_new, dim],
        Arc::new(out),
        needs,
        None,
        Some(Box::new(move |g, sink| {
            let mut dq = vec![0.0f32; t_new * dim];
            let mut dk = vec![0.0f32; t_new * dim];
            let mut dv = vec![0.0f32; t_new * dim];
            let mut dp = vec![0.0f32; total];
            for h in 0..n_heads {
                let (kh, vh, ph) = (&keys[h], &values[h], &probs[h]);
                for t in 0..t_new {
                    let visible = past_len + t + 1;
                    let go = &g[t * dim + h * hd..t * dim + (h + 1) * hd];
                    let prow = &ph[t * total..t * total + visible];
                    let mut weighted = 0.0f32;
                    for j in 0..visible {
                        dp[j] = kernels::dot(go, &vh[j * hd..(j + 1) * hd]);
                        weighted += dp[j] * prow[j];
                    }
                    let qrow = &qv[t * dim + h * hd..t * dim + (h + 1) * hd];
                    for j in 0..visible {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        kernels::axpy(
                            ds,
                            &kh[j * hd..(j + 1) * hd],
                            &mut dq[t * dim + h * hd..t * dim + (h + 1) * hd],
                        );
                        if j >= past_len {
                            let row = j - past_len;
                            let range = row * dim + h * hd..row * dim + (h + 1) * hd;
                            kernels::axpy(ds, qrow, &mut dk[range.clone()]);
                            kernels::axpy(prow[j], go, &mut dv[range]);
                        }
                    }
                }
            }
            sink.add(qid, &dq);
            sink.add(kid, &dk);
            sink.add(vid, &dv);
        })),
    ))
}

/// `(cos, sin)` per `(row, pair)` for rows at positions `offset..offset+rows`.
pub(crate) fn rope_table(rows: usize, head_dim: usize, offset: usize, theta: f32) -> Vec<(f32, f32)> {
    let half = head_dim / 2;
    let mut table = Vec::with_capacity(rows * half);
    for t in 0..rows {
        let pos = (offset + t) as f64;
        for j in 0..half {
            let inv_freq = f64::from(theta).powf(-(2.0 * j as f64) / head_dim as f64);
            let (s, c) = (pos * inv_freq).sin_cos();
            table.push((c as f32, s as f32));
        }
    }
    table
}

fn rotate(
    x: &[f32],
    rows: usize,
    n_heads: usize,
    head_dim: usize,
    table: &[(f32, f32)],
    inverse: bool,
) -> Vec<f32> {
    let half = head_dim / 2;
    let dim = n_heads * head_dim;
    let mut out = vec![0.0f32; x.len()];
    for t in 0..rows {
        for h in 0..n_heads {
            for j in 0..half {
                let (c, s) = table[t * half + j];
                let s = if inverse { -s } else { s };
                let i = t * dim + h * head_dim + 2 * j;
                let (a, b) = (x[i], x[i + 1]);
                out[i] = a * c - b * s;
                out[i + 1] = a * s + b * c;
            }
        }
    }
    out
}
