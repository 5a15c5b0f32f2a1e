//! Reverse-mode differentiation over a linear tape of primitive operations.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and backward simply walks it in reverse.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::{count, lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Caller-chosen key under which a parameter's gradient is returned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Constant,
    Param(ParamId),
    /// `x · wᵀ + b`
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, S),
    ScaleRows(NodeId, Vec<S>),
    SliceRows { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    GatherRows { table: NodeId, indices: Vec<usize> },
    /// `base + scale · b · a`
    LowRank { base: NodeId, a: NodeId, b: NodeId, scale: S },
    Mse(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
}

pub type Gradients<S> = BTreeMap<ParamId, Tensor<S>>;

#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<S>> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownNode(id.0))
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, op: Op<S>) -> Result<NodeId> {
        let value = eval(&self.nodes, &op)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push_leaf(Op::Constant, value)
    }

    /// A tracked parameter; `backward` reports its gradient under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor<S>) -> NodeId {
        self.push_leaf(Op::Param(id), value)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Affine { x, w, b })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: S) -> Result<NodeId> {
        self.push(Op::Scale(x, factor))
    }

    pub fn scale_rows(&mut self, x: NodeId, factors: Vec<S>) -> Result<NodeId> {
        self.push(Op::ScaleRows(x, factors))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.push(Op::ConcatCols(parts))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        self.push(Op::GatherRows { table, indices })
    }

    pub fn low_rank(&mut self, base: NodeId, a: NodeId, b: NodeId, scale: S) -> Result<NodeId> {
        self.push(Op::LowRank { base, a, b, scale })
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mse(a, b))
    }

    /// Re-evaluates every recorded operation from the stored leaves.
    pub fn replay(&self) -> Result<Tape<S>> {
        let mut out = Tape::new();
        for node in &self.nodes {
            match &node.op {
                Op::Constant | Op::Param(_) => {
                    out.push_leaf(node.op.clone(), node.value.clone());
                }
                op => {
                    out.push(op.clone())?;
                }
            }
        }
        Ok(out)
    }

    /// Returns the gradient of a scalar `loss` with respect to every
    /// parameter leaf, then clears the tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<S>> {
        let loss_value = self.value(loss)?;
        if loss_value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss shape {:?} is not scalar", loss_value.shape()),
            ));
        }
        if !loss_value.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(
            loss_value.shape().to_vec(),
            vec![S::one()],
        ));
        let mut out = Gradients::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => match out.get_mut(pid) {
                    Some(acc) => acc.axpy(S::one(), &g)?,
                    None => {
                        out.insert(*pid, g);
                    }
                },
                op => {
                    for (input, contribution) in vjp(&self.nodes, op, &node.value, &g)? {
                        accumulate(&mut grads[input.0], contribution)?;
                    }
                }
            }
        }
        self.nodes.clear();
        Ok(out)
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, g: Tensor<S>) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(S::one(), &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn get<S>(nodes: &[Node<S>], id: NodeId) -> Result<&Tensor<S>> {
    nodes.get(id.0).map(|n| &n.value).ok_or(Error::UnknownNode(id.0))
}

fn eval<S: Scalar>(nodes: &[Node<S>], op: &Op<S>) -> Result<Tensor<S>> {
    match op {
        Op::Constant | Op::Param(_) => unreachable!("leaves are pushed directly"),
        Op::Affine { x, w, b } => affine_forward(get(nodes, *x)?, get(nodes, *w)?, get(nodes, *b)?),
        Op::Tanh(x) => Ok(get(nodes, *x)?.map(|v| v.tanh())),
        Op::Add(a, b) => get(nodes, *a)?.add(get(nodes, *b)?),
        Op::Scale(x, f) => Ok(get(nodes, *x)?.scale(*f)),
        Op::ScaleRows(x, f) => get(nodes, *x)?.scale_rows(f),
        Op::SliceRows { x, start, len } => get(nodes, *x)?.slice_rows(*start, *len),
        Op::ConcatCols(parts) => {
            let parts = parts
                .iter()
                .map(|p| get(nodes, *p))
                .collect::<Result<Vec<_>>>()?;
            concat_cols(&parts)
        }
        Op::GatherRows { table, indices } => get(nodes, *table)?.select_rows(indices),
        Op::LowRank { base, a, b, scale } => {
            low_rank_forward(get(nodes, *base)?, get(nodes, *a)?, get(nodes, *b)?, *scale)
        }
        Op::Mse(a, b) => {
            let (a, b) = (get(nodes, *a)?, get(nodes, *b)?);
            a.same_shape(b, "mse")?;
            let sum: S = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum();
            Ok(Tensor::scalar(sum / count(a.len())))
        }
    }
}

/// Vector-Jacobian products of `op` with respect to each input.
fn vjp<S: Scalar>(
    nodes: &[Node<S>],
    op: &Op<S>,
    out: &Tensor<S>,
    g: &Tensor<S>,
) -> Result<Vec<(NodeId, Tensor<S>)>> {
    Ok(match op {
        Op::Constant | Op::Param(_) => Vec::new(),
        Op::Affine { x, w, b } => {
            let (xv, wv) = (get(nodes, *x)?, get(nodes, *w)?);
            let (dx, dw, db) = affine_backward(xv, wv, g);
            vec![(*x, dx), (*w, dw), (*b, db)]
        }
        Op::Tanh(x) => {
            let dx = out.zip_map(g, "tanh", |y, gy| gy * (S::one() - y * y))?;
            vec![(*x, dx)]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Scale(x, f) => vec![(*x, g.scale(*f))],
        Op::ScaleRows(x, f) => vec![(*x, g.scale_rows(f)?)],
        Op::SliceRows { x, start, len } => {
            let xv = get(nodes, *x)?;
            let c = xv.cols();
            let mut dx = Tensor::zeros(xv.shape());
            dx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
            vec![(*x, dx)]
        }
        Op::ConcatCols(parts) => {
            let rows = g.rows();
            let total = g.cols();
            let mut offset = 0;
            let mut res = Vec::with_capacity(parts.len());
            for p in parts {
                let pc = get(nodes, *p)?.cols();
                let mut d = Vec::with_capacity(rows * pc);
                for i in 0..rows {
                    d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + pc]);
                }
                res.push((*p, Tensor::from_parts(vec![rows, pc], d)));
                offset += pc;
            }
            res
        }
        Op::GatherRows { table, indices } => {
            let tv = get(nodes, *table)?;
            let c = tv.cols();
            let mut dt = Tensor::zeros(tv.shape());
            for (i, &r) in indices.iter().enumerate() {
                let src = &g.data()[i * c..(i + 1) * c];
                for (d, &s) in dt.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            vec![(*table, dt)]
        }
        Op::LowRank { base, a, b, scale } => {
            let (av, bv) = (get(nodes, *a)?, get(nodes, *b)?);
            let (da, db) = low_rank_backward(av, bv, *scale, g);
            vec![(*base, g.clone()), (*a, da), (*b, db)]
        }
        Op::Mse(a, b) => {
            let (av, bv) = (get(nodes, *a)?, get(nodes, *b)?);
            let coeff = g.data()[0] * count::<S>(2) / count(av.len());
            let da = av.zip_map(bv, "mse", |x, y| coeff * (x - y))?;
            let db = da.scale(-S::one());
            vec![(*a, da), (*b, db)]
        }
    })
}

fn affine_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] || b.len() != w.shape()[0] {
        return Err(Error::shape(
            "affine",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let (rows, inp, outp) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let wt = w.transpose()?;
    let mut y = Vec::with_capacity(rows * outp);
    for _ in 0..rows {
        y.extend_from_slice(b.data());
    }
    // Four output rows share each weight row load; every element still
    // accumulates its terms in input order.
    let mut blocks = y.chunks_exact_mut(4 * outp);
    let mut i = 0;
    for block in &mut blocks {
        let (y0, rest) = block.split_at_mut(outp);
        let (y1, rest) = rest.split_at_mut(outp);
        let (y2, y3) = rest.split_at_mut(outp);
        let (x0, x1, x2, x3) = (x.row(i), x.row(i + 1), x.row(i + 2), x.row(i + 3));
        for k in 0..inp {
            let wrow = &wt.data()[k * outp..(k + 1) * outp];
            let (a0, a1, a2, a3) = (x0[k], x1[k], x2[k], x3[k]);
            for o in 0..outp {
                let wv = wrow[o];
                y0[o] = y0[o] + a0 * wv;
                y1[o] = y1[o] + a1 * wv;
                y2[o] = y2[o] + a2 * wv;
                y3[o] = y3[o] + a3 * wv;
            }
        }
        i += 4;
    }
    for yrow in blocks.into_remainder().chunks_exact_mut(outp) {
        for (k, &xv) in x.row(i).iter().enumerate() {
            let wrow = &wt.data()[k * outp..(k + 1) * outp];
            for (o, &wv) in yrow.iter_mut().zip(wrow) {
                *o = *o + xv * wv;
            }
        }
        i += 1;
    }
    Ok(Tensor::from_parts(vec![rows, outp], y))
}

fn affine_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (rows, inp, outp) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let mut dx = vec![S::zero(); rows * inp];
    let mut dw = vec![S::zero(); outp * inp];
    let mut db = vec![S::zero(); outp];
    let full = rows / 4 * 4;
    for i in (0..full).step_by(4) {
        let (g0, g1, g2, g3) = (g.row(i), g.row(i + 1), g.row(i + 2), g.row(i + 3));
        let (x0, x1, x2, x3) = (x.row(i), x.row(i + 1), x.row(i + 2), x.row(i + 3));
        let block = &mut dx[i * inp..(i + 4) * inp];
        let (d0, rest) = block.split_at_mut(inp);
        let (d1, rest) = rest.split_at_mut(inp);
        let (d2, d3) = rest.split_at_mut(inp);
        for j in 0..outp {
            let (a0, a1, a2, a3) = (g0[j], g1[j], g2[j], g3[j]);
            db[j] = db[j] + a0;
            db[j] = db[j] + a1;
            db[j] = db[j] + a2;
            db[j] = db[j] + a3;
            let wrow = w.row(j);
            for k in 0..inp {
                let wv = wrow[k];
                d0[k] = d0[k] + a0 * wv;
                d1[k] = d1[k] + a1 * wv;
                d2[k] = d2[k] + a2 * wv;
                d3[k] = d3[k] + a3 * wv;
            }
            let dwrow = &mut dw[j * inp..(j + 1) * inp];
            for k in 0..inp {
                let mut d = dwrow[k];
                d = d + a0 * x0[k];
                d = d + a1 * x1[k];
                d = d + a2 * x2[k];
                d = d + a3 * x3[k];
                dwrow[k] = d;
            }
        }
    }
    for i in full..rows {
        let grow = g.row(i);
        let xrow = x.row(i);
        let dxrow = &mut dx[i * inp..(i + 1) * inp];
        for (j, &gv) in grow.iter().enumerate() {
            db[j] = db[j] + gv;
            let wrow = w.row(j);
            for (d, &wv) in dxrow.iter_mut().zip(wrow) {
                *d = *d + gv * wv;
            }
            let dwrow = &mut dw[j * inp..(j + 1) * inp];
            for (d, &xv) in dwrow.iter_mut().zip(xrow) {
                *d = *d + gv * xv;
            }
        }
    }
    (
        Tensor::from_parts(vec![rows, inp], dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![outp], db),
    )
}

fn low_rank_forward<S: Scalar>(
    base: &Tensor<S>,
    a: &Tensor<S>,
    b: &Tensor<S>,
    scale: S,
) -> Result<Tensor<S>> {
    let delta = low_rank_product(a, b, scale)?;
    base.add(&delta)
}

/// `scale · b · a` for `b: [out, r]`, `a: [r, in]`.
pub(crate) fn low_rank_product<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, scale: S) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || b.shape()[1] != a.shape()[0] {
        return Err(Error::shape(
            "low_rank",
            format!("B {:?} · A {:?}", b.shape(), a.shape()),
        ));
    }
    let mut prod = b.matmul(a)?;
    for v in prod.data_mut() {
        *v = *v * scale;
    }
    Ok(prod)
}

fn low_rank_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    scale: S,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (r, inp) = (a.shape()[0], a.shape()[1]);
    let outp = b.shape()[0];
    // dA = scale · Bᵀ G, dB = scale · G Aᵀ
    let mut da = vec![S::zero(); r * inp];
    let mut db = vec![S::zero(); outp * r];
    for j in 0..outp {
        let grow = g.row(j);
        for q in 0..r {
            let bjq = b.at(j, q) * scale;
            let darow = &mut da[q * inp..(q + 1) * inp];
            for (d, &gv) in darow.iter_mut().zip(grow) {
                *d = *d + bjq * gv;
            }
            let dot: S = grow.iter().zip(a.row(q)).map(|(&gv, &av)| gv * av).sum();
            db[j * r + q] = scale * dot;
        }
    }
    (
        Tensor::from_parts(vec![r, inp], da),
        Tensor::from_parts(vec![outp, r], db),
    )
}

fn concat_cols<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let rows = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_cols of nothing"))?
        .rows();
    if parts.iter().any(|p| p.rank() != 2 || p.rows() != rows) {
        return Err(Error::shape(
            "concat_cols",
            format!("{:?}", parts.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>()),
        ));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![rows, total], data))
}

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error<S: Scalar>(analytic: S, numeric: S) -> S {
    let floor = lit::<S>(GRAD_FLOOR);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// a central finite difference with step `eps`, measured per coordinate by
/// [`relative_error`].
///
/// `f` receives a fresh tape and the node holding `x`, and must return a
/// scalar node.
pub fn finite_diff_check<S, F>(f: F, x: &Tensor<S>, eps: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, NodeId) -> Result<NodeId>,
{
    if eps <= S::zero() {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut tape = Tape::new();
    let input = tape.param(ParamId(0), x.clone());
    let loss = f(&mut tape, input)?;
    let analytic = tape
        .backward(loss)?
        .remove(&ParamId(0))
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval_at = |probe: Tensor<S>| -> Result<S> {
        let mut t = Tape::new();
        let node = t.constant(probe);
        let out = f(&mut t, node)?;
        let v = t.value(out)?.item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("finite difference probe".into()));
        }
        Ok(v)
    };

    let two = count::<S>(2);
    let mut worst = S::zero();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + eps;
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - eps;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (two * eps);
        let err = relative_error(analytic.data()[i], numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite("finite difference comparison".into()));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
