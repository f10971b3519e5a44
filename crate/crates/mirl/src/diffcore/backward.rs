//! Reverse sweep over the tape.
//!
//! Each backward call propagates into fresh local buffers and then adds the
//! result onto the persistent per-node gradient stores, so running the same
//! loss twice exactly doubles every gradient.

use super::{
    bcast_kind, gelu_grad, gemm_acc, permute_copy, split_axis, Bcast, Graph, MatmulKind,
    MatmulPlan, Op, GATHER_PAD,
};

impl Graph {
    pub(crate) fn backprop(&mut self, seed: usize) {
        let n = self.nodes.len();
        let mut local: Vec<Option<Vec<f64>>> = vec![None; n];
        local[seed] = Some(vec![1.0]);

        for id in (0..=seed).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let g = match local[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch(id, &g, &mut local);
            // merge into the persistent store
            match &mut self.grads[id] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
    }

    fn dispatch(&self, id: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf | Op::Detach(_) => {}
            Op::Add(l, r) => {
                self.acc_into(local, l, g, |acc, g| {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                });
                let kind = self.kind_of(id, l, r);
                self.acc_bcast(local, r, id, kind, g, |gi, _| gi);
            }
            Op::Sub(l, r) => {
                self.acc_into(local, l, g, |acc, g| {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += b;
                    }
                });
                let kind = self.kind_of(id, l, r);
                self.acc_bcast(local, r, id, kind, g, |gi, _| -gi);
            }
            Op::Mul(l, r) => {
                let kind = self.kind_of(id, l, r);
                let last = *self.nodes[id].shape.last().unwrap_or(&1);
                if self.nodes[l].requires_grad {
                    let rv = &self.nodes[r].value;
                    let acc = Self::buf(local, l, self.nodes[l].value.len());
                    for (i, gi) in g.iter().enumerate() {
                        acc[i] += gi * rhs_at(rv, i, kind, last);
                    }
                }
                if self.nodes[r].requires_grad {
                    let lv = &self.nodes[l].value;
                    self.acc_bcast(local, r, id, kind, g, |gi, i| gi * lv[i]);
                }
            }
            Op::Div(l, r) => {
                let kind = self.kind_of(id, l, r);
                let last = *self.nodes[id].shape.last().unwrap_or(&1);
                if self.nodes[l].requires_grad {
                    let rv = &self.nodes[r].value;
                    let acc = Self::buf(local, l, self.nodes[l].value.len());
                    for (i, gi) in g.iter().enumerate() {
                        acc[i] += gi / rhs_at(rv, i, kind, last);
                    }
                }
                if self.nodes[r].requires_grad {
                    let lv = &self.nodes[l].value;
                    let rv = &self.nodes[r].value;
                    self.acc_bcast(local, r, id, kind, g, |gi, i| {
                        let rr = rhs_at(rv, i, kind, last);
                        -gi * lv[i] / (rr * rr)
                    });
                }
            }
            Op::Scale(x, c) => self.acc_into(local, x, g, |acc, g| {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b * c;
                }
            }),
            Op::AddScalar(x, _) => self.acc_into(local, x, g, |acc, g| {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }),
            Op::Neg(x) => self.acc_into(local, x, g, |acc, g| {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a -= b;
                }
            }),
            Op::Gelu(x) => {
                let xv = &self.nodes[x].value;
                self.acc_into(local, x, g, |acc, g| {
                    for (i, (a, b)) in acc.iter_mut().zip(g).enumerate() {
                        *a += b * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Square(x) => {
                let xv = &self.nodes[x].value;
                self.acc_into(local, x, g, |acc, g| {
                    for (i, (a, b)) in acc.iter_mut().zip(g).enumerate() {
                        *a += 2.0 * b * xv[i];
                    }
                });
            }
            Op::Sqrt(x) => {
                let yv = &self.nodes[id].value;
                self.acc_into(local, x, g, |acc, g| {
                    for (i, (a, b)) in acc.iter_mut().zip(g).enumerate() {
                        *a += 0.5 * b / yv[i];
                    }
                });
            }
            Op::Ln(x) => {
                let xv = &self.nodes[x].value;
                self.acc_into(local, x, g, |acc, g| {
                    for (i, (a, b)) in acc.iter_mut().zip(g).enumerate() {
                        *a += b / xv[i];
                    }
                });
            }
            Op::Exp(x) => {
                let yv = &self.nodes[id].value;
                self.acc_into(local, x, g, |acc, g| {
                    for (i, (a, b)) in acc.iter_mut().zip(g).enumerate() {
                        *a += b * yv[i];
                    }
                });
            }
            Op::Matmul(l, r) => self.matmul_backward(id, l, r, g, local),
            Op::Permute(x, axes) => {
                // gradient flows through the inverse permutation
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let back = permute_copy(g, &self.nodes[id].shape, &inv);
                self.acc_into(local, x, &back, |acc, b| {
                    for (a, b) in acc.iter_mut().zip(b) {
                        *a += b;
                    }
                });
            }
            Op::Reshape(x) => self.acc_into(local, x, g, |acc, g| {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }),
            Op::Softmax(x, axis) => {
                let y = &self.nodes[id].value;
                let (outer, nn, inner) = split_axis("softmax", &self.nodes[id].shape, axis).unwrap();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * nn + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..nn {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..nn {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.acc_into(local, x, &dx, |acc, b| {
                    for (a, b) in acc.iter_mut().zip(b) {
                        *a += b;
                    }
                });
            }
            Op::LogSoftmax(x, axis) => {
                let y = &self.nodes[id].value;
                let (outer, nn, inner) =
                    split_axis("log_softmax", &self.nodes[id].shape, axis).unwrap();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * nn + j) * inner + i;
                        let mut gsum = 0.0;
                        for j in 0..nn {
                            gsum += g[at(j)];
                        }
                        for j in 0..nn {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                        }
                    }
                }
                self.acc_into(local, x, &dx, |acc, b| {
                    for (a, b) in acc.iter_mut().zip(b) {
                        *a += b;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.layer_norm_backward(id, x, gain, bias, eps, g, local);
            }
            Op::SumOver(x, axis) | Op::MeanOver(x, axis) => {
                let mean = matches!(self.nodes[id].op, Op::MeanOver(..));
                let (outer, nn, inner) = split_axis("reduce", &self.nodes[x].shape, axis).unwrap();
                let f = if mean { 1.0 / nn as f64 } else { 1.0 };
                if self.nodes[x].requires_grad {
                    let acc = Self::buf(local, x, self.nodes[x].value.len());
                    for o in 0..outer {
                        for j in 0..nn {
                            for i in 0..inner {
                                acc[(o * nn + j) * inner + i] += g[o * inner + i] * f;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) | Op::MeanAll(x) => {
                let mean = matches!(self.nodes[id].op, Op::MeanAll(..));
                let n = self.nodes[x].value.len();
                let f = if mean { g[0] / n.max(1) as f64 } else { g[0] };
                if self.nodes[x].requires_grad {
                    let acc = Self::buf(local, x, n);
                    for a in acc.iter_mut() {
                        *a += f;
                    }
                }
            }
            Op::Concat(ids, axis) => {
                let out_shape = &self.nodes[id].shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0;
                for &part in &ids {
                    let block = self.nodes[part].shape[axis] * inner;
                    if self.nodes[part].requires_grad {
                        let acc = Self::buf(local, part, self.nodes[part].value.len());
                        for o in 0..outer {
                            let src = o * axis_total * inner + offset;
                            for t in 0..block {
                                acc[o * block + t] += g[src + t];
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::SelectRows(x, indices) => {
                if self.nodes[x].requires_grad {
                    let cols = self.nodes[x].shape[1];
                    let acc = Self::buf(local, x, self.nodes[x].value.len());
                    for (s, &r) in indices.iter().enumerate() {
                        for c in 0..cols {
                            acc[r * cols + c] += g[s * cols + c];
                        }
                    }
                }
            }
            Op::ScatterRows {
                base,
                rows,
                indices,
            } => {
                let cols = self.nodes[id].shape[1];
                if self.nodes[rows].requires_grad {
                    let acc = Self::buf(local, rows, self.nodes[rows].value.len());
                    for (s, &r) in indices.iter().enumerate() {
                        for c in 0..cols {
                            acc[s * cols + c] += g[r * cols + c];
                        }
                    }
                }
                if self.nodes[base].requires_grad {
                    // overwritten rows contribute nothing to the base
                    let nrows = self.nodes[id].shape[0];
                    let mut overwritten = vec![false; nrows];
                    for &r in indices.iter() {
                        overwritten[r] = true;
                    }
                    let acc = Self::buf(local, base, self.nodes[base].value.len());
                    for r in 0..nrows {
                        if overwritten[r] {
                            continue;
                        }
                        for c in 0..cols {
                            acc[r * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::GatherElems { src, indices } => {
                if self.nodes[src].requires_grad {
                    let acc = Self::buf(local, src, self.nodes[src].value.len());
                    for (i, &ix) in indices.iter().enumerate() {
                        if ix != GATHER_PAD {
                            acc[ix] += g[i];
                        }
                    }
                }
            }
        }
    }

    fn kind_of(&self, out: usize, l: usize, r: usize) -> Bcast {
        let _ = l;
        bcast_kind("backward", &self.nodes[out].shape, &self.nodes[r].shape).unwrap()
    }

    fn buf<'a>(local: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut Vec<f64> {
        local[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn acc_into(
        &self,
        local: &mut [Option<Vec<f64>>],
        id: usize,
        g: &[f64],
        f: impl Fn(&mut [f64], &[f64]),
    ) {
        if self.nodes[id].requires_grad {
            let acc = Self::buf(local, id, self.nodes[id].value.len());
            f(acc, g);
        }
    }

    /// Accumulate a transformed output gradient into the rhs of a broadcast
    /// op, summing over the broadcast axes.
    fn acc_bcast(
        &self,
        local: &mut [Option<Vec<f64>>],
        r: usize,
        out: usize,
        kind: Bcast,
        g: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) {
        if !self.nodes[r].requires_grad {
            return;
        }
        let rlen = self.nodes[r].value.len();
        let last = *self.nodes[out].shape.last().unwrap_or(&1);
        let acc = Self::buf(local, r, rlen);
        match kind {
            Bcast::Same => {
                for (i, gi) in g.iter().enumerate() {
                    acc[i] += f(*gi, i);
                }
            }
            Bcast::RhsSuffix => {
                for (i, gi) in g.iter().enumerate() {
                    acc[i % rlen] += f(*gi, i);
                }
            }
            Bcast::RhsTrailOne => {
                for (i, gi) in g.iter().enumerate() {
                    acc[i / last] += f(*gi, i);
                }
            }
        }
    }

    fn matmul_backward(
        &self,
        _out: usize,
        l: usize,
        r: usize,
        g: &[f64],
        local: &mut [Option<Vec<f64>>],
    ) {
        let plan = MatmulPlan::resolve(&self.nodes[l].shape, &self.nodes[r].shape).unwrap();
        let (m, k, n, batch) = (plan.m, plan.k, plan.n, plan.batch);
        match plan.kind {
            MatmulKind::Plain | MatmulKind::FoldLeft => {
                let rows = batch * m;
                if self.nodes[l].requires_grad {
                    let b = &self.nodes[r].value;
                    let acc = Self::buf(local, l, self.nodes[l].value.len());
                    // dA = dC * B^T : (rows x n) * (n x k)
                    gemm_acc(rows, n, k, g, false, b, true, acc);
                }
                if self.nodes[r].requires_grad {
                    let a = &self.nodes[l].value;
                    let acc = Self::buf(local, r, self.nodes[r].value.len());
                    // dB = A^T * dC : (k x rows) * (rows x n)
                    gemm_acc(k, rows, n, a, true, g, false, acc);
                }
            }
            MatmulKind::Batched => {
                let (am, bm, cm) = (m * k, k * n, m * n);
                if self.nodes[l].requires_grad {
                    let b = &self.nodes[r].value;
                    let acc = Self::buf(local, l, self.nodes[l].value.len());
                    for t in 0..batch {
                        gemm_acc(
                            m,
                            n,
                            k,
                            &g[t * cm..(t + 1) * cm],
                            false,
                            &b[t * bm..(t + 1) * bm],
                            true,
                            &mut acc[t * am..(t + 1) * am],
                        );
                    }
                }
                if self.nodes[r].requires_grad {
                    let a = &self.nodes[l].value;
                    let acc = Self::buf(local, r, self.nodes[r].value.len());
                    for t in 0..batch {
                        gemm_acc(
                            k,
                            m,
                            n,
                            &a[t * am..(t + 1) * am],
                            true,
                            &g[t * cm..(t + 1) * cm],
                            false,
                            &mut acc[t * bm..(t + 1) * bm],
                        );
                    }
                }
            }
        }
    }

    fn layer_norm_backward(
        &self,
        _out: usize,
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
        g: &[f64],
        local: &mut [Option<Vec<f64>>],
    ) {
        let d = *self.nodes[x].shape.last().unwrap();
        let rows = self.nodes[x].value.len() / d;
        let xv = &self.nodes[x].value;
        let gv = &self.nodes[gain].value;

        let want_x = self.nodes[x].requires_grad;
        let want_gain = self.nodes[gain].requires_grad;
        let want_bias = self.nodes[bias].requires_grad;

        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        let mut dx = if want_x { vec![0.0; xv.len()] } else { Vec::new() };

        let mut xhat = vec![0.0; d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let grow = &g[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                xhat[j] = (row[j] - mu) * inv;
            }
            if want_gain || want_bias {
                for j in 0..d {
                    dgain[j] += grow[j] * xhat[j];
                    dbias[j] += grow[j];
                }
            }
            if want_x {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    let dxh = grow[j] * gv[j];
                    m1 += dxh;
                    m2 += dxh * xhat[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let dxh = grow[j] * gv[j];
                    dx[r * d + j] = inv * (dxh - m1 - xhat[j] * m2);
                }
            }
        }
        if want_x {
            self.acc_into(local, x, &dx, |acc, b| {
                for (a, b) in acc.iter_mut().zip(b) {
                    *a += b;
                }
            });
        }
        if want_gain {
            self.acc_into(local, gain, &dgain, |acc, b| {
                for (a, b) in acc.iter_mut().zip(b) {
                    *a += b;
                }
            });
        }
        if want_bias {
            self.acc_into(local, bias, &dbias, |acc, b| {
                for (a, b) in acc.iter_mut().zip(b) {
                    *a += b;
                }
            });
        }
    }
}

fn rhs_at(rv: &[f64], i: usize, kind: Bcast, last: usize) -> f64 {
    match kind {
        Bcast::Same => rv[i],
        Bcast::RhsSuffix => rv[i % rv.len()],
        Bcast::RhsTrailOne => rv[i / last],
    }
}
