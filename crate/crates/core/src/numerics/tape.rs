use super::{Real, Tensor};
use crate::par;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

/// Attention masking mode.
#[derive(Clone, Debug)]
pub enum AttnMode {
    /// Causal self-attention: query i attends keys 0..=i.
    Causal,
    /// Full attention with per-batch-item valid key length (padding mask).
    Full { kv_valid: Vec<usize> },
}

type BackFn<F> = Box<dyn Fn(&Tensor<F>, &mut GradStore<F>)>;

struct Node<F> {
    back: Option<BackFn<F>>,
}

/// Per-variable gradient accumulator produced by [`Tape::backward`].
pub struct GradStore<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> GradStore<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }

    fn accum(&mut self, v: Var, g: Tensor<F>) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Reverse-mode Wengert tape. Values are recorded eagerly during the
/// forward pass; `backward` replays the recorded nodes in reverse.
pub struct Tape<F> {
    values: Vec<Tensor<F>>,
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new() }
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.values.push(t);
        self.nodes.push(Node { back: None });
        Var(self.values.len() - 1)
    }

    fn push(&mut self, t: Tensor<F>, back: BackFn<F>) -> Var {
        self.values.push(t);
        self.nodes.push(Node { back: Some(back) });
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    /// Back-propagate from a scalar loss. Returns per-variable gradients.
    pub fn backward(&self, loss: Var) -> GradStore<F> {
        assert_eq!(self.values[loss.0].numel(), 1, "backward from non-scalar");
        let mut store = GradStore { grads: vec![None; self.values.len()] };
        store.grads[loss.0] = Some(Tensor::new(
            self.values[loss.0].shape().to_vec(),
            vec![F::one()],
        ));
        for i in (0..self.nodes.len()).rev() {
            if let (Some(back), Some(g)) = (&self.nodes[i].back, store.grads[i].clone()) {
                back(&g, &mut store);
            }
        }
        store
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.values[a.0].clone(), self.values[b.0].clone());
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect(),
        );
        self.push(out, Box::new(move |g, st| {
            st.accum(a, g.clone());
            st.accum(b, g.clone());
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.values[a.0].clone(), self.values[b.0].clone());
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect(),
        );
        self.push(out, Box::new(move |g, st| {
            st.accum(a, g.clone());
            st.accum(b, g.map(|v| -v));
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.values[a.0].clone(), self.values[b.0].clone());
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect(),
        );
        self.push(out, Box::new(move |g, st| {
            let ga = Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(tb.data()).map(|(&gv, &bv)| gv * bv).collect(),
            );
            let gb = Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(ta.data()).map(|(&gv, &av)| gv * av).collect(),
            );
            st.accum(a, ga);
            st.accum(b, gb);
        }))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let ta = self.values[a.0].clone();
        let out = ta.map(|v| v * s);
        self.push(out, Box::new(move |g, st| st.accum(a, g.map(|v| v * s))))
    }

    /// Elementwise multiply by a constant tensor (no gradient to the mask).
    pub fn mul_const(&mut self, a: Var, m: &Tensor<F>) -> Var {
        let ta = self.values[a.0].clone();
        assert_eq!(ta.shape(), m.shape(), "mul_const shape mismatch");
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(m.data()).map(|(&x, &y)| x * y).collect(),
        );
        let m = m.clone();
        self.push(out, Box::new(move |g, st| {
            st.accum(a, Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(m.data()).map(|(&gv, &mv)| gv * mv).collect(),
            ));
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.values[a.0].clone();
        let out = ta.map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Box::new(move |g, st| {
            let ga = Tensor::new(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(ta.data())
                    .map(|(&gv, &av)| if av > F::zero() { gv } else { F::zero() })
                    .collect(),
            );
            st.accum(a, ga);
        }))
    }

    // ── gradient routing ────────────────────────────────────────────

    /// Forward identity; reverse pass contributes zero gradient upstream.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let ta = self.values[a.0].clone();
        self.push(ta, Box::new(|_, _| {}))
    }

    /// Forward value of `z_q`; downstream gradient passes to `z` unchanged,
    /// and `z_q`'s producer receives nothing through this path.
    pub fn straight_through(&mut self, z: Var, z_q: Var) -> Var {
        let (tz, tq) = (self.values[z.0].clone(), self.values[z_q.0].clone());
        assert_eq!(tz.shape(), tq.shape(), "straight_through shape mismatch");
        self.push(tq, Box::new(move |g, st| st.accum(z, g.clone())))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = self.values[a.0].clone();
        let s: F = ta.data().iter().copied().sum();
        self.push(Tensor::scalar(s), Box::new(move |g, st| {
            let gv = g.item();
            st.accum(a, Tensor::full(ta.shape(), gv));
        }))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.values[a.0].clone();
        let n = F::of(ta.numel() as f64);
        let s: F = ta.data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Box::new(move |g, st| {
            let gv = g.item() / n;
            st.accum(a, Tensor::full(ta.shape(), gv));
        }))
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// 2-D matmul: a (m x k) * b (k x n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.values[a.0].clone(), self.values[b.0].clone());
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, F::one(), ta.data(), tb.data(), F::zero(), &mut out);
        self.push(Tensor::new(vec![m, n], out), Box::new(move |g, st| {
            // dA = g * b^T
            let mut da = vec![F::zero(); m * k];
            F::gemm_strided(
                m, n, k, F::one(),
                g.data(), n as isize, 1,
                tb.data(), 1, n as isize,
                F::zero(), &mut da,
            );
            // dB = a^T * g
            let mut db = vec![F::zero(); k * n];
            F::gemm_strided(
                k, m, n, F::one(),
                ta.data(), 1, k as isize,
                g.data(), n as isize, 1,
                F::zero(), &mut db,
            );
            st.accum(a, Tensor::new(vec![m, k], da));
            st.accum(b, Tensor::new(vec![k, n], db));
        }))
    }

    /// Row-broadcast bias add: x (r x c) + bias (c).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (self.values[x.0].clone(), self.values[bias.0].clone());
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(tb.numel(), c, "bias width mismatch");
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o = *o + b;
            }
        }
        self.push(Tensor::new(vec![r, c], out), Box::new(move |g, st| {
            st.accum(x, g.clone());
            let mut gb = vec![F::zero(); c];
            for row in g.data().chunks(c) {
                for (acc, &gv) in gb.iter_mut().zip(row) {
                    *acc = *acc + gv;
                }
            }
            st.accum(bias, Tensor::new(vec![c], gb));
        }))
    }

    /// matmul + bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    /// Gather rows of `table` by index; backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.values[table.0].clone();
        let (rows, c) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < rows, "gather index {id} out of range {rows}");
            out.extend_from_slice(&tt.data()[id * c..(id + 1) * c]);
        }
        let ids = ids.to_vec();
        let n = ids.len();
        self.push(Tensor::new(vec![n, c], out), Box::new(move |g, st| {
            let mut gt = vec![F::zero(); rows * c];
            for (i, &id) in ids.iter().enumerate() {
                let src = &g.data()[i * c..(i + 1) * c];
                let dst = &mut gt[id * c..(id + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            st.accum(table, Tensor::new(vec![rows, c], gt));
        }))
    }

    // ── normalization and losses ────────────────────────────────────

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (tx, tg, tb) = (
            self.values[x.0].clone(),
            self.values[gamma.0].clone(),
            self.values[beta.0].clone(),
        );
        let (r, c) = (tx.rows(), tx.cols());
        assert_eq!(tg.numel(), c);
        assert_eq!(tb.numel(), c);
        let eps = F::of(eps);
        let cf = F::of(c as f64);
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &tx.data()[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let istd = (var + eps).sqrt().recip();
            inv_std[i] = istd;
            for j in 0..c {
                let xh = (row[j] - mean) * istd;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let xhat = Tensor::new(vec![r, c], xhat);
        self.push(Tensor::new(vec![r, c], out), Box::new(move |g, st| {
            let mut gx = vec![F::zero(); r * c];
            let mut gg = vec![F::zero(); c];
            let mut gb = vec![F::zero(); c];
            for i in 0..r {
                let grow = &g.data()[i * c..(i + 1) * c];
                let xh = &xhat.data()[i * c..(i + 1) * c];
                let istd = inv_std[i];
                let mut sum_dxh = F::zero();
                let mut sum_dxh_xh = F::zero();
                for j in 0..c {
                    let dxh = grow[j] * tg.data()[j];
                    sum_dxh = sum_dxh + dxh;
                    sum_dxh_xh = sum_dxh_xh + dxh * xh[j];
                    gg[j] = gg[j] + grow[j] * xh[j];
                    gb[j] = gb[j] + grow[j];
                }
                for j in 0..c {
                    let dxh = grow[j] * tg.data()[j];
                    gx[i * c + j] = istd * (dxh - sum_dxh / cf - xh[j] * sum_dxh_xh / cf);
                }
            }
            st.accum(x, Tensor::new(vec![r, c], gx));
            st.accum(gamma, Tensor::new(vec![c], gg));
            st.accum(beta, Tensor::new(vec![c], gb));
        }))
    }

    /// Masked mean softmax cross-entropy. Rows where `mask` is false
    /// contribute exactly zero loss and zero gradient.
    ///
    /// Panics if no row is unmasked; callers validate batches beforehand.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Var {
        let tl = self.values[logits.0].clone();
        let (r, v) = (tl.rows(), tl.cols());
        assert_eq!(targets.len(), r);
        assert_eq!(mask.len(), r);
        let count = mask.iter().filter(|&&m| m).count();
        assert!(count > 0, "softmax_xent: no unmasked positions");
        let mut probs = vec![F::zero(); r * v];
        let mut loss = F::zero();
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let row = &tl.data()[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                z = z + e;
            }
            for j in 0..v {
                probs[i * v + j] = probs[i * v + j] / z;
            }
            assert!(targets[i] < v, "target id out of vocab");
            loss = loss - probs[i * v + targets[i]].max(F::of(1e-300)).ln();
        }
        let cf = F::of(count as f64);
        let probs = Tensor::new(vec![r, v], probs);
        let targets = targets.to_vec();
        let mask = mask.to_vec();
        self.push(Tensor::scalar(loss / cf), Box::new(move |g, st| {
            let gv = g.item() / cf;
            let mut gl = vec![F::zero(); r * v];
            for i in 0..r {
                if !mask[i] {
                    continue;
                }
                for j in 0..v {
                    let p = probs.data()[i * v + j];
                    let y = if j == targets[i] { F::one() } else { F::zero() };
                    gl[i * v + j] = (p - y) * gv;
                }
            }
            st.accum(logits, Tensor::new(vec![r, v], gl));
        }))
    }

    // ── attention ───────────────────────────────────────────────────

    /// Multi-head scaled dot-product attention over flattened batches.
    ///
    /// `q` is (batch*sq, d); `k`, `v` are (batch*skv, d). Masked keys get
    /// an exact-zero weight, so outputs at position i are bitwise
    /// independent of masked-out inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        sq: usize,
        skv: usize,
        heads: usize,
        mode: AttnMode,
    ) -> Var {
        let (tq, tk, tv) = (
            self.values[q.0].clone(),
            self.values[k.0].clone(),
            self.values[v.0].clone(),
        );
        let d = tq.cols();
        assert_eq!(tq.rows(), batch * sq);
        assert_eq!(tk.rows(), batch * skv);
        assert_eq!(tv.rows(), batch * skv);
        assert_eq!(tk.cols(), d);
        assert_eq!(d % heads, 0, "hidden dim not divisible by heads");
        if let AttnMode::Causal = mode {
            assert_eq!(sq, skv, "causal attention requires sq == skv");
        }
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        // Per (batch, head): contiguous copies, scores, masked softmax.
        let fwd = |bh: usize| -> (Vec<F>, Vec<F>) {
            let (b, h) = (bh / heads, bh % heads);
            let qb = copy_head_block(tq.data(), b, sq, d, h, dh);
            let kb = copy_head_block(tk.data(), b, skv, d, h, dh);
            let vb = copy_head_block(tv.data(), b, skv, d, h, dh);
            let mut scores = vec![F::zero(); sq * skv];
            F::gemm_strided(
                sq, dh, skv, scale,
                &qb, dh as isize, 1,
                &kb, 1, dh as isize,
                F::zero(), &mut scores,
            );
            for i in 0..sq {
                let valid = match &mode {
                    AttnMode::Causal => (i + 1).min(skv),
                    AttnMode::Full { kv_valid } => kv_valid[b].min(skv),
                };
                let row = &mut scores[i * skv..(i + 1) * skv];
                let mx = row[..valid].iter().copied().fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for item in row.iter_mut().take(valid) {
                    *item = (*item - mx).exp();
                    z = z + *item;
                }
                for item in row.iter_mut().take(valid) {
                    *item = *item / z;
                }
                for item in row.iter_mut().skip(valid) {
                    *item = F::zero();
                }
            }
            let mut out = vec![F::zero(); sq * dh];
            F::gemm(sq, skv, dh, F::one(), &scores, &vb, F::zero(), &mut out);
            (out, scores)
        };
        let blocks = par::map_range(batch * heads, fwd);

        let mut out = vec![F::zero(); batch * sq * d];
        let mut weights = vec![F::zero(); batch * heads * sq * skv];
        for (bh, (blk, w)) in blocks.into_iter().enumerate() {
            let (b, h) = (bh / heads, bh % heads);
            scatter_head_block(&mut out, &blk, b, sq, d, h, dh);
            weights[bh * sq * skv..(bh + 1) * sq * skv].copy_from_slice(&w);
        }
        let weights = Tensor::new(vec![batch * heads, sq * skv], weights);

        self.push(Tensor::new(vec![batch * sq, d], out), Box::new(move |g, st| {
            let back = |bh: usize| -> (Vec<F>, Vec<F>, Vec<F>) {
                let (b, h) = (bh / heads, bh % heads);
                let go = copy_head_block(g.data(), b, sq, d, h, dh);
                let qb = copy_head_block(tq.data(), b, sq, d, h, dh);
                let kb = copy_head_block(tk.data(), b, skv, d, h, dh);
                let vb = copy_head_block(tv.data(), b, skv, d, h, dh);
                let w = &weights.data()[bh * sq * skv..(bh + 1) * sq * skv];
                // dV = W^T * gO
                let mut dv = vec![F::zero(); skv * dh];
                F::gemm_strided(
                    skv, sq, dh, F::one(),
                    w, 1, skv as isize,
                    &go, dh as isize, 1,
                    F::zero(), &mut dv,
                );
                // dW = gO * V^T
                let mut dw = vec![F::zero(); sq * skv];
                F::gemm_strided(
                    sq, dh, skv, F::one(),
                    &go, dh as isize, 1,
                    &vb, 1, dh as isize,
                    F::zero(), &mut dw,
                );
                // softmax backward: dS = W .* (dW - rowsum(dW .* W)), then * scale
                let mut ds = vec![F::zero(); sq * skv];
                for i in 0..sq {
                    let wrow = &w[i * skv..(i + 1) * skv];
                    let dwrow = &dw[i * skv..(i + 1) * skv];
                    let dot: F = wrow.iter().zip(dwrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..skv {
                        ds[i * skv + j] = wrow[j] * (dwrow[j] - dot) * scale;
                    }
                }
                // dQ = dS * K ; dK = dS^T * Q
                let mut dq = vec![F::zero(); sq * dh];
                F::gemm(sq, skv, dh, F::one(), &ds, &kb, F::zero(), &mut dq);
                let mut dk = vec![F::zero(); skv * dh];
                F::gemm_strided(
                    skv, sq, dh, F::one(),
                    &ds, 1, skv as isize,
                    &qb, dh as isize, 1,
                    F::zero(), &mut dk,
                );
                (dq, dk, dv)
            };
            let blocks = par::map_range(batch * heads, back);
            let mut gq = vec![F::zero(); batch * sq * d];
            let mut gk = vec![F::zero(); batch * skv * d];
            let mut gv = vec![F::zero(); batch * skv * d];
            for (bh, (dq, dk, dv)) in blocks.into_iter().enumerate() {
                let (b, h) = (bh / heads, bh % heads);
                scatter_head_block(&mut gq, &dq, b, sq, d, h, dh);
                scatter_head_block(&mut gk, &dk, b, skv, d, h, dh);
                scatter_head_block(&mut gv, &dv, b, skv, d, h, dh);
            }
            st.accum(q, Tensor::new(vec![batch * sq, d], gq));
            st.accum(k, Tensor::new(vec![batch * skv, d], gk));
            st.accum(v, Tensor::new(vec![batch * skv, d], gv));
        }))
    }

    // ── temporal convolution ────────────────────────────────────────

    /// Batched 1-D convolution over time. `x` is (batch*t, c_in) with each
    /// batch item contiguous; `w` is (k*c_in, c_out); output is
    /// (batch*t_out, c_out) with t_out = (t + 2*pad - k)/stride + 1.
    #[allow(clippy::too_many_arguments)]
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        batch: usize,
        t: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Var {
        let (tx, tw, tb) = (
            self.values[x.0].clone(),
            self.values[w.0].clone(),
            self.values[bias.0].clone(),
        );
        let c_in = tx.cols();
        assert_eq!(tx.rows(), batch * t);
        assert_eq!(tw.rows(), kernel * c_in);
        let c_out = tw.cols();
        assert_eq!(tb.numel(), c_out);
        assert!(t + 2 * pad >= kernel, "sequence shorter than kernel");
        let t_out = (t + 2 * pad - kernel) / stride + 1;

        // im2col: one row per output position, columns [kernel x c_in].
        let kc = kernel * c_in;
        let mut col = vec![F::zero(); batch * t_out * kc];
        for b in 0..batch {
            for o in 0..t_out {
                let dst = &mut col[(b * t_out + o) * kc..(b * t_out + o + 1) * kc];
                for j in 0..kernel {
                    let ti = (o * stride + j) as isize - pad as isize;
                    if ti >= 0 && (ti as usize) < t {
                        let src = (b * t + ti as usize) * c_in;
                        dst[j * c_in..(j + 1) * c_in]
                            .copy_from_slice(&tx.data()[src..src + c_in]);
                    }
                }
            }
        }
        let mut out = vec![F::zero(); batch * t_out * c_out];
        F::gemm(batch * t_out, kc, c_out, F::one(), &col, tw.data(), F::zero(), &mut out);
        for row in out.chunks_mut(c_out) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o = *o + b;
            }
        }
        let col = Tensor::new(vec![batch * t_out, kc], col);
        self.push(Tensor::new(vec![batch * t_out, c_out], out), Box::new(move |g, st| {
            // dW = col^T * g
            let mut dw = vec![F::zero(); kc * c_out];
            F::gemm_strided(
                kc, batch * t_out, c_out, F::one(),
                col.data(), 1, kc as isize,
                g.data(), c_out as isize, 1,
                F::zero(), &mut dw,
            );
            let mut db = vec![F::zero(); c_out];
            for row in g.data().chunks(c_out) {
                for (acc, &gv) in db.iter_mut().zip(row) {
                    *acc = *acc + gv;
                }
            }
            // dcol = g * W^T, then col2im scatter-add into dx.
            let mut dcol = vec![F::zero(); batch * t_out * kc];
            F::gemm_strided(
                batch * t_out, c_out, kc, F::one(),
                g.data(), c_out as isize, 1,
                tw.data(), 1, c_out as isize,
                F::zero(), &mut dcol,
            );
            let mut dx = vec![F::zero(); batch * t * c_in];
            for b in 0..batch {
                for o in 0..t_out {
                    let src = &dcol[(b * t_out + o) * kc..(b * t_out + o + 1) * kc];
                    for j in 0..kernel {
                        let ti = (o * stride + j) as isize - pad as isize;
                        if ti >= 0 && (ti as usize) < t {
                            let dst = (b * t + ti as usize) * c_in;
                            for cc in 0..c_in {
                                dx[dst + cc] = dx[dst + cc] + src[j * c_in + cc];
                            }
                        }
                    }
                }
            }
            st.accum(x, Tensor::new(vec![batch * t, c_in], dx));
            st.accum(w, Tensor::new(vec![kc, c_out], dw));
            st.accum(bias, Tensor::new(vec![c_out], db));
        }))
    }

    /// Nearest-neighbor temporal upsampling by 2 within each batch item.
    pub fn upsample2(&mut self, x: Var, batch: usize, t: usize) -> Var {
        let tx = self.values[x.0].clone();
        let c = tx.cols();
        assert_eq!(tx.rows(), batch * t);
        let mut out = vec![F::zero(); batch * 2 * t * c];
        for b in 0..batch {
            for i in 0..t {
                let src = &tx.data()[(b * t + i) * c..(b * t + i + 1) * c];
                let d0 = (b * 2 * t + 2 * i) * c;
                out[d0..d0 + c].copy_from_slice(src);
                out[d0 + c..d0 + 2 * c].copy_from_slice(src);
            }
        }
        self.push(Tensor::new(vec![batch * 2 * t, c], out), Box::new(move |g, st| {
            let mut gx = vec![F::zero(); batch * t * c];
            for b in 0..batch {
                for i in 0..t {
                    let s0 = (b * 2 * t + 2 * i) * c;
                    let dst = &mut gx[(b * t + i) * c..(b * t + i + 1) * c];
                    for cc in 0..c {
                        dst[cc] = g.data()[s0 + cc] + g.data()[s0 + c + cc];
                    }
                }
            }
            st.accum(x, Tensor::new(vec![batch * t, c], gx));
        }))
    }
}

fn copy_head_block<F: Real>(
    data: &[F],
    b: usize,
    s: usize,
    d: usize,
    h: usize,
    dh: usize,
) -> Vec<F> {
    let mut out = Vec::with_capacity(s * dh);
    for i in 0..s {
        let base = (b * s + i) * d + h * dh;
        out.extend_from_slice(&data[base..base + dh]);
    }
    out
}

fn scatter_head_block<F: Real>(
    dst: &mut [F],
    blk: &[F],
    b: usize,
    s: usize,
    d: usize,
    h: usize,
    dh: usize,
) {
    for i in 0..s {
        let base = (b * s + i) * d + h * dh;
        dst[base..base + dh].copy_from_slice(&blk[i * dh..(i + 1) * dh]);
    }
}
