//! Fused windowed-attention primitives with hand-derived adjoints.
//!
//! Token tensors are `[T, D]` in windowed row order: window `w` owns rows
//! `w·L .. (w+1)·L` where `L = k²`. Head `h` owns columns `h·dh .. (h+1)·dh`.
//! Attention matrices are `[heads.len(), T/L, L, L]`, one block per selected
//! head.

use std::rc::Rc;

use crate::error::{ensure_arg, Result};
use crate::numerics::ops::softmax_rows_inplace;
use crate::numerics::tensor::{gemm, MatRef};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// How elements of a mixed tensor map onto heads.
#[derive(Clone, Debug)]
pub enum HeadLayout {
    /// `[T, D]` tokens; element `(t, c)` belongs to head `c / dh`.
    Columns { dh: usize },
    /// Attention blocks; element `i` belongs to `heads[i / block]`.
    Blocks { heads: Rc<[usize]>, block: usize },
}

impl HeadLayout {
    fn head_of(&self, shape: &[usize], i: usize) -> usize {
        match self {
            HeadLayout::Columns { dh } => (i % shape[shape.len() - 1]) / dh,
            HeadLayout::Blocks { heads, block } => heads[i / block],
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    /// Row-softmaxed `scale·Q_h K_hᵀ + bias_h` for each selected head and
    /// window. `bias`, when given, is `[H_all, L, L]` indexed by head id.
    #[allow(clippy::too_many_arguments)]
    pub fn attn_scores(
        &mut self,
        q: Var,
        k: Var,
        bias: Option<Var>,
        heads: Rc<[usize]>,
        dh: usize,
        window_len: usize,
        scale: f64,
    ) -> Result<Var> {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        ensure_arg!(
            qs == ks && qs.len() == 2,
            "attention query {qs:?} and key {ks:?} geometry differ"
        );
        let (t, d) = (qs[0], qs[1]);
        let l = window_len;
        ensure_arg!(l > 0 && t % l == 0, "{t} tokens do not tile into windows of {l}");
        ensure_arg!(dh > 0, "head dimension must be positive");
        ensure_arg!(
            heads.iter().all(|&h| (h + 1) * dh <= d),
            "head columns exceed width {d}"
        );
        if let Some(b) = bias {
            let bs = self.shape(b);
            ensure_arg!(
                bs.len() == 3 && bs[1] == l && bs[2] == l && heads.iter().all(|&h| h < bs[0]),
                "attention bias {bs:?} does not cover heads {heads:?} with window {l}"
            );
        }
        let nw = t / l;
        let scale = T::lit(scale);
        let block = l * l;
        let mut out = vec![T::zero(); heads.len() * nw * block];
        {
            let (qv, kv) = (self.value(q).data(), self.value(k).data());
            let bv = bias.map(|b| self.value(b).data());
            for (s, &h) in heads.iter().enumerate() {
                for w in 0..nw {
                    let off = (s * nw + w) * block;
                    let base = w * l * d + h * dh;
                    gemm(
                        l,
                        dh,
                        l,
                        scale,
                        MatRef::rm(qv, base, d),
                        MatRef::rm(kv, base, d).t(),
                        T::zero(),
                        &mut out,
                        off,
                        l,
                    );
                    if let Some(bv) = bv {
                        for (o, &b) in out[off..off + block].iter_mut().zip(&bv[h * block..(h + 1) * block]) {
                            *o += b;
                        }
                    }
                }
            }
        }
        softmax_rows_inplace(&mut out, l);
        let value = Tensor::from_parts(vec![heads.len(), nw, l, l], out);
        let mut parents = vec![q, k];
        parents.extend(bias);
        let n_bias_heads = bias.map(|b| self.shape(b)[0]);
        Ok(self.push(
            value,
            &parents,
            Box::new(move |ctx| {
                let (a, g) = (ctx.out.data(), ctx.grad.data());
                // dlogits = A ⊙ (g − rowsum(g ⊙ A))
                let mut dlog = vec![T::zero(); a.len()];
                for ((dr, ar), gr) in dlog.chunks_mut(l).zip(a.chunks(l)).zip(g.chunks(l)) {
                    let dot: T = ar.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                    for ((d_, &x), &y) in dr.iter_mut().zip(ar).zip(gr) {
                        *d_ = x * (y - dot);
                    }
                }
                let (qv, kv) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut dq = ctx.needs[0].then(|| vec![T::zero(); t * d]);
                let mut dk = ctx.needs[1].then(|| vec![T::zero(); t * d]);
                let mut db = n_bias_heads.map(|hb| vec![T::zero(); hb * block]);
                for (s, &h) in heads.iter().enumerate() {
                    for w in 0..nw {
                        let off = (s * nw + w) * block;
                        let base = w * l * d + h * dh;
                        if let Some(dq) = dq.as_mut() {
                            gemm(
                                l,
                                l,
                                dh,
                                scale,
                                MatRef::rm(&dlog, off, l),
                                MatRef::rm(kv, base, d),
                                T::one(),
                                dq,
                                base,
                                d,
                            );
                        }
                        if let Some(dk) = dk.as_mut() {
                            gemm(
                                l,
                                l,
                                dh,
                                scale,
                                MatRef::rm(&dlog, off, l).t(),
                                MatRef::rm(qv, base, d),
                                T::one(),
                                dk,
                                base,
                                d,
                            );
                        }
                        if let Some(db) = db.as_mut() {
                            for (o, &x) in db[h * block..(h + 1) * block].iter_mut().zip(&dlog[off..off + block]) {
                                *o += x;
                            }
                        }
                    }
                }
                let mut grads = vec![
                    dq.map(|v| Tensor::from_parts(vec![t, d], v)),
                    dk.map(|v| Tensor::from_parts(vec![t, d], v)),
                ];
                if let Some(hb) = n_bias_heads {
                    grads.push(db.map(|v| Tensor::from_parts(vec![hb, l, l], v)));
                }
                grads
            }),
        ))
    }

    /// `out[w, h] = A[h, w] · V[w, h]` over the selected heads; columns of
    /// unselected heads are zero.
    pub fn attn_apply(&mut self, a: Var, v: Var, heads: Rc<[usize]>, dh: usize) -> Result<Var> {
        let (as_, vs) = (self.shape(a).to_vec(), self.shape(v).to_vec());
        ensure_arg!(
            as_.len() == 4 && vs.len() == 2 && as_[0] == heads.len() && as_[2] == as_[3],
            "attention matrix {as_:?} does not match {} heads",
            heads.len()
        );
        let (nw, l) = (as_[1], as_[2]);
        let (t, d) = (vs[0], vs[1]);
        ensure_arg!(nw * l == t, "attention covers {} tokens, values have {t}", nw * l);
        ensure_arg!(
            heads.iter().all(|&h| (h + 1) * dh <= d),
            "head columns exceed value width {d}"
        );
        let block = l * l;
        let mut out = vec![T::zero(); t * d];
        {
            let (av, vv) = (self.value(a).data(), self.value(v).data());
            for (s, &h) in heads.iter().enumerate() {
                for w in 0..nw {
                    let base = w * l * d + h * dh;
                    gemm(
                        l,
                        l,
                        dh,
                        T::one(),
                        MatRef::rm(av, (s * nw + w) * block, l),
                        MatRef::rm(vv, base, d),
                        T::zero(),
                        &mut out,
                        base,
                        d,
                    );
                }
            }
        }
        let value = Tensor::from_parts(vec![t, d], out);
        Ok(self.push(
            value,
            &[a, v],
            Box::new(move |ctx| {
                let (av, vv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut da = ctx.needs[0].then(|| vec![T::zero(); heads.len() * nw * block]);
                let mut dv = ctx.needs[1].then(|| vec![T::zero(); t * d]);
                for (s, &h) in heads.iter().enumerate() {
                    for w in 0..nw {
                        let off = (s * nw + w) * block;
                        let base = w * l * d + h * dh;
                        if let Some(da) = da.as_mut() {
                            gemm(
                                l,
                                dh,
                                l,
                                T::one(),
                                MatRef::rm(g, base, d),
                                MatRef::rm(vv, base, d).t(),
                                T::zero(),
                                da,
                                off,
                                l,
                            );
                        }
                        if let Some(dv) = dv.as_mut() {
                            gemm(
                                l,
                                l,
                                dh,
                                T::one(),
                                MatRef::rm(av, off, l).t(),
                                MatRef::rm(g, base, d),
                                T::one(),
                                dv,
                                base,
                                d,
                            );
                        }
                    }
                }
                vec![
                    da.map(|x| Tensor::from_parts(vec![heads.len(), nw, l, l], x)),
                    dv.map(|x| Tensor::from_parts(vec![t, d], x)),
                ]
            }),
        ))
    }

    /// `(1 − σ(λ_h))·x + σ(λ_h)·y` per head, differentiable in `λ`.
    pub fn gate_mix(&mut self, x: Var, y: Var, lambda: Var, layout: HeadLayout) -> Result<Var> {
        ensure_arg!(
            self.shape(x) == self.shape(y),
            "gate branches {:?} and {:?} differ",
            self.shape(x),
            self.shape(y)
        );
        let shape = self.shape(x).to_vec();
        let n_heads = self.value(lambda).len();
        let sig: Vec<T> = self
            .value(lambda)
            .data()
            .iter()
            .map(|&l| T::lit(sigmoid(l.as_f64())))
            .collect();
        let value = self.mix_values(x, y, &sig, &layout)?;
        Ok(self.push(
            value,
            &[x, y, lambda],
            Box::new(move |ctx| {
                let (xv, yv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let mut dx = vec![T::zero(); g.len()];
                let mut dy = vec![T::zero(); g.len()];
                let mut dl = vec![T::zero(); n_heads];
                for i in 0..g.len() {
                    let h = layout.head_of(&shape, i);
                    let s = sig[h];
                    dx[i] = (T::one() - s) * g[i];
                    dy[i] = s * g[i];
                    dl[h] += g[i] * (yv[i] - xv[i]);
                }
                for (d, &s) in dl.iter_mut().zip(&sig) {
                    *d *= s * (T::one() - s);
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(shape.clone(), dy)),
                    Some(Tensor::from_parts(vec![n_heads], dl)),
                ]
            }),
        ))
    }

    /// `(1 − w_h)·x + w_h·y` with constant per-head weights.
    pub fn fixed_mix(&mut self, x: Var, y: Var, weights: &[f64], layout: HeadLayout) -> Result<Var> {
        ensure_arg!(
            self.shape(x) == self.shape(y),
            "gate branches {:?} and {:?} differ",
            self.shape(x),
            self.shape(y)
        );
        let shape = self.shape(x).to_vec();
        let w: Vec<T> = weights.iter().map(|&v| T::lit(v)).collect();
        let value = self.mix_values(x, y, &w, &layout)?;
        Ok(self.push(
            value,
            &[x, y],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let mut dx = vec![T::zero(); g.len()];
                let mut dy = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    let s = w[layout.head_of(&shape, i)];
                    dx[i] = (T::one() - s) * g[i];
                    dy[i] = s * g[i];
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), dx)),
                    Some(Tensor::from_parts(shape.clone(), dy)),
                ]
            }),
        ))
    }

    fn mix_values(&self, x: Var, y: Var, w: &[T], layout: &HeadLayout) -> Result<Tensor<T>> {
        let shape = self.shape(x).to_vec();
        let (xv, yv) = (self.value(x).data(), self.value(y).data());
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..xv.len() {
            let h = layout.head_of(&shape, i);
            ensure_arg!(h < w.len(), "no gate weight for head {h}");
            let s = w[h];
            out.push((T::one() - s) * xv[i] + s * yv[i]);
        }
        Ok(Tensor::from_parts(shape, out))
    }
}
