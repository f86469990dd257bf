use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::gate::{DynGateMixer, MixOnTape};
use crate::attention::kernels::HeadLayout;
use crate::error::{ensure_arg, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::windowing::{
    default_shift, invert_permutation, partition_index, relative_position_bias_var, GridVar,
};

/// Window layout of one attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    Local,
    Shifted,
}

impl Partition {
    pub const ALL: [Partition; 2] = [Partition::Local, Partition::Shifted];

    pub fn shift(self, k: usize) -> usize {
        match self {
            Partition::Local => 0,
            Partition::Shifted => default_shift(k),
        }
    }
}

/// Which partition the self and cross branches of a head attend over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionAssignment {
    SelfLocalCrossShifted,
    SelfShiftedCrossLocal,
}

impl PartitionAssignment {
    /// First `⌈H/2⌉` heads take self-local/cross-shifted, the rest the
    /// opposite.
    pub fn for_head(head: usize, num_heads: usize) -> Self {
        if head < num_heads.div_ceil(2) {
            Self::SelfLocalCrossShifted
        } else {
            Self::SelfShiftedCrossLocal
        }
    }

    pub fn self_partition(self) -> Partition {
        match self {
            Self::SelfLocalCrossShifted => Partition::Local,
            Self::SelfShiftedCrossLocal => Partition::Shifted,
        }
    }

    pub fn cross_partition(self) -> Partition {
        match self {
            Self::SelfLocalCrossShifted => Partition::Shifted,
            Self::SelfShiftedCrossLocal => Partition::Local,
        }
    }
}

/// Where the gate combines the two branches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GatingLevel {
    /// `(1−σ)·A_self·V + σ·A_cross·V'`, each branch on its own partition.
    #[default]
    Output,
    /// `((1−σ)·A_self + σ·A_cross)·V`; both score matrices are taken on the
    /// head's self partition so they share a window layout.
    Matrix,
}

/// Cross-attention weights captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub partition: Partition,
    /// Head ids, one per leading block of `weights`.
    pub heads: Vec<usize>,
    /// `[heads.len(), windows, k², k²]`.
    pub weights: Tensor<f64>,
    pub height: usize,
    pub width: usize,
    pub window: usize,
}

impl AttentionRecord {
    /// Grid token index of row `r` of window `w` under this record's
    /// partition.
    pub fn token_of(&self, w: usize, r: usize) -> usize {
        let k = self.window;
        let s = self.partition.shift(k);
        let per_row = self.width / k;
        let (wy, wx) = (w / per_row, w % per_row);
        let (i, j) = (r / k, r % k);
        ((wy * k + i + s) % self.height) * self.width + (wx * k + j + s) % self.width
    }
}

/// Projected token matrices in grid order, `[T, H·dh]`.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub q: Var,
    pub k_lr: Var,
    pub k_ref: Var,
    pub v: Var,
}

/// Everything the double-attention core needs besides the projections.
pub struct DoubleAttention<'a> {
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub dh: usize,
    pub assignments: &'a [PartitionAssignment],
    /// `[H, k², k²]` logit biases.
    pub bias_self: Option<Var>,
    pub bias_cross: Option<Var>,
    /// `[H]` gate logits.
    pub lambda: Var,
    pub mixer: &'a dyn DynGateMixer,
    pub level: GatingLevel,
}

struct PartitionCache {
    index: Rc<[usize]>,
    inverse: Rc<[usize]>,
}

impl PartitionCache {
    fn new(h: usize, w: usize, k: usize, p: Partition) -> Result<Self> {
        let index = partition_index(h, w, k, p.shift(k))?;
        let inverse = invert_permutation(&index);
        Ok(Self {
            index: index.into(),
            inverse: inverse.into(),
        })
    }
}

fn sum_parts<T: Scalar>(tape: &mut Tape<T>, parts: Vec<Var>) -> Result<Option<Var>> {
    let mut it = parts.into_iter();
    let Some(mut acc) = it.next() else {
        return Ok(None);
    };
    for p in it {
        acc = tape.add(acc, p)?;
    }
    Ok(Some(acc))
}

fn record<T: Scalar>(
    tape: &Tape<T>,
    a: Var,
    p: Partition,
    heads: &[usize],
    spec: &DoubleAttention,
    trace: &mut Option<&mut Vec<AttentionRecord>>,
) {
    if let Some(trace) = trace.as_mut() {
        trace.push(AttentionRecord {
            partition: p,
            heads: heads.to_vec(),
            weights: tape.value(a).cast(),
            height: spec.height,
            width: spec.width,
            window: spec.window,
        });
    }
}

/// Gated self/cross attention of every head, returned in grid order with
/// head `h` in columns `h·dh .. (h+1)·dh`. Values always come from the
/// reference stream.
pub fn double_attention<T: MixOnTape>(
    tape: &mut Tape<T>,
    proj: Projections,
    spec: &DoubleAttention,
    mut trace: Option<&mut Vec<AttentionRecord>>,
) -> Result<Var> {
    let (h, w, k, dh) = (spec.height, spec.width, spec.window, spec.dh);
    let n_heads = spec.assignments.len();
    ensure_arg!(
        tape.shape(proj.q) == [h * w, n_heads * dh],
        "query projection {:?} does not match a {h}x{w} grid with {n_heads} heads of {dh}",
        tape.shape(proj.q)
    );
    for v in [proj.k_lr, proj.k_ref, proj.v] {
        ensure_arg!(
            tape.shape(v) == tape.shape(proj.q),
            "projection {:?} differs from query {:?}",
            tape.shape(v),
            tape.shape(proj.q)
        );
    }
    ensure_arg!(
        tape.value(spec.lambda).len() == n_heads,
        "gate has {} entries for {n_heads} heads",
        tape.value(spec.lambda).len()
    );
    let l = k * k;
    let scale = 1.0 / (dh as f64).sqrt();
    let (use_self, use_cross) = (spec.mixer.uses_self(), spec.mixer.uses_cross());
    let mut self_parts = Vec::new();
    let mut cross_parts = Vec::new();
    let mut mixed_parts = Vec::new();
    for p in Partition::ALL {
        let select = |f: fn(PartitionAssignment) -> Partition| -> Rc<[usize]> {
            (0..n_heads).filter(|&i| f(spec.assignments[i]) == p).collect()
        };
        let self_heads = select(PartitionAssignment::self_partition);
        let cross_heads = select(PartitionAssignment::cross_partition);
        let needed = match spec.level {
            GatingLevel::Output => (use_self && !self_heads.is_empty()) || (use_cross && !cross_heads.is_empty()),
            GatingLevel::Matrix => !self_heads.is_empty(),
        };
        if !needed {
            continue;
        }
        let part = PartitionCache::new(h, w, k, p)?;
        let q = tape.gather_rows(proj.q, part.index.clone())?;
        let v = tape.gather_rows(proj.v, part.index.clone())?;
        let scores = |tape: &mut Tape<T>, key: Var, bias: Option<Var>, heads: &Rc<[usize]>| -> Result<Var> {
            let kp = tape.gather_rows(key, part.index.clone())?;
            tape.attn_scores(q, kp, bias, heads.clone(), dh, l, scale)
        };
        match spec.level {
            GatingLevel::Output => {
                if use_self && !self_heads.is_empty() {
                    let a = scores(tape, proj.k_lr, spec.bias_self, &self_heads)?;
                    let o = tape.attn_apply(a, v, self_heads.clone(), dh)?;
                    self_parts.push(tape.gather_rows(o, part.inverse.clone())?);
                }
                if use_cross && !cross_heads.is_empty() {
                    let a = scores(tape, proj.k_ref, spec.bias_cross, &cross_heads)?;
                    record(tape, a, p, &cross_heads, spec, &mut trace);
                    let o = tape.attn_apply(a, v, cross_heads.clone(), dh)?;
                    cross_parts.push(tape.gather_rows(o, part.inverse.clone())?);
                }
            }
            GatingLevel::Matrix => {
                let a_self = if use_self {
                    Some(scores(tape, proj.k_lr, spec.bias_self, &self_heads)?)
                } else {
                    None
                };
                let a_cross = if use_cross {
                    let a = scores(tape, proj.k_ref, spec.bias_cross, &self_heads)?;
                    record(tape, a, p, &self_heads, spec, &mut trace);
                    Some(a)
                } else {
                    None
                };
                let block = tape.value(a_self.or(a_cross).expect("a branch is active")).len() / self_heads.len();
                let layout = HeadLayout::Blocks {
                    heads: self_heads.clone(),
                    block,
                };
                let a = T::mix(spec.mixer, tape, a_self, a_cross, spec.lambda, layout)?;
                let o = tape.attn_apply(a, v, self_heads.clone(), dh)?;
                mixed_parts.push(tape.gather_rows(o, part.inverse.clone())?);
            }
        }
    }
    match spec.level {
        GatingLevel::Output => {
            let s = sum_parts(tape, self_parts)?;
            let c = sum_parts(tape, cross_parts)?;
            T::mix(spec.mixer, tape, s, c, spec.lambda, HeadLayout::Columns { dh })
        }
        GatingLevel::Matrix => Ok(sum_parts(tape, mixed_parts)?.expect("every head has a self partition")),
    }
}

/// Windowed multi-head self-attention on `[T, H·dh]` projections.
#[allow(clippy::too_many_arguments)]
pub fn window_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    grid: &GridVar,
    window: usize,
    partition: Partition,
    heads: usize,
    bias: Option<Var>,
) -> Result<Var> {
    ensure_arg!(
        heads > 0 && grid.dim % heads == 0,
        "width {} does not split into {heads} heads",
        grid.dim
    );
    let dh = tape.shape(q)[1] / heads;
    let part = PartitionCache::new(grid.height, grid.width, window, partition)?;
    let all: Rc<[usize]> = (0..heads).collect();
    let qp = tape.gather_rows(q, part.index.clone())?;
    let kp = tape.gather_rows(k, part.index.clone())?;
    let vp = tape.gather_rows(v, part.index.clone())?;
    let a = tape.attn_scores(qp, kp, bias, all.clone(), dh, window * window, 1.0 / (dh as f64).sqrt())?;
    let o = tape.attn_apply(a, vp, all, dh)?;
    tape.gather_rows(o, part.inverse)
}

/// Row-softmaxed `Q Kᵀ/√dh + bias` for one window (`Q, K: [L, dh]`).
pub fn attention_scores<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, bias: Option<&Tensor<T>>, dh: usize) -> Result<Tensor<T>> {
    ensure_arg!(dh > 0, "head dimension must be positive");
    ensure_arg!(
        q.shape() == k.shape() && q.ndim() == 2 && q.cols() == dh,
        "query {:?} and key {:?} do not share a window of head width {dh}",
        q.shape(),
        k.shape()
    );
    let l = q.rows();
    if let Some(b) = bias {
        ensure_arg!(b.shape() == [l, l], "bias {:?} does not match window of {l}", b.shape());
    }
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let bv = bias.map(|b| tape.constant(b.clone().reshape([1, l, l]).expect("same element count")));
    let a = tape.attn_scores(qv, kv, bv, Rc::from([0usize]), dh, l, 1.0 / (dh as f64).sqrt())?;
    tape.value(a).clone().reshape([l, l])
}

/// Projection weights and biases of a single head, `[D, dh]` each.
#[derive(Clone, Copy, Debug)]
pub struct HeadConfig {
    pub head_index: usize,
    pub dim: usize,
    pub window: usize,
    pub assignment: PartitionAssignment,
    pub w_q: Var,
    pub w_k_lr: Var,
    pub w_k_ref: Var,
    pub w_v: Var,
    pub b_q: Option<Var>,
    pub b_k_lr: Option<Var>,
    pub b_k_ref: Option<Var>,
    pub b_v: Option<Var>,
    /// `[1, k², k²]` logit biases.
    pub bias_self: Option<Var>,
    pub bias_cross: Option<Var>,
}

/// Gated output of one head in grid order, `[T, dh]`. `lambda` is this
/// head's single gate logit.
pub fn gated_head<T: MixOnTape>(
    tape: &mut Tape<T>,
    lr: &GridVar,
    reference: &GridVar,
    cfg: &HeadConfig,
    lambda: Var,
    mixer: &dyn DynGateMixer,
    level: GatingLevel,
) -> Result<Var> {
    ensure_arg!(
        lr.same_extent(reference),
        "LR grid {}x{}x{} and reference grid {}x{}x{} differ",
        lr.height,
        lr.width,
        lr.dim,
        reference.height,
        reference.width,
        reference.dim
    );
    ensure_arg!(
        tape.shape(cfg.w_q) == [lr.dim, cfg.dim],
        "head projection {:?} is not {}x{}",
        tape.shape(cfg.w_q),
        lr.dim,
        cfg.dim
    );
    let proj = Projections {
        q: tape.linear(lr.var, cfg.w_q, cfg.b_q)?,
        k_lr: tape.linear(lr.var, cfg.w_k_lr, cfg.b_k_lr)?,
        k_ref: tape.linear(reference.var, cfg.w_k_ref, cfg.b_k_ref)?,
        v: tape.linear(reference.var, cfg.w_v, cfg.b_v)?,
    };
    let assignments = [cfg.assignment];
    let spec = DoubleAttention {
        height: lr.height,
        width: lr.width,
        window: cfg.window,
        dh: cfg.dim,
        assignments: &assignments,
        bias_self: cfg.bias_self,
        bias_cross: cfg.bias_cross,
        lambda,
        mixer,
        level,
    };
    double_attention(tape, proj, &spec, None)
}

/// Tape handles of a fused multi-head LR attention layer.
#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    pub heads: usize,
    pub window: usize,
    pub w_q: Var,
    pub w_k_lr: Var,
    pub w_k_ref: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub b_q: Option<Var>,
    pub b_k_lr: Option<Var>,
    pub b_k_ref: Option<Var>,
    pub b_v: Option<Var>,
    pub b_o: Option<Var>,
    /// `[(2k−1)², H]` relative position tables.
    pub rpe_self: Option<Var>,
    pub rpe_cross: Option<Var>,
    pub lambda: Var,
}

/// All heads fused, concatenated and projected by `W_O`.
pub fn multi_head_attention<T: MixOnTape>(
    tape: &mut Tape<T>,
    lr: &GridVar,
    reference: &GridVar,
    m: &MhaVars,
    mixer: &dyn DynGateMixer,
    level: GatingLevel,
    trace: Option<&mut Vec<AttentionRecord>>,
) -> Result<GridVar> {
    ensure_arg!(
        lr.same_extent(reference),
        "LR grid {}x{}x{} and reference grid {}x{}x{} differ",
        lr.height,
        lr.width,
        lr.dim,
        reference.height,
        reference.width,
        reference.dim
    );
    let d = tape.shape(m.w_q)[1];
    ensure_arg!(
        m.heads > 0 && d % m.heads == 0,
        "projection width {d} does not split into {} heads",
        m.heads
    );
    ensure_arg!(
        tape.shape(m.w_o) == [d, lr.dim],
        "output projection {:?} does not map {d} head channels to {}",
        tape.shape(m.w_o),
        lr.dim
    );
    let proj = Projections {
        q: tape.linear(lr.var, m.w_q, m.b_q)?,
        k_lr: tape.linear(lr.var, m.w_k_lr, m.b_k_lr)?,
        k_ref: tape.linear(reference.var, m.w_k_ref, m.b_k_ref)?,
        v: tape.linear(reference.var, m.w_v, m.b_v)?,
    };
    let bias_self = m
        .rpe_self
        .map(|t| relative_position_bias_var(tape, m.window, t, m.heads))
        .transpose()?;
    let bias_cross = m
        .rpe_cross
        .map(|t| relative_position_bias_var(tape, m.window, t, m.heads))
        .transpose()?;
    let assignments: Vec<_> = (0..m.heads).map(|h| PartitionAssignment::for_head(h, m.heads)).collect();
    let spec = DoubleAttention {
        height: lr.height,
        width: lr.width,
        window: m.window,
        dh: d / m.heads,
        assignments: &assignments,
        bias_self,
        bias_cross,
        lambda: m.lambda,
        mixer,
        level,
    };
    let mixed = double_attention(tape, proj, &spec, trace)?;
    let out = tape.linear(mixed, m.w_o, m.b_o)?;
    Ok(lr.with_var(out))
}

/// `GeLU(x·W1 + b1)·W2 + b2` per token.
pub fn mlp_block<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w1: Var,
    b1: Option<Var>,
    w2: Var,
    b2: Option<Var>,
) -> Result<Var> {
    ensure_arg!(
        tape.shape(w1)[1] == tape.shape(w2)[0] && tape.shape(w2)[1] == tape.shape(x)[1],
        "MLP weights {:?} and {:?} do not form a {}-wide bottleneck",
        tape.shape(w1),
        tape.shape(w2),
        tape.shape(x)[1]
    );
    let hidden = tape.linear(x, w1, b1)?;
    let act = tape.gelu(hidden);
    tape.linear(act, w2, b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignment_split_favours_first_group() {
        let count = |n: usize| {
            (0..n)
                .filter(|&h| PartitionAssignment::for_head(h, n) == PartitionAssignment::SelfLocalCrossShifted)
                .count()
        };
        assert_eq!(count(4), 2);
        assert_eq!(count(3), 2);
        assert_eq!(count(1), 1);
    }

    #[test]
    fn singleton_window_scores_are_one() {
        let q = Tensor::new([1, 2], vec![0.3, -1.0]).unwrap();
        let a = attention_scores(&q, &q, None, 2).unwrap();
        assert_eq!(a.data(), &[1.0]);
    }

    #[test]
    fn zero_query_gives_uniform_rows() {
        let q = Tensor::<f64>::zeros([4, 3]);
        let k = Tensor::from_fn([4, 3], |i| i as f64);
        let a = attention_scores(&q, &k, None, 3).unwrap();
        assert!(a.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn two_token_scores_match_hand_softmax() {
        let dh = 2;
        let q = Tensor::new([2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let k = Tensor::new([2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        // Q Kᵀ = [[2, 0], [0, 2]]
        let a = attention_scores(&q, &k, None, dh).unwrap();
        let z = 2.0 / 2f64.sqrt();
        let hi = z.exp() / (z.exp() + 1.0);
        let expect = [hi, 1.0 - hi, 1.0 - hi, hi];
        for (x, e) in a.data().iter().zip(expect) {
            assert!((x - e).abs() < 1e-9);
        }
    }

    #[test]
    fn score_geometry_mismatch_is_rejected() {
        let q = Tensor::<f64>::zeros([4, 2]);
        let k = Tensor::<f64>::zeros([3, 2]);
        assert!(attention_scores(&q, &k, None, 2).is_err());
    }

    #[test]
    fn record_maps_shifted_rows_to_grid() {
        let r = AttentionRecord {
            partition: Partition::Shifted,
            heads: vec![0],
            weights: Tensor::zeros([1, 4, 16, 16]),
            height: 8,
            width: 8,
            window: 4,
        };
        let idx = partition_index(8, 8, 4, 2).unwrap();
        for w in 0..4 {
            for row in 0..16 {
                assert_eq!(r.token_of(w, row), idx[w * 16 + row]);
            }
        }
    }
}
