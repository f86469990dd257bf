use rand::Rng;

use crate::attention::gate::{DynGateMixer, MixOnTape};
use crate::attention::heads::{
    multi_head_attention, window_self_attention, AttentionRecord, GatingLevel, MhaVars, Partition,
};
use crate::error::{ensure_arg, Result};
use crate::layers::{register, Init, LayerNorm, Linear};
use crate::numerics::{Binder, ParamStore, Parameter, Scalar, Tape, Var};
use crate::windowing::{relative_position_bias_var, relative_table_rows, GridVar};

const WEIGHT_STD: f64 = 0.02;
pub const LAMBDA_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, Init::TruncNormal(WEIGHT_STD), true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, Init::TruncNormal(WEIGHT_STD), true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &mut Binder<T>, x: Var) -> Result<Var> {
        let (w1, b1) = self.fc1.vars(tape, b);
        let (w2, b2) = self.fc2.vars(tape, b);
        crate::attention::heads::mlp_block(tape, x, w1, b1, w2, b2)
    }
}

/// LR-stream double attention with its gate.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub k_lr: Linear,
    pub k_ref: Linear,
    pub v: Linear,
    pub o: Linear,
    pub rpe_self: usize,
    pub rpe_cross: usize,
    pub lambda: usize,
    pub heads: usize,
    pub window: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: BlockDims, rng: &mut impl Rng) -> Result<Self> {
        let lin = |store: &mut ParamStore<T>, part: &str, rng: &mut _| {
            Linear::new(store, &format!("{name}.{part}"), d.dim, d.dim, Init::TruncNormal(WEIGHT_STD), true, rng)
        };
        let rows = relative_table_rows(d.window);
        Ok(Self {
            q: lin(store, "q", rng)?,
            k_lr: lin(store, "k_lr", rng)?,
            k_ref: lin(store, "k_ref", rng)?,
            v: lin(store, "v", rng)?,
            o: lin(store, "o", rng)?,
            rpe_self: register(store, format!("{name}.rpe_self"), &[rows, d.heads], Init::TruncNormal(WEIGHT_STD), rng)?,
            rpe_cross: register(store, format!("{name}.rpe_cross"), &[rows, d.heads], Init::TruncNormal(WEIGHT_STD), rng)?,
            lambda: store.add(Parameter::new(
                format!("{name}.lambda"),
                crate::numerics::Tensor::full([d.heads], T::lit(LAMBDA_INIT)),
            ))?,
            heads: d.heads,
            window: d.window,
        })
    }

    pub fn vars<T: Scalar>(&self, tape: &mut Tape<T>, b: &mut Binder<T>) -> MhaVars {
        let (w_q, b_q) = self.q.vars(tape, b);
        let (w_k_lr, b_k_lr) = self.k_lr.vars(tape, b);
        let (w_k_ref, b_k_ref) = self.k_ref.vars(tape, b);
        let (w_v, b_v) = self.v.vars(tape, b);
        let (w_o, b_o) = self.o.vars(tape, b);
        MhaVars {
            heads: self.heads,
            window: self.window,
            w_q,
            w_k_lr,
            w_k_ref,
            w_v,
            w_o,
            b_q,
            b_k_lr,
            b_k_ref,
            b_v,
            b_o,
            rpe_self: Some(b.var(tape, self.rpe_self)),
            rpe_cross: Some(b.var(tape, self.rpe_cross)),
            lambda: b.var(tape, self.lambda),
        }
    }
}

/// Reference-stream windowed self-attention.
#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub rpe: usize,
    pub heads: usize,
    pub window: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: BlockDims, rng: &mut impl Rng) -> Result<Self> {
        let lin = |store: &mut ParamStore<T>, part: &str, rng: &mut _| {
            Linear::new(store, &format!("{name}.{part}"), d.dim, d.dim, Init::TruncNormal(WEIGHT_STD), true, rng)
        };
        Ok(Self {
            q: lin(store, "q", rng)?,
            k: lin(store, "k", rng)?,
            v: lin(store, "v", rng)?,
            o: lin(store, "o", rng)?,
            rpe: register(
                store,
                format!("{name}.rpe"),
                &[relative_table_rows(d.window), d.heads],
                Init::TruncNormal(WEIGHT_STD),
                rng,
            )?,
            heads: d.heads,
            window: d.window,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        x: &GridVar,
        partition: Partition,
    ) -> Result<Var> {
        let q = self.q.forward(tape, b, x.var)?;
        let k = self.k.forward(tape, b, x.var)?;
        let v = self.v.forward(tape, b, x.var)?;
        let table = b.var(tape, self.rpe);
        let bias = relative_position_bias_var(tape, self.window, table, self.heads)?;
        let o = window_self_attention(tape, q, k, v, x, self.window, partition, self.heads, Some(bias))?;
        self.o.forward(tape, b, o)
    }
}

/// One pre-norm transformer sub-block acting on both streams.
#[derive(Clone, Copy, Debug)]
pub struct SubBlock {
    pub partition: Partition,
    pub lr_norm1: LayerNorm,
    pub ref_norm1: LayerNorm,
    pub lr_attn: CrossAttention,
    pub ref_attn: SelfAttention,
    pub lr_norm2: LayerNorm,
    pub lr_mlp: Mlp,
    pub ref_norm2: LayerNorm,
    pub ref_mlp: Mlp,
}

impl SubBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        partition: Partition,
        d: BlockDims,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = d.dim * d.mlp_ratio;
        Ok(Self {
            partition,
            lr_norm1: LayerNorm::new(store, &format!("{name}.lr_norm1"), d.dim, rng)?,
            ref_norm1: LayerNorm::new(store, &format!("{name}.ref_norm1"), d.dim, rng)?,
            lr_attn: CrossAttention::new(store, &format!("{name}.lr_attn"), d, rng)?,
            ref_attn: SelfAttention::new(store, &format!("{name}.ref_attn"), d, rng)?,
            lr_norm2: LayerNorm::new(store, &format!("{name}.lr_norm2"), d.dim, rng)?,
            lr_mlp: Mlp::new(store, &format!("{name}.lr_mlp"), d.dim, hidden, rng)?,
            ref_norm2: LayerNorm::new(store, &format!("{name}.ref_norm2"), d.dim, rng)?,
            ref_mlp: Mlp::new(store, &format!("{name}.ref_mlp"), d.dim, hidden, rng)?,
        })
    }

    pub fn forward<T: MixOnTape>(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        lr: GridVar,
        reference: GridVar,
        ctx: &mut BlockContext,
    ) -> Result<(GridVar, GridVar)> {
        let lr_n = lr.with_var(self.lr_norm1.forward(tape, b, lr.var)?);
        let ref_n = reference.with_var(self.ref_norm1.forward(tape, b, reference.var)?);
        let mha = self.lr_attn.vars(tape, b);
        let attn = multi_head_attention(tape, &lr_n, &ref_n, &mha, ctx.mixer, ctx.level, ctx.trace.as_deref_mut())?;
        let lr1 = tape.add(attn.var, lr.var)?;
        let lr_m = self.lr_norm2.forward(tape, b, lr1)?;
        let lr_m = self.lr_mlp.forward(tape, b, lr_m)?;
        let lr2 = tape.add(lr_m, lr1)?;

        let ref_a = self.ref_attn.forward(tape, b, &ref_n, self.partition)?;
        let ref1 = tape.add(ref_a, reference.var)?;
        let ref_m = self.ref_norm2.forward(tape, b, ref1)?;
        let ref_m = self.ref_mlp.forward(tape, b, ref_m)?;
        let ref2 = tape.add(ref_m, ref1)?;
        Ok((lr.with_var(lr2), reference.with_var(ref2)))
    }
}

/// Forward-pass settings shared by every block.
pub struct BlockContext<'a> {
    pub mixer: &'a dyn DynGateMixer,
    pub level: GatingLevel,
    pub trace: Option<&'a mut Vec<AttentionRecord>>,
}

/// Local-window sub-block followed by a shifted-window sub-block.
#[derive(Clone, Copy, Debug)]
pub struct DualStreamBlock {
    pub dims: BlockDims,
    pub w: SubBlock,
    pub sw: SubBlock,
}

impl DualStreamBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dims: BlockDims, rng: &mut impl Rng) -> Result<Self> {
        ensure_arg!(
            dims.heads > 0 && dims.dim % dims.heads == 0,
            "embedding width {} does not split into {} heads",
            dims.dim,
            dims.heads
        );
        Ok(Self {
            dims,
            w: SubBlock::new(store, &format!("{name}.w"), Partition::Local, dims, rng)?,
            sw: SubBlock::new(store, &format!("{name}.sw"), Partition::Shifted, dims, rng)?,
        })
    }

    /// Lambda parameter ids of both sub-blocks.
    pub fn lambdas(&self) -> [usize; 2] {
        [self.w.lr_attn.lambda, self.sw.lr_attn.lambda]
    }

    /// Runs both sub-blocks; a trace in `ctx` records the shifted-window
    /// sub-block only.
    pub fn forward<T: MixOnTape>(
        &self,
        tape: &mut Tape<T>,
        b: &mut Binder<T>,
        lr: GridVar,
        reference: GridVar,
        ctx: &mut BlockContext,
    ) -> Result<(GridVar, GridVar)> {
        ensure_arg!(
            lr.same_extent(&reference),
            "LR grid {}x{}x{} and reference grid {}x{}x{} differ",
            lr.height,
            lr.width,
            lr.dim,
            reference.height,
            reference.width,
            reference.dim
        );
        let k = self.dims.window;
        ensure_arg!(
            lr.height % k == 0 && lr.width % k == 0,
            "grid {}x{} is not divisible by window {k}",
            lr.height,
            lr.width
        );
        let trace = ctx.trace.take();
        let (lr, reference) = self.w.forward(tape, b, lr, reference, ctx)?;
        ctx.trace = trace;
        self.sw.forward(tape, b, lr, reference, ctx)
    }
}
