//! Parameter storage and the pre-norm transformer block shared by the
//! encoder and the decoder.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rope::{rope_tape, RopeTables};
use crate::tape::{Tape, Var};
use crate::tensor::{counters, Tensor};

/// Additive logit for disallowed (query, key) pairs.
pub const MASK_NEG: f64 = -1e30;

/// Named parameter tensors in registration order.
#[derive(Clone, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
    index: HashMap<String, usize>,
}

/// Handle to one registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        let id = self.values.len();
        assert!(
            self.index.insert(name.clone(), id).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name);
        self.values.push(Rc::new(t));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Register every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf_rc(v.clone())).collect(),
        }
    }

    /// Replace values from another store with identical names and shapes.
    pub fn load_from(&mut self, other: &Params) -> Result<()> {
        for (i, name) in self.names.clone().iter().enumerate() {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if src.shape() != self.values[i].shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    left: self.values[i].shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            self.values[i] = Rc::new(src.clone());
        }
        Ok(())
    }
}

/// Parameters bound to one tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Swap in another variable for one parameter.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

/// Scaled-normal initializer: `N(0, scale²)`.
pub fn init_normal<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, scale).expect("positive scale");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub heads: Vec<HeadParams>,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockParams {
    /// Register a block with `n_heads` heads of width `d` on width `dm`.
    pub fn register<R: Rng>(
        params: &mut Params,
        prefix: &str,
        dm: usize,
        n_heads: usize,
        d: usize,
        ffn: usize,
        rng: &mut R,
    ) -> Self {
        let s_in = 1.0 / (dm as f64).sqrt();
        let s_o = 1.0 / ((d * n_heads) as f64).sqrt();
        let heads = (0..n_heads)
            .map(|h| HeadParams {
                wq: params.add(format!("{prefix}.h{h}.wq"), init_normal(rng, &[dm, d], s_in)),
                wk: params.add(format!("{prefix}.h{h}.wk"), init_normal(rng, &[dm, d], s_in)),
                wv: params.add(format!("{prefix}.h{h}.wv"), init_normal(rng, &[dm, d], s_in)),
                wo: params.add(format!("{prefix}.h{h}.wo"), init_normal(rng, &[d, dm], s_o)),
            })
            .collect();
        Self {
            ln1_g: params.add(format!("{prefix}.ln1.g"), Tensor::full(&[1, dm], 1.0)),
            ln1_b: params.add(format!("{prefix}.ln1.b"), Tensor::zeros(&[1, dm])),
            heads,
            ln2_g: params.add(format!("{prefix}.ln2.g"), Tensor::full(&[1, dm], 1.0)),
            ln2_b: params.add(format!("{prefix}.ln2.b"), Tensor::zeros(&[1, dm])),
            w1: params.add(format!("{prefix}.ffn.w1"), init_normal(rng, &[dm, ffn], s_in)),
            b1: params.add(format!("{prefix}.ffn.b1"), Tensor::zeros(&[1, ffn])),
            w2: params.add(
                format!("{prefix}.ffn.w2"),
                init_normal(rng, &[ffn, dm], 1.0 / (ffn as f64).sqrt()),
            ),
            b2: params.add(format!("{prefix}.ffn.b2"), Tensor::zeros(&[1, dm])),
        }
    }
}

/// Which (query, key) pairs may interact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Every pair.
    Full,
    /// Key index ≤ query index.
    Causal,
    /// Same group id only.
    Groups(Vec<u8>),
}

impl AttnMask {
    fn allowed(&self, q: usize, k: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Causal => k <= q,
            AttnMask::Groups(g) => g[q] == g[k],
        }
    }

    /// Additive mask rows `[r0, r1)` over `n` keys, or `None` when unmasked.
    fn rows(&self, r0: usize, r1: usize, n: usize) -> Option<Tensor> {
        if *self == AttnMask::Full {
            return None;
        }
        let mut data = vec![0.0; (r1 - r0) * n];
        for q in r0..r1 {
            for k in 0..n {
                if !self.allowed(q, k) {
                    data[(q - r0) * n + k] = MASK_NEG;
                }
            }
        }
        Some(Tensor::from_parts(vec![r1 - r0, n], data))
    }
}

/// Per-sequence inputs shared by all layers of one stack.
pub struct AttnContext<'a> {
    pub tables: &'a RopeTables,
    pub mask: &'a AttnMask,
    /// Optional `1 × L` additive logit per key.
    pub key_bias: Option<&'a Var>,
    /// Query rows per attention block; `None` scores all rows at once.
    pub row_block: Option<usize>,
}

/// Keys and values of one head, kept after a forward pass.
pub struct HeadKv {
    pub k: Var,
    pub v: Var,
}

pub struct StackOutput {
    pub x: Var,
    pub kv: Vec<Vec<HeadKv>>,
}

fn attention_head(
    tape: &Tape,
    h: &Var,
    hp: &HeadParams,
    bound: &Bound,
    ctx: &AttnContext<'_>,
    full_mask: Option<&Var>,
) -> Result<(Var, HeadKv)> {
    let d = bound.get(hp.wq).cols();
    let inv = 1.0 / (d as f64).sqrt();
    let q = rope_tape(tape, &tape.matmul(h, bound.get(hp.wq))?, ctx.tables)?;
    let k = rope_tape(tape, &tape.matmul(h, bound.get(hp.wk))?, ctx.tables)?;
    let v = tape.matmul(h, bound.get(hp.wv))?;
    let kt = tape.transpose(&k)?;
    let n = h.rows();

    let score_rows = |qb: &Var, mask: Option<&Var>| -> Result<Var> {
        let mut s = tape.scale(&tape.matmul(qb, &kt)?, inv);
        if let Some(m) = mask {
            s = tape.add(&s, m)?;
        }
        if let Some(b) = ctx.key_bias {
            s = tape.add(&s, b)?;
        }
        let a = tape.softmax(&s);
        tape.matmul(&a, &v)
    };

    let o = match ctx.row_block {
        Some(bs) if bs < n => {
            let mut parts = Vec::with_capacity(n.div_ceil(bs));
            for r0 in (0..n).step_by(bs) {
                let r1 = (r0 + bs).min(n);
                let rows: Vec<usize> = (r0..r1).collect();
                let qb = tape.gather(&q, &rows)?;
                let m = ctx.mask.rows(r0, r1, n).map(|t| tape.constant(t));
                parts.push(score_rows(&qb, m.as_ref())?);
            }
            tape.concat(&parts)?
        }
        _ => score_rows(&q, full_mask)?,
    };
    let out = tape.matmul(&o, bound.get(hp.wo))?;
    Ok((out, HeadKv { k, v }))
}

/// One pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
pub fn block_forward(
    tape: &Tape,
    x: &Var,
    bp: &BlockParams,
    bound: &Bound,
    ctx: &AttnContext<'_>,
    full_mask: Option<&Var>,
) -> Result<(Var, Vec<HeadKv>)> {
    let n = x.rows();
    counters::add_score_pairs((n * n) as u64);
    let h = tape.layer_norm(x, bound.get(bp.ln1_g), bound.get(bp.ln1_b))?;
    let mut attn: Option<Var> = None;
    let mut kv = Vec::with_capacity(bp.heads.len());
    for hp in &bp.heads {
        let (o, cache) = attention_head(tape, &h, hp, bound, ctx, full_mask)?;
        attn = Some(match attn {
            None => o,
            Some(a) => tape.add(&a, &o)?,
        });
        kv.push(cache);
    }
    drop(h);
    let x = match attn {
        Some(a) => tape.add(x, &a)?,
        None => x.clone(),
    };
    // The feed-forward half is row-wise, so it runs in the same row blocks as
    // attention and never holds an L × ffn hidden activation.
    let y = match ctx.row_block {
        Some(bs) if bs < n => {
            let mut parts = Vec::with_capacity(n.div_ceil(bs));
            for r0 in (0..n).step_by(bs) {
                let rows: Vec<usize> = (r0..(r0 + bs).min(n)).collect();
                parts.push(ffn_residual(tape, &tape.gather(&x, &rows)?, bp, bound)?);
            }
            tape.concat(&parts)?
        }
        _ => ffn_residual(tape, &x, bp, bound)?,
    };
    Ok((y, kv))
}

/// `x + FFN(LN(x))`.
fn ffn_residual(tape: &Tape, x: &Var, bp: &BlockParams, bound: &Bound) -> Result<Var> {
    let h = tape.layer_norm(x, bound.get(bp.ln2_g), bound.get(bp.ln2_b))?;
    let f = tape.gelu(&tape.add(&tape.matmul(&h, bound.get(bp.w1))?, bound.get(bp.b1))?);
    drop(h);
    let f = tape.add(&tape.matmul(&f, bound.get(bp.w2))?, bound.get(bp.b2))?;
    tape.add(x, &f)
}

/// Run a stack of blocks. `keep_kv` retains every head's keys and values.
pub fn stack_forward(
    tape: &Tape,
    x: &Var,
    blocks: &[BlockParams],
    bound: &Bound,
    ctx: &AttnContext<'_>,
    keep_kv: bool,
) -> Result<StackOutput> {
    let n = x.rows();
    let full_mask = match ctx.row_block {
        Some(bs) if bs < n => None,
        _ => ctx.mask.rows(0, n, n).map(|t| tape.constant(t)),
    };
    let mut x = x.clone();
    let mut kv = Vec::new();
    for bp in blocks {
        let (y, cache) = block_forward(tape, &x, bp, bound, ctx, full_mask.as_ref())?;
        x = y;
        if keep_kv {
            kv.push(cache);
        }
    }
    Ok(StackOutput { x, kv })
}

/// Analytic forward FLOPs of one block over `n` tokens: dense projections,
/// RoPE rotations excluded, `2·n²·D` for scores and `2·n²·D` for mixing.
pub fn block_flops(n: u64, dm: u64, ffn: u64) -> BlockFlops {
    BlockFlops {
        projections: 2 * n * dm * dm * 4,
        attention: 4 * n * n * dm,
        ffn: 2 * n * dm * ffn * 2,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct BlockFlops {
    pub projections: u64,
    pub attention: u64,
    pub ffn: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.ffn
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{PositionTriple, RopeConfig, RopeMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (Params, BlockParams, Tensor, RopeTables) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::new();
        let bp = BlockParams::register(&mut p, "b", 8, 2, 4, 16, &mut rng);
        let x = init_normal(&mut rng, &[n, 8], 1.0);
        let cfg = RopeConfig::new(10000.0, 4, RopeMode::Sync, &[1, 0, 0, 1]).unwrap();
        let pos: Vec<PositionTriple> = (0..n as u32).map(|i| PositionTriple::new(i * 3, i % 2, 0)).collect();
        (p, bp, x, cfg.tables(&pos))
    }

    #[test]
    fn row_blocked_attention_matches_full() {
        let (p, bp, x, tables) = setup(11);
        for mask in [AttnMask::Full, AttnMask::Causal, AttnMask::Groups(vec![0, 1, 0, 1, 1, 2, 2, 0, 1, 0, 2])] {
            let tape = Tape::no_grad();
            let b = p.bind(&tape);
            let xv = tape.constant(x.clone());
            let full = AttnContext { tables: &tables, mask: &mask, key_bias: None, row_block: None };
            let blocked = AttnContext { row_block: Some(4), ..full };
            let a = stack_forward(&tape, &xv, std::slice::from_ref(&bp), &b, &full, false).unwrap();
            let c = stack_forward(&tape, &xv, std::slice::from_ref(&bp), &b, &blocked, false).unwrap();
            assert!(a.x.value().max_abs_diff(c.x.value()) < 1e-12);
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (p, bp, x, tables) = setup(5);
        let names: Vec<String> = p.names().to_vec();
        let at: Vec<Tensor> = p.iter().map(|(_, t)| t.clone()).collect();
        let mask = AttnMask::Causal;
        let errs = crate::tape::grad_check_many(
            |tape, vars| {
                let b = Bound { vars: vars.to_vec() };
                let ctx = AttnContext { tables: &tables, mask: &mask, key_bias: None, row_block: None };
                let xv = tape.constant(x.clone());
                let out = stack_forward(tape, &xv, std::slice::from_ref(&bp), &b, &ctx, false)?;
                let w = tape.constant(Tensor::full(&[5, 8], 0.3));
                Ok(tape.sum(&tape.mul(&out.x, &w)?))
            },
            &at,
            1e-5,
        )
        .unwrap();
        for (n, e) in names.iter().zip(errs) {
            assert!(e < 1e-5, "{n}: {e}");
        }
    }

    #[test]
    fn score_pairs_are_quadratic() {
        let (p, bp, x, tables) = setup(6);
        let tape = Tape::no_grad();
        let b = p.bind(&tape);
        let ctx = AttnContext { tables: &tables, mask: &AttnMask::Full, key_bias: None, row_block: None };
        counters::reset();
        stack_forward(&tape, &tape.constant(x), &[bp.clone(), bp], &b, &ctx, false).unwrap();
        assert_eq!(counters::score_pairs(), 2 * 36);
    }

    #[test]
    fn flop_model_scales_quadratically() {
        let a = block_flops(100, 64, 256);
        let b = block_flops(200, 64, 256);
        assert_eq!(b.attention, 4 * a.attention);
        assert_eq!(a.total(), a.projections + a.attention + a.ffn);
    }
}
