//! Causal pre-norm decoder over the (possibly compressed) stream, plus the
//! per-task classification heads read from the final text position.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_normal, stack_forward, AttnContext, AttnMask, BlockParams, Bound, HeadKv, ParamId, Params};
use crate::rope::{PositionTriple, RopeConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub m_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub model_width: usize,
    pub rope: RopeConfig,
    /// Task name to class count.
    pub task_heads: BTreeMap<String, usize>,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads * self.head_dim != self.model_width {
            return Err(Error::Config(format!(
                "n_heads {} × head_dim {} != model_width {}",
                self.n_heads, self.head_dim, self.model_width
            )));
        }
        if self.rope.head_dim() != self.head_dim {
            return Err(Error::Config(format!(
                "rope dimension {} != head_dim {}",
                self.rope.head_dim(),
                self.head_dim
            )));
        }
        if let Some((name, _)) = self.task_heads.iter().find(|(_, &c)| c < 2) {
            return Err(Error::Config(format!("task `{name}` needs at least two classes")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub blocks: Vec<BlockParams>,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub heads: BTreeMap<String, TaskHead>,
}

impl DecoderParams {
    pub fn register<R: Rng>(params: &mut Params, prefix: &str, cfg: &DecoderConfig, ffn: usize, rng: &mut R) -> Self {
        let dm = cfg.model_width;
        let blocks = (0..cfg.m_layers)
            .map(|l| BlockParams::register(params, &format!("{prefix}.b{l}"), dm, cfg.n_heads, cfg.head_dim, ffn, rng))
            .collect();
        let heads = cfg
            .task_heads
            .iter()
            .map(|(name, &c)| {
                let head = TaskHead {
                    w: params.add(
                        format!("{prefix}.head.{name}.w"),
                        init_normal(rng, &[dm, c], 1.0 / (dm as f64).sqrt()),
                    ),
                    b: params.add(format!("{prefix}.head.{name}.b"), Tensor::zeros(&[1, c])),
                };
                (name.clone(), head)
            })
            .collect();
        Self {
            blocks,
            ln_g: params.add(format!("{prefix}.ln_g"), Tensor::full(&[1, dm], 1.0)),
            ln_b: params.add(format!("{prefix}.ln_b"), Tensor::zeros(&[1, dm])),
            heads,
        }
    }
}

pub struct DecoderOutput {
    /// Final-normalized features, one row per input position.
    pub features: Var,
    /// Per-layer, per-head keys and values when requested.
    pub kv: Vec<Vec<HeadKv>>,
}

/// Options that change cost, never values.
#[derive(Clone, Copy, Debug, Default)]
pub struct DecodeOptions<'a> {
    /// `1 × L` additive bias on every attention logit column.
    pub key_bias: Option<&'a Var>,
    /// Query rows per attention block.
    pub row_block: Option<usize>,
    pub keep_kv: bool,
}

pub fn decoder_forward(
    tape: &Tape,
    x: &Var,
    positions: &[PositionTriple],
    cfg: &DecoderConfig,
    dp: &DecoderParams,
    bound: &Bound,
    opts: DecodeOptions<'_>,
) -> Result<DecoderOutput> {
    if x.rows() != positions.len() || x.cols() != cfg.model_width {
        return Err(Error::Shape {
            op: "decoder_forward",
            left: x.shape().to_vec(),
            right: vec![positions.len(), cfg.model_width],
        });
    }
    if dp.blocks.len() != cfg.m_layers {
        return Err(Error::Config(format!(
            "decoder expects {} blocks, got {}",
            cfg.m_layers,
            dp.blocks.len()
        )));
    }
    if dp.blocks.is_empty() {
        return Ok(DecoderOutput {
            features: x.clone(),
            kv: Vec::new(),
        });
    }
    let tables = cfg.rope.tables(positions);
    let ctx = AttnContext {
        tables: &tables,
        mask: &AttnMask::Causal,
        key_bias: opts.key_bias,
        row_block: opts.row_block,
    };
    let out = stack_forward(tape, x, &dp.blocks, bound, &ctx, opts.keep_kv)?;
    let features = tape.layer_norm(&out.x, bound.get(dp.ln_g), bound.get(dp.ln_b))?;
    Ok(DecoderOutput { features, kv: out.kv })
}

/// Logits read from the last row of `features`.
pub fn task_logits(tape: &Tape, features: &Var, task: &str, dp: &DecoderParams, bound: &Bound) -> Result<Var> {
    let head = dp.heads.get(task).ok_or_else(|| Error::UnknownTask(task.to_string()))?;
    if features.rows() == 0 {
        return Err(Error::Invalid("task head over an empty sequence".into()));
    }
    let last = tape.gather(features, &[features.rows() - 1])?;
    tape.add(&tape.matmul(&last, bound.get(head.w))?, bound.get(head.b))
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Cross-entropy loss and argmax prediction for one example.
pub fn task_loss(
    tape: &Tape,
    features: &Var,
    task: &str,
    label: usize,
    dp: &DecoderParams,
    bound: &Bound,
) -> Result<(Var, usize)> {
    let logits = task_logits(tape, features, task, dp, bound)?;
    let pred = argmax(logits.value().data());
    Ok((tape.cross_entropy(&logits, &[label])?, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::RopeMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(m: usize, mode: RopeMode, splits: &[usize]) -> DecoderConfig {
        DecoderConfig {
            m_layers: m,
            n_heads: 2,
            head_dim: 8,
            model_width: 16,
            rope: RopeConfig::new(10000.0, 8, mode, splits).unwrap(),
            task_heads: [("salient_recall".to_string(), 2)].into_iter().collect(),
        }
    }

    fn positions(n: usize) -> Vec<PositionTriple> {
        (0..n as u32).map(|i| PositionTriple::new(3 * i, i % 3, i % 2)).collect()
    }

    #[test]
    fn zero_layers_is_identity() {
        let cfg = config(0, RopeMode::Vanilla, &[2, 1, 1]);
        let mut p = Params::new();
        let dp = DecoderParams::register(&mut p, "d", &cfg, 64, &mut ChaCha8Rng::seed_from_u64(0));
        let tape = Tape::no_grad();
        let x = tape.constant(init_normal(&mut ChaCha8Rng::seed_from_u64(1), &[5, 16], 1.0));
        let out = decoder_forward(&tape, &x, &positions(5), &cfg, &dp, &p.bind(&tape), DecodeOptions::default()).unwrap();
        assert_eq!(out.features.value(), x.value());
    }

    #[test]
    fn causal_prefix_is_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (mode, splits) in [(RopeMode::Vanilla, vec![2, 1, 1]), (RopeMode::Sync, vec![1, 1, 1, 1])] {
            let cfg = config(2, mode, &splits);
            let mut p = Params::new();
            let dp = DecoderParams::register(&mut p, "d", &cfg, 64, &mut rng);
            let tape = Tape::no_grad();
            let b = p.bind(&tape);
            let x = init_normal(&mut rng, &[7, 16], 1.0);
            let base = decoder_forward(&tape, &tape.constant(x.clone()), &positions(7), &cfg, &dp, &b, DecodeOptions::default())
                .unwrap();
            let mut y = x.clone();
            y.data_mut()[4 * 16 + 3] += 1.0;
            let pert = decoder_forward(&tape, &tape.constant(y), &positions(7), &cfg, &dp, &b, DecodeOptions::default()).unwrap();
            for r in 0..4 {
                assert_eq!(base.features.value().row_slice(r), pert.features.value().row_slice(r));
            }
            assert_ne!(base.features.value().row_slice(4), pert.features.value().row_slice(4));
        }
    }

    #[test]
    fn sync_with_empty_final_block_matches_vanilla() {
        let van = config(2, RopeMode::Vanilla, &[2, 1, 1]);
        let syn = config(2, RopeMode::Sync, &[2, 1, 1, 0]);
        let mut p = Params::new();
        let dp = DecoderParams::register(&mut p, "d", &van, 64, &mut ChaCha8Rng::seed_from_u64(3));
        let tape = Tape::no_grad();
        let b = p.bind(&tape);
        let x = tape.constant(init_normal(&mut ChaCha8Rng::seed_from_u64(4), &[6, 16], 1.0));
        let a = decoder_forward(&tape, &x, &positions(6), &van, &dp, &b, DecodeOptions::default()).unwrap();
        let s = decoder_forward(&tape, &x, &positions(6), &syn, &dp, &b, DecodeOptions::default()).unwrap();
        assert_eq!(a.features.value(), s.features.value());
    }

    #[test]
    fn loss_examples() {
        let cfg = config(0, RopeMode::Vanilla, &[2, 1, 1]);
        let mut p = Params::new();
        let dp = DecoderParams::register(&mut p, "d", &cfg, 64, &mut ChaCha8Rng::seed_from_u64(5));
        let head = dp.heads["salient_recall"].clone();
        // Feature row e0 with head weights picking logits [10, -10].
        let mut w = Tensor::zeros(&[16, 2]);
        w.data_mut()[0] = 10.0;
        w.data_mut()[1] = -10.0;
        *p.get_mut(head.w) = w;
        let tape = Tape::no_grad();
        let b = p.bind(&tape);
        let mut f = Tensor::zeros(&[2, 16]);
        f.data_mut()[16] = 1.0;
        let (loss, pred) = task_loss(&tape, &tape.constant(f), "salient_recall", 0, &dp, &b).unwrap();
        let expect = (1.0 + (-20.0f64).exp()).ln();
        assert!((loss.value().item() - expect).abs() < 1e-14);
        assert!((loss.value().item() - 2.061e-9).abs() < 1e-11);
        assert_eq!(pred, 0);

        let (loss, _) = task_loss(&tape, &tape.constant(Tensor::zeros(&[1, 16])), "salient_recall", 1, &dp, &b).unwrap();
        assert!((loss.value().item() - std::f64::consts::LN_2).abs() < 1e-15);

        let err = task_loss(&tape, &tape.constant(Tensor::zeros(&[1, 16])), "captioning", 0, &dp, &b);
        assert!(matches!(err, Err(Error::UnknownTask(_))));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let cfg = config(1, RopeMode::Sync, &[1, 1, 1, 1]);
        let mut p = Params::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dp = DecoderParams::register(&mut p, "d", &cfg, 32, &mut rng);
        let head = dp.heads["salient_recall"].clone();
        let x = init_normal(&mut rng, &[4, 16], 1.0);
        let at = [p.get(head.w).clone(), p.get(head.b).clone()];
        let errs = grad_check(&cfg, &dp, &p, &x, &head, &at);
        assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
    }

    fn grad_check(cfg: &DecoderConfig, dp: &DecoderParams, p: &Params, x: &Tensor, head: &TaskHead, at: &[Tensor]) -> Vec<f64> {
        crate::tape::grad_check_many(
            |tape, vars| {
                let mut q = p.clone();
                *q.get_mut(head.w) = vars[0].value().clone();
                *q.get_mut(head.b) = vars[1].value().clone();
                let mut b = q.bind(tape);
                b.replace(head.w, vars[0].clone());
                b.replace(head.b, vars[1].clone());
                let out = decoder_forward(tape, &tape.constant(x.clone()), &positions(4), cfg, dp, &b, DecodeOptions::default())?;
                Ok(task_loss(tape, &out.features, "salient_recall", 1, dp, &b)?.0)
            },
            at,
            1e-6,
        )
        .unwrap()
    }
}
