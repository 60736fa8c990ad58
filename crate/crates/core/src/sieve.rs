//! The cross-modal sieve: a bidirectional encoder over the joint stream, a
//! two-layer scorer over audio/video rows, budgeted top-k selection and the
//! straight-through gate that lets the task loss train the scorer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init_normal, stack_forward, AttnContext, AttnMask, BlockParams, Bound, ParamId, Params};
use crate::rope::{PositionTriple, RopeConfig};
use crate::stream::{Modality, StreamLayout};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskMode {
    CrossModal,
    IntraModal,
}

impl MaskMode {
    pub fn name(self) -> &'static str {
        match self {
            MaskMode::CrossModal => "cross_modal_bidirectional",
            MaskMode::IntraModal => "intra_modal_bidirectional",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_modal_bidirectional" | "cross_modal" | "cross" => Ok(Self::CrossModal),
            "intra_modal_bidirectional" | "intra_modal" | "intra" => Ok(Self::IntraModal),
            _ => Err(Error::Config(format!("unknown mask mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Combined,
    Separate,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Combined => "combined",
            PoolMode::Separate => "separate",
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(Self::Combined),
            "separate" => Ok(Self::Separate),
            _ => Err(Error::Config(format!("unknown pool mode `{s}`"))),
        }
    }
}

/// How the hard gate `y` enters the training forward pass. The forward
/// values are identical in every mode because `y` is exactly 1 for kept rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateMode {
    /// Kept rows are multiplied by `y`.
    RowScale,
    /// `y − 1` is added to the decoder attention logits of each kept key.
    KeyBias,
    /// Both of the above.
    Both,
}

impl GateMode {
    pub fn name(self) -> &'static str {
        match self {
            GateMode::RowScale => "row_scale",
            GateMode::KeyBias => "key_bias",
            GateMode::Both => "both",
        }
    }

    pub fn scales_rows(self) -> bool {
        matches!(self, GateMode::RowScale | GateMode::Both)
    }

    pub fn biases_keys(self) -> bool {
        matches!(self, GateMode::KeyBias | GateMode::Both)
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row_scale" => Ok(Self::RowScale),
            "key_bias" => Ok(Self::KeyBias),
            "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown gate mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SieveConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub model_width: usize,
    pub scorer_hidden: usize,
    pub budget_p: f64,
    pub mask_mode: MaskMode,
    pub pool_mode: PoolMode,
    pub gate_mode: GateMode,
    pub rope: RopeConfig,
}

impl SieveConfig {
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
        check_budget(self.budget_p)
    }
}

fn check_budget(p: f64) -> Result<()> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("budget p must lie in (0, 1], got {p}")))
    }
}

/// `max(1, floor(p · n))`. The small tolerance keeps products such as
/// `0.29 · 100` from flooring to 28.
pub fn budget_k(p: f64, n: usize) -> usize {
    ((p * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

#[derive(Clone, Debug)]
pub struct ScorerParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl ScorerParams {
    /// The output layer starts at zero, so every token initially scores the
    /// same and selection starts from the tie-break.
    pub fn register<R: Rng>(params: &mut Params, prefix: &str, dm: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w1: params.add(format!("{prefix}.w1"), init_normal(rng, &[dm, hidden], 1.0 / (dm as f64).sqrt())),
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden])),
            w2: params.add(format!("{prefix}.w2"), Tensor::zeros(&[hidden, 1])),
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(&[1, 1])),
        }
    }
}

/// Encoder attention mask for `mode` over `layout`.
pub fn encoder_mask(mode: MaskMode, modalities: &[Modality]) -> AttnMask {
    match mode {
        MaskMode::CrossModal => AttnMask::Full,
        MaskMode::IntraModal => AttnMask::Groups(modalities.iter().map(|m| m.code()).collect()),
    }
}

/// Contextualize the whole stream (audio, video and text) with `N`
/// bidirectional blocks. `x` is `L × D` in stream order.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    tape: &Tape,
    x: &Var,
    positions: &[PositionTriple],
    modalities: &[Modality],
    config: &SieveConfig,
    blocks: &[BlockParams],
    bound: &Bound,
    row_block: Option<usize>,
) -> Result<Var> {
    if x.rows() != positions.len() || x.rows() != modalities.len() || x.rows() == 0 {
        return Err(Error::Shape {
            op: "encoder_forward",
            left: x.shape().to_vec(),
            right: vec![positions.len(), modalities.len()],
        });
    }
    if x.cols() != config.model_width || blocks.len() != config.n_layers {
        return Err(Error::Config(format!(
            "encoder expects width {} and {} blocks, got {} and {}",
            config.model_width,
            config.n_layers,
            x.cols(),
            blocks.len()
        )));
    }
    if blocks.is_empty() {
        return Ok(x.clone());
    }
    let tables = config.rope.tables(positions);
    let mask = encoder_mask(config.mask_mode, modalities);
    let ctx = AttnContext {
        tables: &tables,
        mask: &mask,
        key_bias: None,
        row_block,
    };
    Ok(stack_forward(tape, x, blocks, bound, &ctx, false)?.x)
}

/// One score per audio/video row: `gelu(T′·W1 + b1)·W2 + b2`. Only the first
/// `n_av` rows are scored; text rows never are.
pub fn score_tokens(tape: &Tape, t_prime: &Var, n_av: usize, sp: &ScorerParams, bound: &Bound) -> Result<Var> {
    if n_av > t_prime.rows() {
        return Err(Error::Shape {
            op: "score_tokens",
            left: t_prime.shape().to_vec(),
            right: vec![n_av],
        });
    }
    let rows: Vec<usize> = (0..n_av).collect();
    let av = if n_av == t_prime.rows() {
        t_prime.clone()
    } else {
        tape.gather(t_prime, &rows)?
    };
    let h = tape.gelu(&tape.add(&tape.matmul(&av, bound.get(sp.w1))?, bound.get(sp.b1))?);
    tape.add(&tape.matmul(&h, bound.get(sp.w2))?, bound.get(sp.b2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub scores: Vec<f64>,
    pub gates: Vec<u8>,
    /// Kept audio/video stream indices, ascending.
    pub selected: Vec<usize>,
    /// `(n_video_kept, n_audio_kept)`.
    pub per_modality: (usize, usize),
    pub k: usize,
}

fn top_by_score(scores: &[f64], pool: &[usize], k: usize) -> Vec<usize> {
    let mut idx = pool.to_vec();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Budgeted top-k over the audio/video pool. `modalities[i]` tags score `i`.
pub fn select_topk(scores: &[f64], modalities: &[Modality], p: f64, pool: PoolMode) -> Result<SelectionResult> {
    check_budget(p)?;
    if scores.len() != modalities.len() || scores.is_empty() {
        return Err(Error::Shape {
            op: "select_topk",
            left: vec![scores.len()],
            right: vec![modalities.len()],
        });
    }
    let n = scores.len();
    let k = budget_k(p, n);
    let video: Vec<usize> = (0..n).filter(|&i| modalities[i] == Modality::Video).collect();
    let audio: Vec<usize> = (0..n).filter(|&i| modalities[i] == Modality::Audio).collect();
    if video.len() + audio.len() != n {
        return Err(Error::Invalid("select_topk pool contains text tokens".into()));
    }
    let mut selected = match pool {
        PoolMode::Combined => top_by_score(scores, &(0..n).collect::<Vec<_>>(), k),
        PoolMode::Separate => {
            let (lv, la) = (video.len(), audio.len());
            let mut kv = ((k * lv) as f64 / n as f64).round() as usize;
            kv = kv.min(lv).max(k.saturating_sub(la));
            let ka = k - kv;
            let mut s = top_by_score(scores, &video, kv);
            s.extend(top_by_score(scores, &audio, ka));
            s
        }
    };
    selected.sort_unstable();
    let mut gates = vec![0u8; n];
    for &i in &selected {
        gates[i] = 1;
    }
    let nv = selected.iter().filter(|&&i| modalities[i] == Modality::Video).count();
    Ok(SelectionResult {
        scores: scores.to_vec(),
        gates,
        per_modality: (nv, k - nv),
        selected,
        k,
    })
}

/// The compressed sequence handed to the decoder.
pub struct GateOutput {
    /// `(k + L_t) × D`: kept rows in stream order, then all text rows.
    pub seq: Var,
    /// Hard gates of the kept rows (`k × 1`) when training.
    pub gate: Option<Var>,
    /// Stream index of every row of `seq`.
    pub kept: Vec<usize>,
}

/// Gather kept rows of `t_prime` (each multiplied by its gate in training)
/// and append the text rows. `scores` is the `n_av × 1` scorer output.
pub fn ste_gate(
    tape: &Tape,
    t_prime: &Var,
    scores: &Var,
    selection: &SelectionResult,
    training: bool,
    mode: GateMode,
) -> Result<GateOutput> {
    let n_av = scores.rows();
    let l = t_prime.rows();
    let text: Vec<usize> = (n_av..l).collect();
    let mut rows = tape.gather(t_prime, &selection.selected)?;
    let gate = if training {
        let s_sel = tape.gather(scores, &selection.selected)?;
        let y = tape.straight_through(&s_sel, Tensor::full(&[selection.k, 1], 1.0))?;
        if mode.scales_rows() {
            rows = tape.mul(&rows, &y)?;
        }
        Some(y)
    } else {
        None
    };
    let seq = if text.is_empty() {
        rows
    } else {
        tape.concat(&[rows, tape.gather(t_prime, &text)?])?
    };
    let mut kept = selection.selected.clone();
    kept.extend(text);
    Ok(GateOutput { seq, gate, kept })
}

/// `1 × (k + L_t)` decoder logit bias: `y − 1` on kept keys, 0 on text keys.
pub fn gate_key_bias(tape: &Tape, gate: &Var, n_text: usize) -> Result<Var> {
    let shifted = tape.add(gate, &tape.constant(Tensor::scalar(-1.0)))?;
    let col = if n_text == 0 {
        shifted
    } else {
        tape.concat(&[shifted, tape.constant(Tensor::zeros(&[n_text, 1]))])?
    };
    tape.transpose(&col)
}

/// Two-layer projection from a concatenated 2×2 block (width 4D) back to D.
/// The first layer is stored as four D-row slices in block order
/// top-left, top-right, bottom-left, bottom-right.
#[derive(Clone, Debug)]
pub struct UnshuffleParams {
    pub w1: [ParamId; 4],
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub gelu: bool,
}

impl UnshuffleParams {
    pub fn register<R: Rng>(params: &mut Params, prefix: &str, dm: usize, hidden: usize, rng: &mut R) -> Self {
        let s = 1.0 / ((4 * dm) as f64).sqrt();
        Self {
            w1: std::array::from_fn(|q| params.add(format!("{prefix}.w1_{q}"), init_normal(rng, &[dm, hidden], s))),
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden])),
            w2: params.add(
                format!("{prefix}.w2"),
                init_normal(rng, &[hidden, dm], 1.0 / (hidden as f64).sqrt()),
            ),
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(&[1, dm])),
            gelu: true,
        }
    }
}

/// Merge each 2×2 spatial block of one frame (`gh·gw × D`, row-major) into a
/// single token positioned at the block's top-left with `h, w` halved.
pub fn intramodal_video_unshuffle(
    tape: &Tape,
    frame: &Var,
    positions: &[PositionTriple],
    grid: (usize, usize),
    up: &UnshuffleParams,
    bound: &Bound,
) -> Result<(Var, Vec<PositionTriple>)> {
    let (gh, gw) = grid;
    if gh % 2 != 0 || gw % 2 != 0 || gh == 0 || gw == 0 {
        return Err(Error::Invalid(format!("frame grid {gh}×{gw} is not even")));
    }
    if frame.rows() != gh * gw || positions.len() != gh * gw {
        return Err(Error::Shape {
            op: "intramodal_video_unshuffle",
            left: frame.shape().to_vec(),
            right: vec![gh * gw],
        });
    }
    let mut quadrant: [Vec<usize>; 4] = Default::default();
    let mut merged_pos = Vec::with_capacity(gh * gw / 4);
    for bh in (0..gh).step_by(2) {
        for bw in (0..gw).step_by(2) {
            for (q, (dh, dw)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                quadrant[q].push((bh + dh) * gw + bw + dw);
            }
            let tl = positions[bh * gw + bw];
            merged_pos.push(PositionTriple::new(tl.t, tl.h / 2, tl.w / 2));
        }
    }
    let mut h: Option<Var> = None;
    for (q, rows) in quadrant.iter().enumerate() {
        let part = tape.matmul(&tape.gather(frame, rows)?, bound.get(up.w1[q]))?;
        h = Some(match h {
            None => part,
            Some(acc) => tape.add(&acc, &part)?,
        });
    }
    let mut h = tape.add(&h.expect("four quadrants"), bound.get(up.b1))?;
    if up.gelu {
        h = tape.gelu(&h);
    }
    let out = tape.add(&tape.matmul(&h, bound.get(up.w2))?, bound.get(up.b2))?;
    Ok((out, merged_pos))
}

/// Stride-4, width-4 temporal convolution: one affine map over each
/// concatenated window of four audio tokens.
#[derive(Clone, Debug)]
pub struct AudioMergeParams {
    pub w: [ParamId; 4],
    pub b: ParamId,
}

impl AudioMergeParams {
    pub fn register<R: Rng>(params: &mut Params, prefix: &str, dm: usize, rng: &mut R) -> Self {
        let s = 1.0 / ((4 * dm) as f64).sqrt();
        Self {
            w: std::array::from_fn(|o| params.add(format!("{prefix}.w_{o}"), init_normal(rng, &[dm, dm], s))),
            b: params.add(format!("{prefix}.b"), Tensor::zeros(&[1, dm])),
        }
    }
}

/// Merge audio tokens four at a time, padding the tail by repeating the last
/// token. Each merged token takes its window's first temporal id.
pub fn intramodal_audio_merge(
    tape: &Tape,
    audio: &Var,
    positions: &[PositionTriple],
    mp: &AudioMergeParams,
    bound: &Bound,
) -> Result<(Var, Vec<PositionTriple>)> {
    let n = audio.rows();
    if n == 0 {
        return Err(Error::Invalid("audio merge over zero tokens".into()));
    }
    if positions.len() != n {
        return Err(Error::Shape {
            op: "intramodal_audio_merge",
            left: audio.shape().to_vec(),
            right: vec![positions.len()],
        });
    }
    let windows = n.div_ceil(4);
    let mut out: Option<Var> = None;
    for o in 0..4 {
        let rows: Vec<usize> = (0..windows).map(|w| (4 * w + o).min(n - 1)).collect();
        let part = tape.matmul(&tape.gather(audio, &rows)?, bound.get(mp.w[o]))?;
        out = Some(match out {
            None => part,
            Some(acc) => tape.add(&acc, &part)?,
        });
    }
    let out = tape.add(&out.expect("four offsets"), bound.get(mp.b))?;
    let pos = (0..windows).map(|w| positions[4 * w]).collect();
    Ok((out, pos))
}

/// Compressed IntraModal baseline stream: every frame unshuffled 4:1 and the
/// audio merged 4:1, kept in chunk order with text appended. Returns the
/// merged embeddings, their positions and modalities.
pub fn intramodal_compress(
    tape: &Tape,
    x: &Var,
    layout: &StreamLayout,
    up: &UnshuffleParams,
    mp: &AudioMergeParams,
    bound: &Bound,
) -> Result<(Var, Vec<PositionTriple>, Vec<Modality>)> {
    let (gh, gw) = layout.frame_grid;
    let cells = gh * gw;
    let mut parts = Vec::new();
    let mut pos = Vec::new();
    let mut mods = Vec::new();
    for (vids, aids) in layout.chunks() {
        for frame_rows in vids.chunks(cells) {
            let fpos: Vec<PositionTriple> = frame_rows.iter().map(|&i| layout.meta[i].pos).collect();
            let (m, p) = intramodal_video_unshuffle(tape, &tape.gather(x, frame_rows)?, &fpos, (gh, gw), up, bound)?;
            mods.extend(std::iter::repeat_n(Modality::Video, p.len()));
            pos.extend(p);
            parts.push(m);
        }
        if !aids.is_empty() {
            let apos: Vec<PositionTriple> = aids.iter().map(|&i| layout.meta[i].pos).collect();
            let (m, p) = intramodal_audio_merge(tape, &tape.gather(x, &aids)?, &apos, mp, bound)?;
            mods.extend(std::iter::repeat_n(Modality::Audio, p.len()));
            pos.extend(p);
            parts.push(m);
        }
    }
    let text: Vec<usize> = (layout.counts.av()..layout.len()).collect();
    if !text.is_empty() {
        parts.push(tape.gather(x, &text)?);
        for &i in &text {
            pos.push(layout.meta[i].pos);
            mods.push(Modality::Text);
        }
    }
    Ok((tape.concat(&parts)?, pos, mods))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Params;
    use crate::rope::RopeMode;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mods(v: usize, a: usize) -> Vec<Modality> {
        let mut m = vec![Modality::Video; v];
        m.extend(vec![Modality::Audio; a]);
        m
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budget_k(0.10, 1000), 100);
        assert_eq!(budget_k(0.29, 100), 29);
        assert_eq!(budget_k(0.001, 10), 1);
        assert_eq!(budget_k(1.0, 7), 7);
    }

    #[test]
    fn four_scores_half_budget() {
        let r = select_topk(&[0.9, 0.2, 0.5, 0.4], &mods(2, 2), 0.5, PoolMode::Combined).unwrap();
        assert_eq!(r.selected, vec![0, 2]);
        assert_eq!(r.gates, vec![1, 0, 1, 0]);
        assert_eq!(r.per_modality, (1, 1));
    }

    #[test]
    fn combined_pool_can_take_only_audio() {
        let scores: Vec<f64> = (0..20).map(|i| if i < 10 { i as f64 } else { 100.0 + i as f64 }).collect();
        let r = select_topk(&scores, &mods(10, 10), 0.5, PoolMode::Combined).unwrap();
        assert_eq!(r.k, 10);
        assert_eq!(r.per_modality, (0, 10));
    }

    #[test]
    fn bad_budget_is_rejected() {
        for p in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(select_topk(&[1.0, 2.0], &mods(1, 1), p, PoolMode::Combined).is_err());
        }
    }

    #[test]
    fn ties_go_to_lower_index() {
        let r = select_topk(&[1.0; 6], &mods(3, 3), 0.5, PoolMode::Combined).unwrap();
        assert_eq!(r.selected, vec![0, 1, 2]);
    }

    fn small_config(n_layers: usize, mask: MaskMode) -> SieveConfig {
        SieveConfig {
            n_layers,
            n_heads: 2,
            head_dim: 4,
            model_width: 8,
            scorer_hidden: 32,
            budget_p: 0.5,
            mask_mode: mask,
            pool_mode: PoolMode::Combined,
            gate_mode: GateMode::RowScale,
            rope: RopeConfig::new(10000.0, 4, RopeMode::Sync, &[1, 0, 0, 1]).unwrap(),
        }
    }

    #[test]
    fn empty_encoder_is_identity() {
        let cfg = small_config(0, MaskMode::CrossModal);
        let tape = Tape::no_grad();
        let x = tape.constant(init_normal(&mut ChaCha8Rng::seed_from_u64(1), &[3, 8], 1.0));
        let pos = vec![PositionTriple::default(); 3];
        let m = vec![Modality::Video, Modality::Audio, Modality::Text];
        let out = encoder_forward(&tape, &x, &pos, &m, &cfg, &[], &Params::new().bind(&tape), None).unwrap();
        assert_eq!(out.value(), x.value());
    }

    #[test]
    fn scorer_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = Params::new();
        let sp = ScorerParams::register(&mut p, "s", 8, 16, &mut rng);
        *p.get_mut(sp.b2) = Tensor::scalar(0.25).reshape(&[1, 1]).unwrap();
        let tape = Tape::no_grad();
        let b = p.bind(&tape);
        let x = init_normal(&mut rng, &[5, 8], 1.0);
        let s = score_tokens(&tape, &tape.constant(x.clone()), 4, &sp, &b).unwrap();
        // Zero output weights: every score equals the bias.
        assert_eq!(s.value().data(), &[0.25; 4]);

        *p.get_mut(sp.w2) = init_normal(&mut rng, &[16, 1], 1.0);
        let b = p.bind(&tape);
        let mut dup = x.clone();
        let row0 = dup.row_slice(0).to_vec();
        dup.data_mut()[8..16].copy_from_slice(&row0);
        let s = score_tokens(&tape, &tape.constant(dup.clone()), 4, &sp, &b).unwrap();
        assert_eq!(s.value().data()[0], s.value().data()[1]);

        // Independent evaluation of the two affine layers.
        let w1 = p.get(sp.w1);
        let w2 = p.get(sp.w2);
        for r in 0..4 {
            let mut out = 0.25;
            for j in 0..16 {
                let mut a = 0.0;
                for c in 0..8 {
                    a += dup.get2(r, c) * w1.get2(c, j);
                }
                let g = 0.5 * a * (1.0 + (0.797_884_560_802_865_4 * (a + 0.044_715 * a * a * a)).tanh());
                out += g * w2.get2(j, 0);
            }
            assert!((out - s.value().data()[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_budget_gate_is_identity_and_training_matches_inference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = init_normal(&mut rng, &[6, 8], 1.0);
        let scores = init_normal(&mut rng, &[4, 1], 1.0);
        let sel = select_topk(scores.data(), &mods(2, 2), 1.0, PoolMode::Combined).unwrap();
        for mode in [GateMode::RowScale, GateMode::KeyBias, GateMode::Both] {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let sv = tape.leaf(scores.clone());
            let train = ste_gate(&tape, &xv, &sv, &sel, true, mode).unwrap();
            let infer = ste_gate(&tape, &xv, &sv, &sel, false, mode).unwrap();
            assert_eq!(train.seq.value(), &x);
            assert_eq!(infer.seq.value(), &x);
            assert_eq!(train.kept, (0..6).collect::<Vec<_>>());
        }
        let sel = select_topk(scores.data(), &mods(2, 2), 0.5, PoolMode::Combined).unwrap();
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let sv = tape.leaf(scores.clone());
        let a = ste_gate(&tape, &xv, &sv, &sel, true, GateMode::Both).unwrap();
        let b = ste_gate(&tape, &xv, &sv, &sel, false, GateMode::Both).unwrap();
        assert_eq!(a.seq.value(), b.seq.value());
        let bias = gate_key_bias(&tape, a.gate.as_ref().unwrap(), 2).unwrap();
        assert_eq!(bias.value().data(), &[0.0; 4]);
    }

    #[test]
    fn single_token_score_gradient_is_row_dot_weight() {
        let v = [0.5, -1.0, 2.0];
        let w = [3.0, 0.25, -1.5];
        let tape = Tape::new();
        let t_prime = tape.leaf(Tensor::from_rows(&[v.to_vec(), vec![9.0, 9.0, 9.0]]).unwrap());
        let scores = tape.leaf(Tensor::from_rows(&[vec![2.0], vec![-1.0]]).unwrap());
        let sel = select_topk(&[2.0, -1.0], &mods(1, 1), 0.5, PoolMode::Combined).unwrap();
        let out = ste_gate(&tape, &t_prime, &scores, &sel, true, GateMode::RowScale).unwrap();
        let loss = tape.sum(&tape.mul(&out.seq, &tape.constant(Tensor::row(&w))).unwrap());
        let g = tape.backward(&loss).unwrap();
        let ds = g.get(&scores).unwrap();
        let expect: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
        assert_eq!(ds.data()[0], expect);
        assert_eq!(ds.data()[1], 0.0);
    }

    #[test]
    fn unshuffle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dm = 3;
        let mut p = Params::new();
        let mut up = UnshuffleParams::register(&mut p, "u", dm, dm, &mut rng);
        up.gelu = false;
        // Identity-extracting projection: keep the top-left token's D coords.
        for q in 0..4 {
            *p.get_mut(up.w1[q]) = if q == 0 { Tensor::eye(dm) } else { Tensor::zeros(&[dm, dm]) };
        }
        *p.get_mut(up.w2) = Tensor::eye(dm);
        let tape = Tape::no_grad();
        let b = p.bind(&tape);
        let frame = init_normal(&mut rng, &[16, dm], 1.0);
        let pos: Vec<PositionTriple> = (0..16).map(|i| PositionTriple::new(7, i / 4, i % 4)).collect();
        let (out, mpos) =
            intramodal_video_unshuffle(&tape, &tape.constant(frame.clone()), &pos, (4, 4), &up, &b).unwrap();
        assert_eq!(out.rows(), 4);
        for (r, tl) in [0usize, 2, 8, 10].iter().enumerate() {
            assert_eq!(out.value().row_slice(r), frame.row_slice(*tl));
        }
        assert_eq!(mpos[3], PositionTriple::new(7, 1, 1));
        let small = tape.constant(init_normal(&mut rng, &[4, dm], 1.0));
        let (one, _) = intramodal_video_unshuffle(&tape, &small, &pos[..4], (2, 2), &up, &b).unwrap();
        assert_eq!(one.rows(), 1);
        assert!(intramodal_video_unshuffle(&tape, &small, &pos[..4], (1, 4), &up, &b).is_err());
    }

    #[test]
    fn audio_merge_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dm = 4;
        let mut p = Params::new();
        let mp = AudioMergeParams::register(&mut p, "a", dm, &mut rng);
        let tape = Tape::no_grad();
        let b = p.bind(&tape);
        let pos = |n: u32| (0..n).map(PositionTriple::degenerate).collect::<Vec<_>>();
        let x8 = tape.constant(init_normal(&mut rng, &[8, dm], 1.0));
        let (m, mpos) = intramodal_audio_merge(&tape, &x8, &pos(8), &mp, &b).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(mpos, vec![PositionTriple::degenerate(0), PositionTriple::degenerate(4)]);
        let x50 = tape.constant(init_normal(&mut rng, &[50, dm], 1.0));
        let (m, mpos) = intramodal_audio_merge(&tape, &x50, &pos(50), &mp, &b).unwrap();
        assert_eq!(m.rows(), 13);
        assert_eq!(mpos[12].t, 48);
        // Averaging kernel over a constant input.
        for o in 0..4 {
            let mut w = Tensor::eye(dm);
            w.data_mut().iter_mut().for_each(|v| *v *= 0.25);
            *p.get_mut(mp.w[o]) = w;
        }
        let b = p.bind(&tape);
        let c = tape.constant(Tensor::full(&[8, dm], 1.5));
        let (m, _) = intramodal_audio_merge(&tape, &c, &pos(8), &mp, &b).unwrap();
        assert!(m.value().data().iter().all(|&v| (v - 1.5).abs() < 1e-15));
        assert!(intramodal_audio_merge(&tape, &tape.constant(Tensor::zeros(&[0, dm])), &[], &mp, &b).is_err());
    }

    proptest! {
        #[test]
        fn budget_and_ratio(
            lv in 1usize..200,
            la in 1usize..200,
            p in 0.001f64..=1.0,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..lv + la).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = mods(lv, la);
            for pool in [PoolMode::Combined, PoolMode::Separate] {
                let r = select_topk(&scores, &m, p, pool).unwrap();
                prop_assert_eq!(r.selected.len(), r.k);
                prop_assert_eq!(r.per_modality.0 + r.per_modality.1, r.k);
                prop_assert_eq!(r.gates.iter().filter(|&&g| g == 1).count(), r.k);
                if pool == PoolMode::Separate {
                    let ideal = r.k as f64 * lv as f64 / (lv + la) as f64;
                    prop_assert!((r.per_modality.0 as f64 - ideal).abs() <= 1.0);
                } else {
                    // Every kept score beats every dropped score.
                    let min_kept = r.selected.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
                    let max_drop = (0..lv + la).filter(|i| r.gates[*i] == 0).map(|i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(min_kept >= max_drop);
                }
            }
        }
    }
}
