//! The joint model: learned instruction embeddings, the sieve, the decoder
//! and task heads, plus the two comparison paths (full stream, IntraModal
//! compression).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{decoder_forward, task_logits, DecodeOptions, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::nn::{init_normal, BlockParams, Bound, ParamId, Params};
use crate::rope::{PositionTriple, RopeConfig, RopeMode};
use crate::sieve::{
    encoder_forward, gate_key_bias, intramodal_compress, score_tokens, select_topk, ste_gate, AudioMergeParams,
    GateMode, MaskMode, PoolMode, ScorerParams, SelectionResult, SieveConfig, UnshuffleParams,
};
use crate::stream::{Modality, Task, TokenStream};
use crate::tape::{Tape, Var};
use crate::tensor::{counters, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub scorer_hidden: usize,
    pub n_text: usize,
    pub theta_base: f64,
    pub rope_mode: RopeMode,
    pub rope_splits: Vec<usize>,
    pub budget_p: f64,
    pub mask_mode: MaskMode,
    pub pool_mode: PoolMode,
    pub gate_mode: GateMode,
    pub tasks: Vec<Task>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 4,
            enc_layers: 4,
            dec_layers: 8,
            ffn_mult: 4,
            scorer_hidden: 512,
            n_text: 8,
            theta_base: 10000.0,
            rope_mode: RopeMode::Sync,
            rope_splits: vec![5, 4, 4, 3],
            budget_p: 0.2,
            mask_mode: MaskMode::CrossModal,
            pool_mode: PoolMode::Combined,
            gate_mode: GateMode::Both,
            tasks: vec![Task::SalientRecall, Task::EventOrder, Task::AvAlignment],
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.theta_base, self.head_dim(), self.rope_mode, &self.rope_splits)
    }

    pub fn sieve(&self) -> Result<SieveConfig> {
        let c = SieveConfig {
            n_layers: self.enc_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim(),
            model_width: self.d_model,
            scorer_hidden: self.scorer_hidden,
            budget_p: self.budget_p,
            mask_mode: self.mask_mode,
            pool_mode: self.pool_mode,
            gate_mode: self.gate_mode,
            rope: self.rope()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        let c = DecoderConfig {
            m_layers: self.dec_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim(),
            model_width: self.d_model,
            rope: self.rope()?,
            task_heads: self.tasks.iter().map(|t| (t.name().to_string(), t.n_classes())).collect(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks configured".into()));
        }
        self.sieve()?;
        self.decoder()?;
        Ok(())
    }
}

/// Which forward path to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Path {
    /// Encoder, scorer, top-k, gate, decoder.
    Sieve,
    /// Decoder over the whole uncompressed stream.
    Full,
    /// 2×2 video unshuffle and 4:1 audio merge, then the decoder.
    IntraModal,
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Path::Sieve => "sieve",
            Path::Full => "full",
            Path::IntraModal => "intramodal",
        })
    }
}

impl FromStr for Path {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sieve" => Ok(Path::Sieve),
            "full" => Ok(Path::Full),
            "intramodal" => Ok(Path::IntraModal),
            _ => Err(Error::Config(format!("unknown path `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub path: Path,
    pub training: bool,
    pub row_block: Option<usize>,
    pub keep_kv: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            path: Path::Sieve,
            training: false,
            row_block: None,
            keep_kv: false,
        }
    }
}

/// Per-stage wall time and counted matmul FLOPs of one forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct StageStats {
    pub encoder: Duration,
    pub selection: Duration,
    pub decoder: Duration,
    pub encoder_flops: u64,
    pub selection_flops: u64,
    pub decoder_flops: u64,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub selection: Option<SelectionResult>,
    /// Scorer output (`n_av × 1`) on the sieve path.
    pub scores: Option<Var>,
    /// Straight-through gate of the kept rows when training.
    pub gate: Option<Var>,
    /// Stream index (or merged-token index) of every decoder input row.
    pub kept: Vec<usize>,
    pub decoder_len: usize,
    pub stats: StageStats,
}

/// Parameters and configuration of the whole pipeline.
#[derive(Clone)]
pub struct EchoModel {
    pub config: ModelConfig,
    pub params: Params,
    pub text: BTreeMap<Task, ParamId>,
    pub encoder: Vec<BlockParams>,
    pub scorer: ScorerParams,
    pub decoder: DecoderParams,
    pub unshuffle: UnshuffleParams,
    pub audio_merge: AudioMergeParams,
}

impl EchoModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let dm = config.d_model;
        let ffn = config.ffn_mult * dm;
        let text = config
            .tasks
            .iter()
            .map(|&t| {
                let id = params.add(format!("text.{}", t.name()), init_normal(&mut rng, &[config.n_text, dm], 1.0));
                (t, id)
            })
            .collect();
        let encoder = (0..config.enc_layers)
            .map(|l| BlockParams::register(&mut params, &format!("enc.b{l}"), dm, config.n_heads, config.head_dim(), ffn, &mut rng))
            .collect();
        let scorer = ScorerParams::register(&mut params, "scorer", dm, config.scorer_hidden, &mut rng);
        let decoder = DecoderParams::register(&mut params, "dec", &config.decoder()?, ffn, &mut rng);
        let unshuffle = UnshuffleParams::register(&mut params, "intra.video", dm, dm, &mut rng);
        let audio_merge = AudioMergeParams::register(&mut params, "intra.audio", dm, &mut rng);
        Ok(Self {
            config,
            params,
            text,
            encoder,
            scorer,
            decoder,
            unshuffle,
            audio_merge,
        })
    }

    /// Same parameters under a different configuration (ablation overrides).
    /// Only settings that leave parameter shapes intact may change.
    pub fn with_overrides(&self, config: ModelConfig) -> Result<Self> {
        let c = &self.config;
        if config.d_model != c.d_model
            || config.n_heads != c.n_heads
            || config.enc_layers != c.enc_layers
            || config.dec_layers != c.dec_layers
            || config.ffn_mult != c.ffn_mult
            || config.scorer_hidden != c.scorer_hidden
            || config.n_text != c.n_text
            || config.tasks != c.tasks
        {
            return Err(Error::Config("override changes parameter shapes".into()));
        }
        config.validate()?;
        let mut m = self.clone();
        m.config = config;
        Ok(m)
    }

    /// Stream embeddings with the task's instruction rows in place of the
    /// text placeholders.
    pub fn input(&self, tape: &Tape, bound: &Bound, stream: &TokenStream, task: Task) -> Result<Var> {
        let counts = stream.counts();
        if counts.text != self.config.n_text || stream.embeddings.cols() != self.config.d_model {
            return Err(Error::Config(format!(
                "stream has {} text rows of width {}, model expects {} of width {}",
                counts.text,
                stream.embeddings.cols(),
                self.config.n_text,
                self.config.d_model
            )));
        }
        let text = bound.get(*self.text.get(&task).ok_or_else(|| Error::UnknownTask(task.name().into()))?);
        let av = tape.constant(stream.av_embeddings());
        if counts.text == 0 {
            return Ok(av);
        }
        tape.concat(&[av, text.clone()])
    }

    pub fn forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        stream: &TokenStream,
        task: Task,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let x = self.input(tape, bound, stream, task)?;
        let dcfg = self.config.decoder()?;
        let layout = &stream.layout;
        let mut stats = StageStats::default();
        let mut selection = None;
        let mut score_var = None;
        let mut gate_var = None;
        let f0 = counters::matmul_flops();
        let t0 = Instant::now();

        let (seq, positions, kept, bias): (Var, Vec<PositionTriple>, Vec<usize>, Option<Var>) = match opts.path {
            Path::Full => (x, layout.positions(), (0..layout.len()).collect(), None),
            Path::IntraModal => {
                let (m, pos, _) = intramodal_compress(tape, &x, layout, &self.unshuffle, &self.audio_merge, bound)?;
                stats.selection = t0.elapsed();
                stats.selection_flops = counters::matmul_flops() - f0;
                let kept = (0..m.rows()).collect();
                (m, pos, kept, None)
            }
            Path::Sieve => {
                let scfg = self.config.sieve()?;
                let modalities = layout.modalities();
                let t_prime = encoder_forward(
                    tape,
                    &x,
                    &layout.positions(),
                    &modalities,
                    &scfg,
                    &self.encoder,
                    bound,
                    opts.row_block,
                )?;
                drop(x);
                stats.encoder = t0.elapsed();
                let f1 = counters::matmul_flops();
                stats.encoder_flops = f1 - f0;
                let t1 = Instant::now();
                let n_av = layout.counts.av();
                let scores = score_tokens(tape, &t_prime, n_av, &self.scorer, bound)?;
                let sel = select_topk(scores.value().data(), &modalities[..n_av], scfg.budget_p, scfg.pool_mode)?;
                let gated = ste_gate(tape, &t_prime, &scores, &sel, opts.training, scfg.gate_mode)?;
                drop(t_prime);
                let bias = match &gated.gate {
                    Some(y) if scfg.gate_mode.biases_keys() => Some(gate_key_bias(tape, y, layout.counts.text)?),
                    _ => None,
                };
                let pos = gated.kept.iter().map(|&i| layout.meta[i].pos).collect();
                selection = Some(sel);
                score_var = Some(scores);
                gate_var = gated.gate;
                stats.selection = t1.elapsed();
                stats.selection_flops = counters::matmul_flops() - f1;
                (gated.seq, pos, gated.kept, bias)
            }
        };

        let f2 = counters::matmul_flops();
        let t2 = Instant::now();
        let decoder_len = seq.rows();
        let out = decoder_forward(
            tape,
            &seq,
            &positions,
            &dcfg,
            &self.decoder,
            bound,
            DecodeOptions {
                key_bias: bias.as_ref(),
                row_block: opts.row_block,
                keep_kv: opts.keep_kv,
            },
        )?;
        drop(seq);
        let logits = task_logits(tape, &out.features, task.name(), &self.decoder, bound)?;
        drop(out);
        stats.decoder = t2.elapsed();
        stats.decoder_flops = counters::matmul_flops() - f2;
        Ok(ForwardOutput {
            logits,
            selection,
            scores: score_var,
            gate: gate_var,
            kept,
            decoder_len,
            stats,
        })
    }

    /// Loss and prediction for one labelled stream.
    pub fn loss(
        &self,
        tape: &Tape,
        bound: &Bound,
        stream: &TokenStream,
        task: Task,
        label: usize,
        opts: ForwardOptions,
    ) -> Result<(Var, ForwardOutput)> {
        let out = self.forward(tape, bound, stream, task, opts)?;
        let loss = tape.cross_entropy(&out.logits, &[label])?;
        Ok((loss, out))
    }

    /// Scores of the audio/video tokens, no gradients.
    pub fn scores(&self, stream: &TokenStream, task: Task) -> Result<Vec<f64>> {
        let tape = Tape::no_grad();
        let bound = self.params.bind(&tape);
        let x = self.input(&tape, &bound, stream, task)?;
        let layout = &stream.layout;
        let t_prime = encoder_forward(
            &tape,
            &x,
            &layout.positions(),
            &layout.modalities(),
            &self.config.sieve()?,
            &self.encoder,
            &bound,
            None,
        )?;
        Ok(score_tokens(&tape, &t_prime, layout.counts.av(), &self.scorer, &bound)?
            .value()
            .data()
            .to_vec())
    }

    /// Modalities of the audio/video pool of `stream`.
    pub fn pool_modalities(stream: &TokenStream) -> Vec<Modality> {
        let n = stream.counts().av();
        stream.layout.meta[..n].iter().map(|m| m.modality).collect()
    }
}

/// Flattened parameter values in registration order.
pub fn flat_values(params: &Params) -> Vec<f64> {
    params.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

/// Replace every parameter value from `values` (registration order).
pub fn set_flat_values(params: &mut Params, values: &[f64]) -> Result<()> {
    if values.len() != params.total_values() {
        return Err(Error::DataLength {
            shape: vec![params.total_values()],
            len: values.len(),
        });
    }
    let mut off = 0;
    for i in 0..params.len() {
        let id = ParamId(i);
        let t = params.get_mut(id);
        let n = t.numel();
        t.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Random stream embeddings for benchmarking, shaped like `stream`.
pub fn bench_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    init_normal(&mut ChaCha8Rng::seed_from_u64(seed), &[rows, cols], 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{make_scene, SceneTemplate, World};

    fn small() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            scorer_hidden: 64,
            rope_splits: vec![1, 1, 1, 1],
            ..ModelConfig::default()
        }
    }

    fn scene(task: Task) -> crate::stream::Scene {
        let tpl = SceneTemplate {
            d_model: 16,
            duration_s: 2.56,
            ..SceneTemplate::default()
        };
        let world = World::new(16, tpl.world_seed).unwrap();
        make_scene(&tpl, &world, task, 1, 0).unwrap()
    }

    #[test]
    fn every_parameter_gets_a_finite_gradient() {
        let mut model = EchoModel::new(small(), 3).unwrap();
        // The zero-initialized scorer output would block gradient to its first layer.
        *model.params.get_mut(model.scorer.w2) = bench_tensor(64, 1, 9);
        let sc = scene(Task::SalientRecall);
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let opts = ForwardOptions {
            training: true,
            ..ForwardOptions::default()
        };
        let (loss, out) = model.loss(&tape, &bound, &sc.stream, Task::SalientRecall, sc.truth.label, opts).unwrap();
        assert_eq!(out.decoder_len, out.selection.as_ref().unwrap().k + 8);
        let g = tape.backward(&loss).unwrap();
        for (name, v) in model.params.names().iter().zip(bound.vars()) {
            let gv = g.get_or_zeros(v);
            assert!(gv.is_finite(), "{name}");
            let used = !name.starts_with("intra.") && !name.starts_with("text.") || name == "text.salient_recall";
            if used && !name.starts_with("dec.head.") {
                assert!(gv.norm() > 0.0, "{name} has zero gradient");
            }
        }
    }

    #[test]
    fn paths_have_expected_decoder_lengths() {
        let model = EchoModel::new(small(), 4).unwrap();
        let sc = scene(Task::EventOrder);
        let tape = Tape::no_grad();
        let bound = model.params.bind(&tape);
        let l = sc.stream.len();
        let run = |path| {
            model
                .forward(&tape, &bound, &sc.stream, Task::EventOrder, ForwardOptions { path, ..Default::default() })
                .unwrap()
                .decoder_len
        };
        assert_eq!(run(Path::Full), l);
        let c = sc.stream.counts();
        assert!(run(Path::IntraModal) < c.av() / 3 + c.text + 4);
    }

    #[test]
    fn blocked_forward_matches_plain() {
        let model = EchoModel::new(small(), 5).unwrap();
        let sc = scene(Task::AvAlignment);
        let tape = Tape::no_grad();
        let bound = model.params.bind(&tape);
        let a = model.forward(&tape, &bound, &sc.stream, Task::AvAlignment, ForwardOptions::default()).unwrap();
        let b = model
            .forward(
                &tape,
                &bound,
                &sc.stream,
                Task::AvAlignment,
                ForwardOptions {
                    row_block: Some(7),
                    keep_kv: true,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(a.logits.value().max_abs_diff(b.logits.value()) < 1e-12);
        assert_eq!(a.kept, b.kept);
    }

    #[test]
    fn overrides_keep_shapes() {
        let model = EchoModel::new(small(), 6).unwrap();
        let mut c = model.config.clone();
        c.mask_mode = MaskMode::IntraModal;
        c.pool_mode = PoolMode::Separate;
        c.rope_mode = RopeMode::Vanilla;
        c.rope_splits = vec![2, 1, 1];
        assert!(model.with_overrides(c.clone()).is_ok());
        c.d_model = 32;
        assert!(model.with_overrides(c).is_err());
    }

    #[test]
    fn flat_round_trip() {
        let mut model = EchoModel::new(small(), 7).unwrap();
        let v = flat_values(&model.params);
        let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        set_flat_values(&mut model.params, &doubled).unwrap();
        assert_eq!(flat_values(&model.params), doubled);
        assert!(set_flat_values(&mut model.params, &v[1..]).is_err());
    }
}
