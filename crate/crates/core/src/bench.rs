//! Forward-pass benchmark: analytic FLOPs, wall-clock medians and peak live
//! values per stage.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{EchoModel, ForwardOptions, ModelConfig, Path};
use crate::nn::{block_flops, init_normal};
use crate::stream::{assign_positions, StreamLayout, Task, TokenStream};
use crate::tape::Tape;
use crate::tensor::memory;

/// Per-stage quantities of one configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stages<T> {
    pub encoder: T,
    pub selection: T,
    pub decoder: T,
    pub total: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    /// `sieve` or `full` (decoder over the whole stream).
    pub path: Path,
    pub budget_p: f64,
    pub lv: usize,
    pub la: usize,
    pub lt: usize,
    /// Audio/video tokens handed to the decoder.
    pub k: usize,
    pub flops: Stages<u64>,
    pub wall_ms: Stages<f64>,
    /// Most `f64` values held at once during the forward, over what was
    /// already live before it (parameters and the input stream).
    pub peak_values: usize,
    pub trials: usize,
}

impl BenchRecord {
    pub const HEADER: &'static str = "path,budget_p,lv,la,lt,k,flops_encoder,flops_selection,flops_decoder,flops_total,\
wall_ms_encoder,wall_ms_selection,wall_ms_decoder,wall_ms_total,peak_values,trials";

    pub fn csv(&self) -> String {
        let f = &self.flops;
        let w = &self.wall_ms;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3},{:.3},{:.3},{:.3},{},{}",
            self.path,
            self.budget_p,
            self.lv,
            self.la,
            self.lt,
            self.k,
            f.encoder,
            f.selection,
            f.decoder,
            f.total,
            w.encoder,
            w.selection,
            w.decoder,
            w.total,
            self.peak_values,
            self.trials
        )
    }
}

/// Attention FLOPs (`2·n²·D` scores plus `2·n²·D` mixing) of `layers` blocks.
pub fn attention_flops(n: u64, d_model: u64, layers: u64) -> u64 {
    layers * 4 * n * n * d_model
}

/// Analytic forward FLOPs of `path` on a stream of `(lv, la, lt)` tokens with
/// `k` audio/video tokens reaching the decoder.
pub fn analytic_flops(cfg: &ModelConfig, path: Path, lv: usize, la: usize, lt: usize, k: usize) -> Stages<u64> {
    let dm = cfg.d_model as u64;
    let ffn = (cfg.ffn_mult * cfg.d_model) as u64;
    let n_av = (lv + la) as u64;
    let classes: u64 = cfg.tasks.iter().map(|t| t.n_classes() as u64).max().unwrap_or(0);
    let (encoder, selection, dec_len) = match path {
        Path::Sieve => {
            let enc = cfg.enc_layers as u64 * block_flops((lv + la + lt) as u64, dm, ffn).total();
            let h = cfg.scorer_hidden as u64;
            (enc, 2 * n_av * dm * h + 2 * n_av * h, (k + lt) as u64)
        }
        Path::Full => (0, 0, (lv + la + lt) as u64),
        Path::IntraModal => {
            // Four-way merge in each modality: one D×D product per source token.
            (0, 2 * n_av * dm * dm, (k + lt) as u64)
        }
    };
    let decoder = cfg.dec_layers as u64 * block_flops(dec_len, dm, ffn).total() + 2 * dm * classes;
    Stages {
        encoder,
        selection,
        decoder,
        total: encoder + selection + decoder,
    }
}

/// Clip settings for a benchmark stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchShape {
    pub duration_s: f64,
    pub fps: f64,
    pub frame_grid: (usize, usize),
    pub chunk_seconds: f64,
    pub n_text: usize,
}

impl BenchShape {
    /// 40.96 s of audio (1024 tokens) and 48 frames of 8×8 (3072 tokens):
    /// 4096 audio/video tokens in total.
    pub fn l4096(n_text: usize) -> Self {
        Self {
            duration_s: 40.96,
            fps: 48.0 / 40.96,
            frame_grid: (8, 8),
            chunk_seconds: 2.0,
            n_text,
        }
    }

    pub fn layout(&self) -> Result<StreamLayout> {
        assign_positions(self.duration_s, self.fps, self.frame_grid, self.chunk_seconds, self.n_text)
    }
}

/// Gaussian stream with `shape`'s layout and width `d`.
pub fn bench_stream(shape: &BenchShape, d: usize, seed: u64) -> Result<TokenStream> {
    let layout = shape.layout()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings = init_normal(&mut rng, &[layout.len(), d], 1.0);
    Ok(TokenStream { layout, embeddings })
}

/// Timing settings.
#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub warmups: usize,
    pub trials: usize,
    /// Query rows per attention block.
    pub row_block: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmups: 3,
            trials: 20,
            row_block: 256,
        }
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Benchmark one path at one budget. The model's own budget is replaced by
/// `budget_p`; `Path::Full` ignores it.
pub fn bench_one(
    model: &EchoModel,
    stream: &TokenStream,
    task: Task,
    path: Path,
    budget_p: f64,
    opts: &BenchOptions,
) -> Result<BenchRecord> {
    if opts.trials == 0 {
        return Err(Error::Invalid("bench needs at least one trial".into()));
    }
    let mut cfg = model.config.clone();
    cfg.budget_p = budget_p;
    let model = model.with_overrides(cfg)?;
    let counts = stream.counts();
    let fwd = ForwardOptions {
        path,
        training: false,
        row_block: Some(opts.row_block),
        keep_kv: true,
    };
    let mut walls: [Vec<f64>; 4] = Default::default();
    let mut peak = 0;
    let mut k = counts.av();
    for trial in 0..opts.warmups + opts.trials {
        let tape = Tape::no_grad();
        let bound = model.params.bind(&tape);
        let base = memory::live_values();
        memory::reset_peak();
        let t0 = Instant::now();
        let out = model.forward(&tape, &bound, stream, task, fwd)?;
        let total = t0.elapsed();
        peak = peak.max(memory::peak_values().saturating_sub(base));
        if path != Path::Full {
            k = out.decoder_len - counts.text;
        }
        let st = out.stats;
        drop(out);
        if trial >= opts.warmups {
            for (w, d) in walls.iter_mut().zip([st.encoder, st.selection, st.decoder, total]) {
                w.push(ms(d));
            }
        }
    }
    Ok(BenchRecord {
        path,
        budget_p: if path == Path::Full { 1.0 } else { budget_p },
        lv: counts.video,
        la: counts.audio,
        lt: counts.text,
        k,
        flops: analytic_flops(&model.config, path, counts.video, counts.audio, counts.text, k),
        wall_ms: Stages {
            encoder: median(&mut walls[0]),
            selection: median(&mut walls[1]),
            decoder: median(&mut walls[2]),
            total: median(&mut walls[3]),
        },
        peak_values: peak,
        trials: opts.trials,
    })
}

/// The full-stream reference followed by the sieve at every budget.
pub fn bench(
    model: &EchoModel,
    stream: &TokenStream,
    task: Task,
    budgets: &[f64],
    opts: &BenchOptions,
) -> Result<Vec<BenchRecord>> {
    let mut out = vec![bench_one(model, stream, task, Path::Full, 1.0, opts)?];
    for &p in budgets {
        out.push(bench_one(model, stream, task, Path::Sieve, p, opts)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sieve::budget_k;
    use proptest::prelude::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 3,
            scorer_hidden: 32,
            rope_splits: vec![1, 1, 1, 1],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn doubling_length_quadruples_attention() {
        assert_eq!(attention_flops(200, 64, 8), 4 * attention_flops(100, 64, 8));
    }

    proptest! {
        #[test]
        fn decoder_attention_ratio_is_squared_length_ratio(lv in 1usize..5000, la in 1usize..5000, lt in 0usize..64, p in 0.01f64..1.0) {
            let k = budget_k(p, lv + la) as u64;
            let (n, lt) = ((lv + la) as u64, lt as u64);
            let kept = attention_flops(k + lt, 128, 8);
            let full = attention_flops(n + lt, 128, 8);
            // kept/full == ((k+lt)/(n+lt))², compared without division.
            prop_assert_eq!(kept as u128 * ((n + lt) as u128).pow(2), full as u128 * ((k + lt) as u128).pow(2));
        }

        #[test]
        fn stages_sum_and_budget_monotone(lv in 1usize..3000, la in 1usize..3000, lt in 0usize..16) {
            let c = cfg();
            let mut prev: Option<Stages<u64>> = None;
            for p in [1.0, 0.5, 0.2, 0.1, 0.05] {
                let f = analytic_flops(&c, Path::Sieve, lv, la, lt, budget_k(p, lv + la));
                prop_assert_eq!(f.encoder + f.selection + f.decoder, f.total);
                if let Some(q) = prev {
                    prop_assert_eq!(q.encoder, f.encoder);
                    prop_assert!(f.decoder <= q.decoder);
                    prop_assert!(f.total <= q.total);
                }
                prev = Some(f);
            }
        }
    }

    #[test]
    fn small_bench_runs() {
        let mut c = cfg();
        c.n_text = 2;
        let model = EchoModel::new(c, 1).unwrap();
        let shape = BenchShape {
            duration_s: 2.0,
            fps: 2.0,
            frame_grid: (2, 2),
            chunk_seconds: 1.0,
            n_text: 2,
        };
        let stream = bench_stream(&shape, 16, 3).unwrap();
        let opts = BenchOptions { warmups: 1, trials: 3, row_block: 8 };
        let recs = bench(&model, &stream, Task::SalientRecall, &[0.25], &opts).unwrap();
        assert_eq!(recs.len(), 2);
        let (full, sieve) = (&recs[0], &recs[1]);
        assert_eq!((full.lv, full.la, full.lt), (16, 50, 2));
        assert_eq!(full.k, 66);
        assert_eq!(sieve.k, budget_k(0.25, 66));
        assert_eq!(full.flops.encoder, 0);
        assert!(sieve.flops.decoder < full.flops.decoder);
        assert!(sieve.peak_values > 0 && full.peak_values > 0);
        assert!(full.csv().split(',').count() == BenchRecord::HEADER.split(',').count());
        let bad = BenchOptions { trials: 0, ..opts };
        assert!(bench_one(&model, &stream, Task::SalientRecall, Path::Full, 1.0, &bad).is_err());
    }
}
