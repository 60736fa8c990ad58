//! RMSProp, the deterministic training loop and evaluation.

use std::collections::BTreeMap;

use crate::decoder::argmax;
use crate::error::{Error, Result};
use crate::io::Corpus;
use crate::model::{EchoModel, ForwardOptions, Path};
use crate::nn::Params;
use crate::stream::{make_scene, oracle_selection, planted_recall, Modality, Scene, SceneTemplate, Task, World};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Momentum-free adaptive steps: `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v + ε)`.
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    v: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(params: &Params, lr: f64, rho: f64, eps: f64) -> Self {
        Self {
            lr,
            rho,
            eps,
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let id = crate::nn::ParamId(i);
            let p = params.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "rmsprop",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let v = self.v[i].data_mut();
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.rho * *vi + (1.0 - self.rho) * gi * gi;
                *w -= self.lr * gi / (vi.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub tasks: Vec<Task>,
    pub template: SceneTemplate,
    pub corpus_seed: u64,
    /// Log every this many steps (and at the last step).
    pub eval_every: usize,
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 3e-4,
            rho: 0.99,
            eps: 1e-8,
            tasks: vec![Task::SalientRecall],
            template: SceneTemplate::default(),
            corpus_seed: 1,
            eval_every: 50,
            clip_norm: None,
        }
    }
}

/// One metrics-log line, averaged over the steps since the previous line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub kept_video: f64,
    pub kept_audio: f64,
    pub recall: f64,
}

impl LogRow {
    pub const HEADER: &'static str = "step,loss,accuracy,kept_video_ratio,kept_audio_ratio,planted_recall";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{:.4},{:.4},{:.4},{:.4}",
            self.step, self.loss, self.accuracy, self.kept_video, self.kept_audio, self.recall
        )
    }
}

#[derive(Default)]
struct Window {
    n: usize,
    loss: f64,
    correct: usize,
    kept_video: f64,
    kept_audio: f64,
    recall: f64,
}

impl Window {
    fn row(&self, step: usize) -> LogRow {
        let n = self.n.max(1) as f64;
        LogRow {
            step,
            loss: self.loss / n,
            accuracy: self.correct as f64 / n,
            kept_video: self.kept_video / n,
            kept_audio: self.kept_audio / n,
            recall: self.recall / n,
        }
    }
}

/// Training scene `i`: tasks rotate, scene content depends only on the
/// corpus seed and the index.
pub fn training_scene(cfg: &TrainConfig, world: &World, i: u64) -> Result<Scene> {
    let task = cfg.tasks[(i % cfg.tasks.len() as u64) as usize];
    make_scene(&cfg.template, world, task, cfg.corpus_seed, i)
}

/// Gradient of the mean batch loss, plus the batch metrics.
fn batch_gradients(model: &EchoModel, scenes: &[Scene], win: &mut Window) -> Result<(Vec<Tensor>, f64)> {
    let mut acc: Vec<Tensor> = model.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let inv = 1.0 / scenes.len() as f64;
    let mut total = 0.0;
    let opts = ForwardOptions {
        training: true,
        ..ForwardOptions::default()
    };
    for sc in scenes {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let task = sc.truth.task;
        let (loss, out) = model.loss(&tape, &bound, &sc.stream, task, sc.truth.label, opts)?;
        let l = loss.value().item();
        total += l;
        win.n += 1;
        win.loss += l;
        win.correct += usize::from(argmax(out.logits.value().data()) == sc.truth.label);
        if let Some(sel) = &out.selection {
            let c = sc.stream.counts();
            win.kept_video += sel.per_modality.0 as f64 / c.video.max(1) as f64;
            win.kept_audio += sel.per_modality.1 as f64 / c.audio.max(1) as f64;
            win.recall += planted_recall(&sc.truth, &sel.selected);
        }
        if !l.is_finite() {
            return Ok((acc, l));
        }
        let mut g = tape.backward(&loss)?;
        for (a, v) in acc.iter_mut().zip(bound.vars()) {
            if let Some(gv) = g.take(v) {
                for (x, y) in a.data_mut().iter_mut().zip(gv.data()) {
                    *x += inv * y;
                }
            }
        }
    }
    Ok((acc, total * inv))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
}

/// Train `model` in place. Deterministic for a fixed model seed and config.
pub fn train(model: &mut EchoModel, cfg: &TrainConfig, on_log: impl FnMut(&LogRow)) -> Result<TrainReport> {
    check_setup(model, cfg)?;
    let world = World::new(cfg.template.d_model, cfg.template.world_seed)?;
    train_loop(model, cfg, |i| training_scene(cfg, &world, i), on_log)
}

/// Train on a fixed corpus, cycling through its scenes in order. The corpus
/// must have been generated from `cfg.template` for one of `cfg.tasks`.
pub fn train_on_corpus(
    model: &mut EchoModel,
    cfg: &TrainConfig,
    corpus: &Corpus,
    on_log: impl FnMut(&LogRow),
) -> Result<TrainReport> {
    check_setup(model, cfg)?;
    if corpus.template != cfg.template {
        return Err(Error::Config("corpus was generated from a different scene template".into()));
    }
    if !cfg.tasks.contains(&corpus.task) {
        return Err(Error::Config(format!("corpus task {} is not a training task", corpus.task)));
    }
    if corpus.scenes.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let n = corpus.scenes.len() as u64;
    train_loop(model, cfg, |i| Ok(corpus.scenes[(i % n) as usize].clone()), on_log)
}

fn check_setup(model: &EchoModel, cfg: &TrainConfig) -> Result<()> {
    if cfg.batch == 0 || cfg.tasks.is_empty() {
        return Err(Error::Config("batch and task list must be non-empty".into()));
    }
    if let Some(t) = cfg.tasks.iter().find(|t| !model.config.tasks.contains(t)) {
        return Err(Error::UnknownTask(t.name().into()));
    }
    if cfg.template.d_model != model.config.d_model || cfg.template.n_text != model.config.n_text {
        return Err(Error::Config("scene template does not match the model width or text length".into()));
    }
    Ok(())
}

fn train_loop(
    model: &mut EchoModel,
    cfg: &TrainConfig,
    scene: impl Fn(u64) -> Result<Scene>,
    mut on_log: impl FnMut(&LogRow),
) -> Result<TrainReport> {
    let mut opt = RmsProp::new(&model.params, cfg.lr, cfg.rho, cfg.eps);
    let mut log = Vec::new();
    let mut win = Window::default();
    for step in 0..cfg.steps {
        let scenes = (0..cfg.batch)
            .map(|b| scene((step * cfg.batch + b) as u64))
            .collect::<Result<Vec<_>>>()?;
        let (mut grads, loss) = batch_gradients(model, &scenes, &mut win)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(c) = cfg.clip_norm {
            let norm = grads.iter().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
            if norm > c {
                let s = c / norm;
                grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
            }
        }
        opt.step(&mut model.params, &grads)?;
        if (step + 1) % cfg.eval_every.max(1) == 0 || step + 1 == cfg.steps {
            let row = win.row(step + 1);
            on_log(&row);
            log.push(row);
            win = Window::default();
        }
    }
    Ok(TrainReport { log })
}

/// Evaluation corpus: `n` scenes of `task` from `corpus_seed`.
pub fn eval_scenes(template: &SceneTemplate, task: Task, corpus_seed: u64, n: usize) -> Result<Vec<Scene>> {
    let world = World::new(template.d_model, template.world_seed)?;
    (0..n as u64).map(|i| make_scene(template, &world, task, corpus_seed, i)).collect()
}

/// Per-scene evaluation record.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    pub index: usize,
    pub task: Task,
    pub label: usize,
    pub prediction: usize,
    pub correct: bool,
    /// Probability assigned to the true label.
    pub p_true: f64,
    pub planted_recall: f64,
    pub oracle_recall: f64,
    pub kept_video: usize,
    pub kept_audio: usize,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub planted_recall: f64,
    pub oracle_recall: f64,
    /// Kept-video count to number of scenes.
    pub video_kept_hist: BTreeMap<usize, usize>,
    pub audio_kept_hist: BTreeMap<usize, usize>,
    pub scenes: Vec<SceneEval>,
}

/// Accuracy, recall against planted tokens and the oracle selection, and
/// per-modality allocation over `scenes`.
pub fn evaluate(model: &EchoModel, scenes: &[Scene], path: Path) -> Result<EvalMetrics> {
    let mut rows = Vec::with_capacity(scenes.len());
    for (index, sc) in scenes.iter().enumerate() {
        let tape = Tape::no_grad();
        let bound = model.params.bind(&tape);
        let task = sc.truth.task;
        let out = model.forward(&tape, &bound, &sc.stream, task, ForwardOptions { path, ..Default::default() })?;
        let logits = out.logits.value().data();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let p_true = (logits[sc.truth.label] - m).exp() / z;
        let prediction = argmax(logits);
        let (pr, or, kv, ka, k) = match &out.selection {
            Some(sel) => {
                let oracle = oracle_selection(&sc.stream, &sc.truth, sel.k)?;
                let hits = oracle.iter().filter(|i| sel.gates[**i] == 1).count();
                (
                    planted_recall(&sc.truth, &sel.selected),
                    hits as f64 / sel.k as f64,
                    sel.per_modality.0,
                    sel.per_modality.1,
                    sel.k,
                )
            }
            None => {
                let c = sc.stream.counts();
                (1.0, 1.0, c.video, c.audio, c.av())
            }
        };
        rows.push(SceneEval {
            index,
            task,
            label: sc.truth.label,
            prediction,
            correct: prediction == sc.truth.label,
            p_true,
            planted_recall: pr,
            oracle_recall: or,
            kept_video: kv,
            kept_audio: ka,
            k,
        });
    }
    let n = rows.len().max(1) as f64;
    let mut vh = BTreeMap::new();
    let mut ah = BTreeMap::new();
    for r in &rows {
        *vh.entry(r.kept_video).or_insert(0) += 1;
        *ah.entry(r.kept_audio).or_insert(0) += 1;
    }
    Ok(EvalMetrics {
        n: rows.len(),
        accuracy: rows.iter().filter(|r| r.correct).count() as f64 / n,
        planted_recall: rows.iter().map(|r| r.planted_recall).sum::<f64>() / n,
        oracle_recall: rows.iter().map(|r| r.oracle_recall).sum::<f64>() / n,
        video_kept_hist: vh,
        audio_kept_hist: ah,
        scenes: rows,
    })
}

/// Share of the budget given to `modality` in one evaluated scene.
pub fn budget_share(r: &SceneEval, modality: Modality) -> f64 {
    let n = match modality {
        Modality::Video => r.kept_video,
        Modality::Audio => r.kept_audio,
        Modality::Text => 0,
    };
    n as f64 / r.k.max(1) as f64
}
