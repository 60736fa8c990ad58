//! Interleaved audio/video/text token streams and synthetic scenes.
//!
//! Both modalities share one clock of 25 temporal ids per second (one id per
//! 40 ms audio token). A video frame shown at `τ` seconds carries temporal id
//! `round(25·τ)`. Tokens are grouped into fixed-length time chunks and emitted
//! as `[V_0, A_0, V_1, A_1, ..., text]`.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rope::PositionTriple;
use crate::tensor::Tensor;

/// Temporal ids per second.
pub const IDS_PER_SECOND: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Video,
    Audio,
    Text,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Video => 0,
            Modality::Audio => 1,
            Modality::Text => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Modality::Video),
            1 => Ok(Modality::Audio),
            2 => Ok(Modality::Text),
            _ => Err(Error::Format(format!("modality code {c}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenMeta {
    pub modality: Modality,
    pub pos: PositionTriple,
    /// Index in the full concatenated stream.
    pub stream_index: usize,
    /// Index within its own modality (video: `frame·H·W + h·W + w`).
    pub local_index: usize,
    /// Time chunk; text tokens carry the chunk count.
    pub chunk: usize,
}

/// A single token with its embedding copied out of the stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub embedding: Vec<f64>,
    pub modality: Modality,
    pub pos: PositionTriple,
    pub stream_index: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub video: usize,
    pub audio: usize,
    pub text: usize,
}

impl Counts {
    pub fn av(&self) -> usize {
        self.video + self.audio
    }

    pub fn total(&self) -> usize {
        self.video + self.audio + self.text
    }
}

/// Token order and positions of a stream, without embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamLayout {
    pub meta: Vec<TokenMeta>,
    pub counts: Counts,
    pub chunk_seconds: f64,
    pub frame_grid: (usize, usize),
    /// Temporal id of every video frame.
    pub frame_ids: Vec<u32>,
}

impl StreamLayout {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn positions(&self) -> Vec<PositionTriple> {
        self.meta.iter().map(|m| m.pos).collect()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.meta.iter().map(|m| m.modality).collect()
    }

    /// Stream indices of each chunk's video and audio blocks.
    pub fn chunks(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        let n = self
            .meta
            .iter()
            .filter(|m| m.modality != Modality::Text)
            .map(|m| m.chunk + 1)
            .max()
            .unwrap_or(0);
        let mut out = vec![(Vec::new(), Vec::new()); n];
        for m in &self.meta {
            match m.modality {
                Modality::Video => out[m.chunk].0.push(m.stream_index),
                Modality::Audio => out[m.chunk].1.push(m.stream_index),
                Modality::Text => {}
            }
        }
        out
    }

    /// Stream index of the video token at `(frame, h, w)`.
    pub fn video_stream_index(&self, frame: usize, h: usize, w: usize) -> Option<usize> {
        let (gh, gw) = self.frame_grid;
        let local = frame * gh * gw + h * gw + w;
        self.meta
            .iter()
            .find(|m| m.modality == Modality::Video && m.local_index == local)
            .map(|m| m.stream_index)
    }
}

/// Lay out positions for a clip of `duration_s` seconds.
pub fn assign_positions(
    duration_s: f64,
    fps: f64,
    frame_grid: (usize, usize),
    chunk_seconds: f64,
    n_text: usize,
) -> Result<StreamLayout> {
    if chunk_seconds.is_nan() || chunk_seconds <= 0.0 {
        return Err(Error::Invalid(format!("chunk_seconds must be > 0, got {chunk_seconds}")));
    }
    if duration_s.is_nan() || duration_s <= 0.0 || fps.is_nan() || fps <= 0.0 {
        return Err(Error::Invalid(format!(
            "duration {duration_s} s and fps {fps} must be positive"
        )));
    }
    let (gh, gw) = frame_grid;
    let n_audio = (duration_s * IDS_PER_SECOND).round() as usize;
    // Frames strictly inside the clip; the tolerance absorbs float error in f/fps.
    let n_frames = ((duration_s * fps) - 1e-9).ceil().max(0.0) as usize;
    let frame_ids: Vec<u32> = (0..n_frames)
        .map(|f| (f as f64 / fps * IDS_PER_SECOND).round() as u32)
        .collect();
    let ids_per_chunk = chunk_seconds * IDS_PER_SECOND;
    let chunk_of = |t: u32| (t as f64 / ids_per_chunk + 1e-9).floor() as usize;
    let n_chunks = frame_ids
        .iter()
        .copied()
        .chain((0..n_audio as u32).last())
        .map(|t| chunk_of(t) + 1)
        .max()
        .unwrap_or(0);

    let mut meta = Vec::with_capacity(n_frames * gh * gw + n_audio + n_text);
    let push = |modality, pos, local_index, chunk, meta: &mut Vec<TokenMeta>| {
        let stream_index = meta.len();
        meta.push(TokenMeta {
            modality,
            pos,
            stream_index,
            local_index,
            chunk,
        });
    };
    for c in 0..n_chunks {
        for (f, &t) in frame_ids.iter().enumerate() {
            if chunk_of(t) != c {
                continue;
            }
            for h in 0..gh {
                for w in 0..gw {
                    let pos = PositionTriple::new(t, h as u32, w as u32);
                    push(Modality::Video, pos, f * gh * gw + h * gw + w, c, &mut meta);
                }
            }
        }
        for i in 0..n_audio {
            if chunk_of(i as u32) == c {
                push(Modality::Audio, PositionTriple::degenerate(i as u32), i, c, &mut meta);
            }
        }
    }
    for j in 0..n_text {
        let s = meta.len() as u32;
        push(Modality::Text, PositionTriple::degenerate(s), j, n_chunks, &mut meta);
    }
    Ok(StreamLayout {
        counts: Counts {
            video: n_frames * gh * gw,
            audio: n_audio,
            text: n_text,
        },
        meta,
        chunk_seconds,
        frame_grid,
        frame_ids,
    })
}

/// Embeddings `L × D` over a layout. Text rows hold placeholders that the
/// model replaces with its learned instruction embeddings.
#[derive(Clone, Debug)]
pub struct TokenStream {
    pub layout: StreamLayout,
    pub embeddings: Tensor,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn counts(&self) -> Counts {
        self.layout.counts
    }

    pub fn token(&self, i: usize) -> Token {
        let m = self.layout.meta[i];
        Token {
            embedding: self.embeddings.row_slice(i).to_vec(),
            modality: m.modality,
            pos: m.pos,
            stream_index: m.stream_index,
        }
    }

    /// The audio/video rows (everything before the text block).
    pub fn av_embeddings(&self) -> Tensor {
        let n = self.layout.counts.av();
        let d = self.embeddings.cols();
        Tensor::from_parts(vec![n, d], self.embeddings.data()[..n * d].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    SalientRecall,
    EventOrder,
    AvAlignment,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::SalientRecall, Task::EventOrder, Task::AvAlignment];

    pub fn name(self) -> &'static str {
        match self {
            Task::SalientRecall => "salient_recall",
            Task::EventOrder => "event_order",
            Task::AvAlignment => "av_alignment",
        }
    }

    pub fn n_classes(self) -> usize {
        2
    }

    pub fn code(self) -> usize {
        match self {
            Task::SalientRecall => 0,
            Task::EventOrder => 1,
            Task::AvAlignment => 2,
        }
    }

    pub fn from_code(c: usize) -> Result<Self> {
        Task::ALL
            .get(c)
            .copied()
            .ok_or_else(|| Error::Format(format!("task code {c}")))
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

/// Generator settings shared by every scene in a corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTemplate {
    pub d_model: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub frame_grid: (usize, usize),
    pub chunk_seconds: f64,
    pub n_text: usize,
    pub density_video: f64,
    pub density_audio: f64,
    pub noise_sigma: f64,
    /// Weight of the shared salience direction in planted tokens.
    pub salience: f64,
    /// Weight of the label direction in salient_recall tokens.
    pub label_amp: f64,
    /// Weight of the event-identity directions in event/alignment tokens.
    pub event_amp: f64,
    /// Length of an event window, in temporal ids.
    pub event_ids: u32,
    /// Largest |t_a − t_v| still labelled aligned, in temporal ids.
    pub align_threshold: u32,
    /// Smallest |t_a − t_v| of a misaligned scene.
    pub misalign_min: u32,
    /// Seed of the fixed signal directions.
    pub world_seed: u64,
}

impl Default for SceneTemplate {
    fn default() -> Self {
        Self {
            d_model: 128,
            duration_s: 5.12,
            fps: 1.5625,
            frame_grid: (4, 4),
            chunk_seconds: 2.0,
            n_text: 8,
            density_video: 0.2,
            density_audio: 0.2,
            noise_sigma: 0.5,
            salience: 2.0,
            label_amp: 0.1,
            event_amp: 1.0,
            event_ids: 32,
            align_threshold: 8,
            misalign_min: 32,
            world_seed: 0x5eed,
        }
    }
}

impl SceneTemplate {
    pub fn layout(&self) -> Result<StreamLayout> {
        assign_positions(
            self.duration_s,
            self.fps,
            self.frame_grid,
            self.chunk_seconds,
            self.n_text,
        )
    }
}

/// Orthonormal signal directions shared by all scenes of a template.
#[derive(Clone, Debug)]
pub struct World {
    pub salience: Vec<f64>,
    pub label: Vec<f64>,
    pub event_a: Vec<f64>,
    pub event_b: Vec<f64>,
}

impl World {
    pub fn new(d_model: usize, seed: u64) -> Result<Self> {
        if d_model < 4 {
            return Err(Error::Config(format!("d_model {d_model} < 4")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < 4 {
            let mut v: Vec<f64> = (0..d_model).map(|_| normal.sample(&mut rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        let mut it = basis.into_iter();
        Ok(Self {
            salience: it.next().unwrap(),
            label: it.next().unwrap(),
            event_a: it.next().unwrap(),
            event_b: it.next().unwrap(),
        })
    }
}

/// One fully specified scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub task: Task,
    pub duration_s: f64,
    pub fps: f64,
    pub frame_grid: (usize, usize),
    pub density_video: f64,
    pub density_audio: f64,
    /// `(frame, h, w)` of planted video tokens.
    pub salient_video: BTreeSet<(usize, usize, usize)>,
    pub salient_audio: BTreeSet<usize>,
    /// Subset of the salient tokens that belong to the second event group.
    pub group_b_video: BTreeSet<(usize, usize, usize)>,
    pub group_b_audio: BTreeSet<usize>,
    pub sync_offset_s: f64,
    pub label: usize,
}

/// Ground truth attached to a generated scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub task: Task,
    pub label: usize,
    /// Stream indices of planted tokens, ascending.
    pub planted: Vec<usize>,
    /// Squared norm of the planted signal per audio/video stream index.
    pub signal_energy: Vec<f64>,
}

impl GroundTruth {
    pub fn planted_per_modality(&self, layout: &StreamLayout) -> (usize, usize) {
        let v = self
            .planted
            .iter()
            .filter(|&&i| layout.meta[i].modality == Modality::Video)
            .count();
        (v, self.planted.len() - v)
    }
}

fn n_planted(density: f64, len: usize) -> usize {
    ((density * len as f64).round() as usize).min(len)
}

/// Draw a random scene spec for `task` from `template`.
pub fn sample_spec<R: Rng>(template: &SceneTemplate, task: Task, rng: &mut R) -> Result<SceneSpec> {
    let layout = template.layout()?;
    let (gh, gw) = template.frame_grid;
    let cells = gh * gw;
    let n_frames = layout.frame_ids.len();
    let la = layout.counts.audio;
    let nv = n_planted(template.density_video, layout.counts.video);
    let na = n_planted(template.density_audio, la);
    let label = rng.gen_range(0..task.n_classes());
    let video_cell = |i: usize| (i / cells, (i % cells) / gw, i % gw);

    let mut spec = SceneSpec {
        task,
        duration_s: template.duration_s,
        fps: template.fps,
        frame_grid: template.frame_grid,
        density_video: template.density_video,
        density_audio: template.density_audio,
        salient_video: BTreeSet::new(),
        salient_audio: BTreeSet::new(),
        group_b_video: BTreeSet::new(),
        group_b_audio: BTreeSet::new(),
        sync_offset_s: 0.0,
        label,
    };

    // Video tokens of frames whose id falls inside [t0, t0 + len).
    let video_in = |t0: u32| -> Vec<usize> {
        (0..n_frames)
            .filter(|&f| layout.frame_ids[f] >= t0 && layout.frame_ids[f] < t0 + template.event_ids)
            .flat_map(|f| (0..cells).map(move |c| f * cells + c))
            .collect()
    };
    let audio_in = |t0: u32| -> Vec<usize> {
        (t0 as usize..(t0 + template.event_ids) as usize)
            .filter(|&i| i < la)
            .collect()
    };
    let pick = |pool: &mut Vec<usize>, n: usize, rng: &mut R| -> Result<Vec<usize>> {
        if n > pool.len() {
            return Err(Error::Invalid(format!(
                "cannot plant {n} tokens in an event window of {}",
                pool.len()
            )));
        }
        pool.shuffle(rng);
        Ok(pool[..n].to_vec())
    };

    match task {
        Task::SalientRecall => {
            let mut v: Vec<usize> = (0..layout.counts.video).collect();
            let mut a: Vec<usize> = (0..la).collect();
            spec.salient_video = pick(&mut v, nv, rng)?.into_iter().map(video_cell).collect();
            spec.salient_audio = pick(&mut a, na, rng)?.into_iter().collect();
        }
        Task::EventOrder => {
            // Two disjoint windows starting on frame boundaries.
            let starts: Vec<u32> = layout
                .frame_ids
                .iter()
                .copied()
                .filter(|&t| (t + template.event_ids) as usize <= la)
                .collect();
            let (ta, tb) = loop {
                let a = *starts.choose(rng).ok_or_else(|| Error::Invalid("clip too short".into()))?;
                let b = *starts.choose(rng).unwrap();
                if a.abs_diff(b) >= template.event_ids {
                    break (a, b);
                }
            };
            // label 0: A precedes B.
            spec.label = usize::from(ta > tb);
            let (nva, nvb) = (nv - nv / 2, nv / 2);
            let (naa, nab) = (na - na / 2, na / 2);
            let va = pick(&mut video_in(ta), nva, rng)?;
            let vb = pick(&mut video_in(tb), nvb, rng)?;
            let aa = pick(&mut audio_in(ta), naa, rng)?;
            let ab = pick(&mut audio_in(tb), nab, rng)?;
            spec.group_b_video = vb.iter().copied().map(video_cell).collect();
            spec.group_b_audio = ab.iter().copied().collect();
            spec.salient_video = va.into_iter().chain(vb).map(video_cell).collect();
            spec.salient_audio = aa.into_iter().chain(ab).collect();
        }
        Task::AvAlignment => {
            // Video event (group A) on a frame boundary, audio event (group B)
            // offset by S = t_a − t_v.
            let aligned = label == 1;
            let max_s = (la as u32).saturating_sub(template.event_ids) as i64;
            let (tv, ta) = loop {
                let f = rng.gen_range(0..n_frames);
                let tv = layout.frame_ids[f];
                if video_in(tv).len() < nv {
                    continue;
                }
                let s: i64 = if aligned {
                    rng.gen_range(-(template.align_threshold as i64)..=template.align_threshold as i64)
                } else {
                    let m = rng.gen_range(template.misalign_min as i64..=2 * template.misalign_min as i64);
                    if rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                };
                let ta = tv as i64 + s;
                if ta >= 0 && ta <= max_s {
                    break (tv, ta as u32);
                }
            };
            spec.sync_offset_s = (ta as f64 - tv as f64) / IDS_PER_SECOND;
            let vids = pick(&mut video_in(tv), nv, rng)?;
            let aids = pick(&mut audio_in(ta), na, rng)?;
            spec.salient_video = vids.into_iter().map(video_cell).collect();
            spec.salient_audio = aids.iter().copied().collect();
            spec.group_b_audio = aids.into_iter().collect();
        }
    }
    Ok(spec)
}

/// Embeddings and ground truth for `spec`. Deterministic in `seed`.
pub fn generate_scene(
    spec: &SceneSpec,
    template: &SceneTemplate,
    world: &World,
    seed: u64,
) -> Result<(TokenStream, GroundTruth)> {
    let layout = assign_positions(
        spec.duration_s,
        spec.fps,
        spec.frame_grid,
        template.chunk_seconds,
        template.n_text,
    )?;
    let (gh, gw) = spec.frame_grid;
    let n_frames = layout.frame_ids.len();
    for &(f, h, w) in spec.salient_video.iter().chain(&spec.group_b_video) {
        if f >= n_frames || h >= gh || w >= gw {
            return Err(Error::Index {
                what: "salient video token",
                index: f * gh * gw + h * gw + w,
                len: layout.counts.video,
            });
        }
    }
    for &i in spec.salient_audio.iter().chain(&spec.group_b_audio) {
        if i >= layout.counts.audio {
            return Err(Error::Index {
                what: "salient audio token",
                index: i,
                len: layout.counts.audio,
            });
        }
    }
    if spec.label >= spec.task.n_classes() {
        return Err(Error::Invalid(format!("label {} for {}", spec.label, spec.task)));
    }

    let d = template.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, template.noise_sigma)
        .map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let n_av = layout.counts.av();
    let mut data = vec![0.0; layout.len() * d];
    for v in data[..n_av * d].iter_mut() {
        *v = noise.sample(&mut rng);
    }

    let sign = if spec.label == 1 { 1.0 } else { -1.0 };
    let mut planted = Vec::new();
    let mut energy = vec![0.0; n_av];
    let mut signal = vec![0.0; d];
    for m in &layout.meta[..n_av] {
        let (is_planted, in_b) = match m.modality {
            Modality::Video => {
                let f = m.local_index / (gh * gw);
                let c = m.local_index % (gh * gw);
                let key = (f, c / gw, c % gw);
                (spec.salient_video.contains(&key), spec.group_b_video.contains(&key))
            }
            Modality::Audio => (
                spec.salient_audio.contains(&m.local_index),
                spec.group_b_audio.contains(&m.local_index),
            ),
            Modality::Text => (false, false),
        };
        if !is_planted {
            continue;
        }
        for (j, s) in signal.iter_mut().enumerate() {
            *s = template.salience * world.salience[j];
            match spec.task {
                Task::SalientRecall => *s += sign * template.label_amp * world.label[j],
                Task::EventOrder | Task::AvAlignment => {
                    let e = if in_b { &world.event_b } else { &world.event_a };
                    *s += template.event_amp * e[j];
                }
            }
        }
        let row = &mut data[m.stream_index * d..(m.stream_index + 1) * d];
        for (x, s) in row.iter_mut().zip(&signal) {
            *x += s;
        }
        energy[m.stream_index] = signal.iter().map(|s| s * s).sum();
        planted.push(m.stream_index);
    }

    let embeddings = Tensor::from_parts(vec![layout.len(), d], data);
    Ok((
        TokenStream { layout, embeddings },
        GroundTruth {
            task: spec.task,
            label: spec.label,
            planted,
            signal_energy: energy,
        },
    ))
}

/// The `k` audio/video indices with the most planted-signal energy; ties go
/// to the lower stream index.
pub fn oracle_selection(stream: &TokenStream, truth: &GroundTruth, k: usize) -> Result<Vec<usize>> {
    let n = stream.counts().av();
    if k > n {
        return Err(Error::Invalid(format!("k = {k} exceeds {n} audio/video tokens")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        truth.signal_energy[b]
            .total_cmp(&truth.signal_energy[a])
            .then(a.cmp(&b))
    });
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Fraction of planted tokens present in `selected`.
pub fn planted_recall(truth: &GroundTruth, selected: &[usize]) -> f64 {
    if truth.planted.is_empty() {
        return 1.0;
    }
    let set: BTreeSet<usize> = selected.iter().copied().collect();
    let hit = truth.planted.iter().filter(|i| set.contains(i)).count();
    hit as f64 / truth.planted.len() as f64
}

/// A generated scene together with the seed that produced it.
#[derive(Clone, Debug)]
pub struct Scene {
    pub spec: SceneSpec,
    pub seed: u64,
    pub stream: TokenStream,
    pub truth: GroundTruth,
}

/// Deterministic scene source: scene `i` of a corpus depends only on
/// `(template, task, corpus_seed, i)`.
pub fn make_scene(
    template: &SceneTemplate,
    world: &World,
    task: Task,
    corpus_seed: u64,
    index: u64,
) -> Result<Scene> {
    let seed = corpus_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ ((task.code() as u64) << 56);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = sample_spec(template, task, &mut rng)?;
    let noise_seed: u64 = rng.gen();
    let (stream, truth) = generate_scene(&spec, template, world, noise_seed)?;
    Ok(Scene {
        spec,
        seed: noise_seed,
        stream,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_seconds_of_audio_is_fifty_tokens() {
        let l = assign_positions(2.0, 2.0, (2, 2), 2.0, 0).unwrap();
        assert_eq!(l.counts.audio, 50);
    }

    #[test]
    fn frame_at_one_second_has_id_25() {
        let l = assign_positions(2.0, 2.0, (1, 1), 2.0, 0).unwrap();
        assert_eq!(l.frame_ids, vec![0, 13, 25, 38]);
        assert_eq!(l.frame_ids[2], 25);
    }

    #[test]
    fn four_seconds_in_two_second_chunks() {
        let l = assign_positions(4.0, 1.0, (2, 2), 2.0, 3).unwrap();
        let chunks = l.chunks();
        assert_eq!(chunks.len(), 2);
        let order: Vec<(Modality, usize)> = l
            .meta
            .iter()
            .map(|m| (m.modality, m.chunk))
            .collect();
        let mut runs: Vec<(Modality, usize)> = Vec::new();
        for o in order {
            if runs.last() != Some(&o) {
                runs.push(o);
            }
        }
        assert_eq!(
            runs,
            vec![
                (Modality::Video, 0),
                (Modality::Audio, 0),
                (Modality::Video, 1),
                (Modality::Audio, 1),
                (Modality::Text, 2),
            ]
        );
    }

    #[test]
    fn non_positive_chunk_is_rejected() {
        assert!(assign_positions(2.0, 1.0, (2, 2), 0.0, 0).is_err());
        assert!(assign_positions(2.0, 1.0, (2, 2), -1.0, 0).is_err());
    }

    #[test]
    fn degenerate_axes_for_audio_and_text() {
        let l = assign_positions(3.0, 2.0, (2, 3), 2.0, 4).unwrap();
        for m in &l.meta {
            match m.modality {
                Modality::Video => assert!(m.pos.h < 2 && m.pos.w < 3),
                Modality::Audio | Modality::Text => {
                    assert_eq!(m.pos.h, m.pos.t);
                    assert_eq!(m.pos.w, m.pos.t);
                }
            }
            if m.modality == Modality::Text {
                assert_eq!(m.pos.t as usize, m.stream_index);
            }
        }
    }

    fn template(d: usize) -> SceneTemplate {
        SceneTemplate {
            d_model: d,
            ..SceneTemplate::default()
        }
    }

    #[test]
    fn density_sets_planted_counts() {
        let t = SceneTemplate {
            duration_s: 4.0,
            fps: 1.5625,
            frame_grid: (5, 5),
            density_video: 0.8,
            density_audio: 0.1,
            ..template(16)
        };
        let layout = t.layout().unwrap();
        assert_eq!((layout.counts.video, layout.counts.audio), (175, 100));
        let w = World::new(16, 1).unwrap();
        let s = make_scene(&t, &w, Task::SalientRecall, 3, 0).unwrap();
        assert_eq!(s.truth.planted_per_modality(&s.stream.layout), (140, 10));
    }

    #[test]
    fn hundred_by_hundred_example() {
        // 100 video tokens (4 frames of 5×5) and 100 audio tokens.
        let t = SceneTemplate {
            duration_s: 4.0,
            fps: 1.0,
            frame_grid: (5, 5),
            density_video: 0.8,
            density_audio: 0.1,
            ..template(16)
        };
        let w = World::new(16, 1).unwrap();
        let s = make_scene(&t, &w, Task::SalientRecall, 9, 4).unwrap();
        assert_eq!(s.stream.counts().video, 100);
        assert_eq!(s.stream.counts().audio, 100);
        assert_eq!(s.truth.planted_per_modality(&s.stream.layout), (80, 10));
    }

    #[test]
    fn zero_offset_is_aligned_and_order_label_follows_windows() {
        let t = template(16);
        let w = World::new(16, 1).unwrap();
        for i in 0..40 {
            let s = make_scene(&t, &w, Task::AvAlignment, 1, i).unwrap();
            if s.spec.sync_offset_s == 0.0 {
                assert_eq!(s.truth.label, 1);
            }
            let aligned = (s.spec.sync_offset_s * IDS_PER_SECOND).abs() <= t.align_threshold as f64 + 1e-9;
            assert_eq!(s.truth.label == 1, aligned);

            let e = make_scene(&t, &w, Task::EventOrder, 1, i).unwrap();
            let mean_t = |b: bool| {
                let ts: Vec<f64> = e
                    .truth
                    .planted
                    .iter()
                    .map(|&i| e.stream.layout.meta[i])
                    .filter(|m| {
                        let in_b = match m.modality {
                            Modality::Audio => e.spec.group_b_audio.contains(&m.local_index),
                            _ => {
                                let (gh, gw) = t.frame_grid;
                                let c = m.local_index % (gh * gw);
                                e.spec
                                    .group_b_video
                                    .contains(&(m.local_index / (gh * gw), c / gw, c % gw))
                            }
                        };
                        in_b == b
                    })
                    .map(|m| m.pos.t as f64)
                    .collect();
                ts.iter().sum::<f64>() / ts.len() as f64
            };
            assert_eq!(e.truth.label == 0, mean_t(false) < mean_t(true));
        }
    }

    #[test]
    fn explicit_event_windows() {
        let t = SceneTemplate {
            duration_s: 4.0,
            fps: 1.0,
            event_ids: 25,
            ..template(8)
        };
        let w = World::new(8, 2).unwrap();
        let mut spec = sample_spec(&t, Task::EventOrder, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        spec.salient_video.clear();
        spec.group_b_video.clear();
        spec.salient_audio = (0..25).chain(50..75).collect();
        spec.group_b_audio = (50..75).collect();
        spec.label = 0;
        let (stream, truth) = generate_scene(&spec, &t, &w, 11).unwrap();
        assert_eq!(truth.planted.len(), 50);
        assert_eq!(truth.label, 0);
        assert!(stream.embeddings.is_finite());
    }

    #[test]
    fn out_of_range_salient_token_is_an_error() {
        let t = template(8);
        let w = World::new(8, 2).unwrap();
        let mut spec = sample_spec(&t, Task::SalientRecall, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        spec.salient_audio.insert(10_000);
        assert!(generate_scene(&spec, &t, &w, 1).is_err());
    }

    #[test]
    fn oracle_selection_cases() {
        let t = template(16);
        let w = World::new(16, 3).unwrap();
        let s = make_scene(&t, &w, Task::SalientRecall, 5, 0).unwrap();
        let np = s.truth.planted.len();
        assert_eq!(oracle_selection(&s.stream, &s.truth, np).unwrap(), s.truth.planted);
        let sub = oracle_selection(&s.stream, &s.truth, np / 2).unwrap();
        assert!(sub.iter().all(|i| s.truth.planted.contains(i)));
        let n = s.stream.counts().av();
        assert_eq!(
            oracle_selection(&s.stream, &s.truth, n).unwrap(),
            (0..n).collect::<Vec<_>>()
        );
        assert!(oracle_selection(&s.stream, &s.truth, n + 1).is_err());
    }

    #[test]
    fn scene_generation_is_reproducible() {
        let t = template(16);
        let w = World::new(16, 3).unwrap();
        for task in Task::ALL {
            let a = make_scene(&t, &w, task, 17, 3).unwrap();
            let b = make_scene(&t, &w, task, 17, 3).unwrap();
            assert_eq!(a.stream.embeddings, b.stream.embeddings);
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.spec, b.spec);
        }
    }

    proptest! {
        #[test]
        fn layout_invariants(
            duration in 0.5f64..9.0,
            fps in 0.5f64..4.0,
            gh in 1usize..5,
            gw in 1usize..5,
            chunk in 0.5f64..3.0,
            n_text in 0usize..6,
        ) {
            let l = assign_positions(duration, fps, (gh, gw), chunk, n_text).unwrap();
            // Counts match the tags.
            let tally = |m: Modality| l.meta.iter().filter(|x| x.modality == m).count();
            prop_assert_eq!(tally(Modality::Video), l.counts.video);
            prop_assert_eq!(tally(Modality::Audio), l.counts.audio);
            prop_assert_eq!(tally(Modality::Text), l.counts.text);
            // Text last.
            let first_text = l.meta.iter().position(|m| m.modality == Modality::Text).unwrap_or(l.len());
            prop_assert!(l.meta[first_text..].iter().all(|m| m.modality == Modality::Text));
            // Re-chunking the flattened order reproduces it.
            let rebuilt: Vec<usize> = l
                .chunks()
                .into_iter()
                .flat_map(|(v, a)| v.into_iter().chain(a))
                .chain(first_text..l.len())
                .collect();
            prop_assert_eq!(rebuilt, (0..l.len()).collect::<Vec<_>>());
            // Per-modality temporal monotonicity, dense audio ids, frame ids.
            for m in [Modality::Video, Modality::Audio] {
                let ts: Vec<u32> = l.meta.iter().filter(|x| x.modality == m).map(|x| x.pos.t).collect();
                prop_assert!(ts.windows(2).all(|w| w[0] <= w[1]));
            }
            let audio: Vec<u32> = l.meta.iter().filter(|x| x.modality == Modality::Audio).map(|x| x.pos.t).collect();
            prop_assert_eq!(audio, (0..l.counts.audio as u32).collect::<Vec<_>>());
            for (f, &t) in l.frame_ids.iter().enumerate() {
                prop_assert_eq!(t, (f as f64 / fps * 25.0).round() as u32);
            }
            // Within a chunk video precedes audio; chunks are non-decreasing.
            let av: Vec<&TokenMeta> = l.meta[..first_text].iter().collect();
            for w in av.windows(2) {
                prop_assert!(w[0].chunk <= w[1].chunk);
                if w[0].chunk == w[1].chunk {
                    prop_assert!(!(w[0].modality == Modality::Audio && w[1].modality == Modality::Video));
                }
            }
        }
    }
}
