//! Checkpoints, corpora and run manifests on disk.
//!
//! A checkpoint is `<stem>.bin` (little-endian `f64` values, concatenated in
//! parameter order) plus `<stem>.manifest` with one `name shape offset` line
//! per parameter.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::stream::{make_scene, Scene, SceneTemplate, Task, World};
use crate::tensor::Tensor;

const CKPT_HEADER: &str = "echopix-checkpoint 1";
const CORPUS_HEADER: &str = "echopix-corpus 1";

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("{}: length {} is not a multiple of 8", path.display(), bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Write `params` as `<stem>.bin` + `<stem>.manifest`.
pub fn save_checkpoint(params: &Params, stem: &Path) -> Result<()> {
    let mut manifest = format!("{CKPT_HEADER}\n");
    let mut off = 0;
    for (name, t) in params.iter() {
        let shape = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        manifest.push_str(&format!("{name} {shape} {off}\n"));
        off += t.numel();
    }
    write_f64s(&with_ext(stem, "bin"), params.iter().flat_map(|(_, t)| t.data().to_vec()))?;
    fs::write(with_ext(stem, "manifest"), manifest)?;
    Ok(())
}

/// Read a checkpoint into a standalone parameter store.
pub fn read_checkpoint(stem: &Path) -> Result<Params> {
    let manifest = fs::read_to_string(with_ext(stem, "manifest"))?;
    let data = read_f64s(&with_ext(stem, "bin"))?;
    let mut lines = manifest.lines();
    if lines.next() != Some(CKPT_HEADER) {
        return Err(Error::Format("not a checkpoint manifest".into()));
    }
    let mut params = Params::new();
    let mut expect_off = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, off] = f[..] else {
            return Err(Error::Format(format!("bad manifest line `{line}`")));
        };
        let shape: Vec<usize> = shape
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::Format(format!("bad shape in `{line}`"))))
            .collect::<Result<_>>()?;
        let off: usize = off.parse().map_err(|_| Error::Format(format!("bad offset in `{line}`")))?;
        let n: usize = shape.iter().product();
        if off != expect_off || off + n > data.len() {
            return Err(Error::Format(format!("offset of {name} does not match the data file")));
        }
        params.add(name, Tensor::new(shape, data[off..off + n].to_vec())?);
        expect_off += n;
    }
    if expect_off != data.len() {
        return Err(Error::Format(format!(
            "manifest covers {expect_off} values, data file has {}",
            data.len()
        )));
    }
    Ok(params)
}

/// Load a checkpoint into `params`; names and shapes must match exactly.
pub fn load_checkpoint(params: &mut Params, stem: &Path) -> Result<()> {
    let other = read_checkpoint(stem)?;
    if other.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model has {}",
            other.len(),
            params.len()
        )));
    }
    params.load_from(&other)
}

/// A generated corpus: every scene is reproducible from the header.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub template: SceneTemplate,
    pub task: Task,
    pub corpus_seed: u64,
    pub scenes: Vec<Scene>,
}

impl Corpus {
    pub fn generate(template: &SceneTemplate, task: Task, corpus_seed: u64, n: usize) -> Result<Self> {
        let world = World::new(template.d_model, template.world_seed)?;
        let scenes = (0..n as u64)
            .map(|i| make_scene(template, &world, task, corpus_seed, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            template: template.clone(),
            task,
            corpus_seed,
            scenes,
        })
    }

    fn header(&self) -> String {
        let t = &self.template;
        format!(
            "{CORPUS_HEADER}\ntask = {}\ncorpus_seed = {}\nscenes = {}\nd_model = {}\nduration_s = {}\nfps = {}\n\
             frame_grid = {}x{}\nchunk_seconds = {}\nn_text = {}\ndensity_video = {}\ndensity_audio = {}\n\
             noise_sigma = {}\nsalience = {}\nlabel_amp = {}\nevent_amp = {}\nevent_ids = {}\n\
             align_threshold = {}\nmisalign_min = {}\nworld_seed = {}\n",
            self.task,
            self.corpus_seed,
            self.scenes.len(),
            t.d_model,
            t.duration_s,
            t.fps,
            t.frame_grid.0,
            t.frame_grid.1,
            t.chunk_seconds,
            t.n_text,
            t.density_video,
            t.density_audio,
            t.noise_sigma,
            t.salience,
            t.label_amp,
            t.event_amp,
            t.event_ids,
            t.align_threshold,
            t.misalign_min,
            t.world_seed
        )
    }

    /// Write `corpus.txt` (header), `scenes.csv` (labels and planted
    /// counts) and `embeddings.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("corpus.txt"), self.header())?;
        let mut csv = String::from("index,task,label,noise_seed,sync_offset_s,planted_video,planted_audio\n");
        for (i, s) in self.scenes.iter().enumerate() {
            let (v, a) = s.truth.planted_per_modality(&s.stream.layout);
            csv.push_str(&format!(
                "{i},{},{},{},{},{v},{a}\n",
                s.truth.task, s.truth.label, s.seed, s.spec.sync_offset_s
            ));
        }
        fs::write(dir.join("scenes.csv"), csv)?;
        write_f64s(
            &dir.join("embeddings.bin"),
            self.scenes.iter().flat_map(|s| s.stream.embeddings.data().to_vec()),
        )
    }

    /// Regenerate the corpus described by `dir/corpus.txt` and check it
    /// against the stored embeddings.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("corpus.txt"))?;
        let mut lines = text.lines();
        if lines.next() != Some(CORPUS_HEADER) {
            return Err(Error::Format(format!("{} is not a corpus", dir.display())));
        }
        let mut t = SceneTemplate::default();
        let (mut task, mut seed, mut n) = (None, None, None);
        let num = |k: &str, v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Format(format!("corpus `{k}`: bad value `{v}`")))
        };
        for line in lines {
            let Some((k, v)) = line.split_once('=') else { continue };
            let (k, v) = (k.trim(), v.trim());
            match k {
                "task" => task = Some(v.parse::<Task>()?),
                "corpus_seed" => seed = Some(v.parse::<u64>().map_err(|_| Error::Format("corpus_seed".into()))?),
                "scenes" => n = Some(num(k, v)? as usize),
                "d_model" => t.d_model = num(k, v)? as usize,
                "duration_s" => t.duration_s = num(k, v)?,
                "fps" => t.fps = num(k, v)?,
                "frame_grid" => {
                    let (h, w) = v.split_once('x').ok_or_else(|| Error::Format("frame_grid".into()))?;
                    t.frame_grid = (num(k, h)? as usize, num(k, w)? as usize);
                }
                "chunk_seconds" => t.chunk_seconds = num(k, v)?,
                "n_text" => t.n_text = num(k, v)? as usize,
                "density_video" => t.density_video = num(k, v)?,
                "density_audio" => t.density_audio = num(k, v)?,
                "noise_sigma" => t.noise_sigma = num(k, v)?,
                "salience" => t.salience = num(k, v)?,
                "label_amp" => t.label_amp = num(k, v)?,
                "event_amp" => t.event_amp = num(k, v)?,
                "event_ids" => t.event_ids = num(k, v)? as u32,
                "align_threshold" => t.align_threshold = num(k, v)? as u32,
                "misalign_min" => t.misalign_min = num(k, v)? as u32,
                "world_seed" => {
                    t.world_seed = v.parse().map_err(|_| Error::Format("world_seed".into()))?;
                }
                _ => return Err(Error::Format(format!("unknown corpus key `{k}`"))),
            }
        }
        let (Some(task), Some(seed), Some(n)) = (task, seed, n) else {
            return Err(Error::Format("corpus header lacks task, corpus_seed or scenes".into()));
        };
        let corpus = Self::generate(&t, task, seed, n)?;
        let stored = read_f64s(&dir.join("embeddings.bin"))?;
        let fresh = corpus.scenes.iter().flat_map(|s| s.stream.embeddings.data().iter().copied());
        if stored.len() != corpus.scenes.iter().map(|s| s.stream.embeddings.numel()).sum::<usize>()
            || !stored.iter().copied().eq(fresh)
        {
            return Err(Error::Format(format!(
                "{}: stored embeddings differ from the regenerated corpus",
                dir.display()
            )));
        }
        Ok(corpus)
    }
}

/// Hex SHA-256 of `text`.
pub fn content_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reproduction record written next to every CLI output.
pub fn write_manifest(dir: &Path, command: &str, config_text: &str, seed: u64, extra: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut s = format!(
        "command = {command}\nconfig_hash = {}\nseed = {seed}\ncrate_version = {}\nformat_version = 1\n",
        content_hash(config_text),
        env!("CARGO_PKG_VERSION")
    );
    for (k, v) in extra {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s.push_str("\n[config]\n");
    s.push_str(config_text);
    fs::write(dir.join("manifest.txt"), s)?;
    Ok(())
}
