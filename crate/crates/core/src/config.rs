//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rope::RopeMode;
use crate::stream::Task;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Model initialization seed.
    pub seed: u64,
    pub train_corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub eval_scenes: usize,
    pub eval_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 7,
            train_corpus: None,
            eval_corpus: None,
            eval_scenes: 200,
            eval_seed: 1_000_003,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_tasks(v: &str) -> Result<Vec<Task>> {
    v.split(',').map(|s| s.trim().parse()).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Partition text `t,h,w[,t]`: three blocks mean vanilla, four mean sync.
pub fn parse_splits(v: &str) -> Result<(RopeMode, Vec<usize>)> {
    let splits: Vec<usize> = v
        .split(',')
        .map(|s| parse_num("rope_partition", s.trim()))
        .collect::<Result<_>>()?;
    match splits.len() {
        3 => Ok((RopeMode::Vanilla, splits)),
        4 => Ok((RopeMode::Sync, splits)),
        n => Err(Error::Config(format!("rope_partition needs 3 or 4 blocks, got {n}"))),
    }
}

impl RunConfig {
    /// Apply one setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let tpl = &mut t.template;
        match key {
            "d_model" => {
                m.d_model = parse_num(key, v)?;
                tpl.d_model = m.d_model;
            }
            "n_heads" => m.n_heads = parse_num(key, v)?,
            "enc_layers" => m.enc_layers = parse_num(key, v)?,
            "dec_layers" => m.dec_layers = parse_num(key, v)?,
            "ffn_mult" => m.ffn_mult = parse_num(key, v)?,
            "scorer_hidden" => m.scorer_hidden = parse_num(key, v)?,
            "n_text" => {
                m.n_text = parse_num(key, v)?;
                tpl.n_text = m.n_text;
            }
            "theta_base" => m.theta_base = parse_num(key, v)?,
            "rope_partition" => (m.rope_mode, m.rope_splits) = parse_splits(v)?,
            "budget_p" => m.budget_p = parse_num(key, v)?,
            "mask_mode" => m.mask_mode = v.parse()?,
            "pool_mode" => m.pool_mode = v.parse()?,
            "gate_mode" => m.gate_mode = v.parse()?,
            "model_tasks" => m.tasks = parse_tasks(v)?,
            "train_tasks" => t.tasks = parse_tasks(v)?,
            "steps" => t.steps = parse_num(key, v)?,
            "batch" => t.batch = parse_num(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "rho" => t.rho = parse_num(key, v)?,
            "eps" => t.eps = parse_num(key, v)?,
            "eval_every" => t.eval_every = parse_num(key, v)?,
            "clip_norm" => {
                t.clip_norm = if v == "none" { None } else { Some(parse_num(key, v)?) };
            }
            "corpus_seed" => t.corpus_seed = parse_num(key, v)?,
            "duration_s" => tpl.duration_s = parse_num(key, v)?,
            "fps" => tpl.fps = parse_num(key, v)?,
            "frame_grid" => {
                let (h, w) = v
                    .split_once('x')
                    .ok_or_else(|| Error::Config(format!("frame_grid `{v}` is not HxW")))?;
                tpl.frame_grid = (parse_num(key, h)?, parse_num(key, w)?);
            }
            "chunk_seconds" => tpl.chunk_seconds = parse_num(key, v)?,
            "density_video" => tpl.density_video = parse_num(key, v)?,
            "density_audio" => tpl.density_audio = parse_num(key, v)?,
            "noise_sigma" => tpl.noise_sigma = parse_num(key, v)?,
            "salience" => tpl.salience = parse_num(key, v)?,
            "label_amp" => tpl.label_amp = parse_num(key, v)?,
            "event_amp" => tpl.event_amp = parse_num(key, v)?,
            "event_ids" => tpl.event_ids = parse_num(key, v)?,
            "align_threshold" => tpl.align_threshold = parse_num(key, v)?,
            "misalign_min" => tpl.misalign_min = parse_num(key, v)?,
            "world_seed" => tpl.world_seed = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "train_corpus" => self.train_corpus = Some(PathBuf::from(v)),
            "eval_corpus" => self.eval_corpus = Some(PathBuf::from(v)),
            "eval_scenes" => self.eval_scenes = parse_num(key, v)?,
            "eval_seed" => self.eval_seed = parse_num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train.template.d_model != self.model.d_model || self.train.template.n_text != self.model.n_text {
            return Err(Error::Config("scene template width or text length differs from the model".into()));
        }
        if let Some(t) = self.train.tasks.iter().find(|t| !self.model.tasks.contains(t)) {
            return Err(Error::Config(format!("train task {t} has no model head")));
        }
        Ok(())
    }

    /// Canonical text form; `parse(render())` reproduces the config.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let tpl = &t.template;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("d_model", m.d_model.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("enc_layers", m.enc_layers.to_string());
        kv("dec_layers", m.dec_layers.to_string());
        kv("ffn_mult", m.ffn_mult.to_string());
        kv("scorer_hidden", m.scorer_hidden.to_string());
        kv("n_text", m.n_text.to_string());
        kv("theta_base", m.theta_base.to_string());
        kv("rope_partition", join(&m.rope_splits));
        kv("budget_p", m.budget_p.to_string());
        kv("mask_mode", m.mask_mode.to_string());
        kv("pool_mode", m.pool_mode.to_string());
        kv("gate_mode", m.gate_mode.to_string());
        kv("model_tasks", join(&m.tasks));
        kv("train_tasks", join(&t.tasks));
        kv("steps", t.steps.to_string());
        kv("batch", t.batch.to_string());
        kv("lr", t.lr.to_string());
        kv("rho", t.rho.to_string());
        kv("eps", t.eps.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("clip_norm", t.clip_norm.map_or("none".into(), |c| c.to_string()));
        kv("corpus_seed", t.corpus_seed.to_string());
        kv("duration_s", tpl.duration_s.to_string());
        kv("fps", tpl.fps.to_string());
        kv("frame_grid", format!("{}x{}", tpl.frame_grid.0, tpl.frame_grid.1));
        kv("chunk_seconds", tpl.chunk_seconds.to_string());
        kv("density_video", tpl.density_video.to_string());
        kv("density_audio", tpl.density_audio.to_string());
        kv("noise_sigma", tpl.noise_sigma.to_string());
        kv("salience", tpl.salience.to_string());
        kv("label_amp", tpl.label_amp.to_string());
        kv("event_amp", tpl.event_amp.to_string());
        kv("event_ids", tpl.event_ids.to_string());
        kv("align_threshold", tpl.align_threshold.to_string());
        kv("misalign_min", tpl.misalign_min.to_string());
        kv("world_seed", tpl.world_seed.to_string());
        kv("seed", self.seed.to_string());
        if let Some(p) = &self.train_corpus {
            kv("train_corpus", p.display().to_string());
        }
        if let Some(p) = &self.eval_corpus {
            kv("eval_corpus", p.display().to_string());
        }
        kv("eval_scenes", self.eval_scenes.to_string());
        kv("eval_seed", self.eval_seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sieve::{MaskMode, PoolMode};

    #[test]
    fn shipped_configs_parse() {
        for text in [include_str!("../../../configs/recall.txt"), include_str!("../../../configs/ablation.txt")] {
            let c = RunConfig::parse(text).unwrap();
            assert_eq!((c.model.d_model, c.train.template.d_model, c.train.steps), (64, 64, 2000));
        }
    }

    #[test]
    fn render_parse_round_trip() {
        let mut c = RunConfig::default();
        c.set("d_model", "64").unwrap();
        c.set("n_heads", "2").unwrap();
        c.set("mask_mode", "intra_modal_bidirectional").unwrap();
        c.set("pool_mode", "separate").unwrap();
        c.set("train_corpus", "data/train").unwrap();
        c.set("clip_norm", "1.5").unwrap();
        let back = RunConfig::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.mask_mode, MaskMode::IntraModal);
        assert_eq!(back.model.pool_mode, PoolMode::Separate);
    }

    #[test]
    fn comments_and_partition() {
        let c = RunConfig::parse("# desk run\nrope_partition = 4,6,6  # vanilla\nsteps=10\n").unwrap();
        assert_eq!(c.model.rope_mode, RopeMode::Vanilla);
        assert_eq!(c.model.rope_splits, vec![4, 6, 6]);
        assert_eq!(c.train.steps, 10);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::parse("nonsense = 1").is_err());
        assert!(RunConfig::parse("steps").is_err());
        assert!(RunConfig::parse("steps = many").is_err());
        assert!(RunConfig::parse("rope_partition = 4,4").is_err());
        assert!(RunConfig::parse("rope_partition = 4,4,4").is_err());
        assert!(RunConfig::parse("model_tasks = captioning").is_err());
        assert!(RunConfig::parse("budget_p = 0").is_err());
    }
}
