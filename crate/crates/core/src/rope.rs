//! Multi-axis rotary position encodings.
//!
//! Frequency index `j` rotates the coordinate pair `(2j, 2j+1)` by
//! `thetas[j] · pos[axis(j)]`. A [`FrequencyPartition`] assigns consecutive
//! runs of frequencies (highest first) to the temporal, height and width axes.
//! The synchronized layout appends a second temporal block on the lowest
//! frequencies so that long temporal distances still produce a slowly varying,
//! non-aliased signal.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    T,
    H,
    W,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PositionTriple {
    pub t: u32,
    pub h: u32,
    pub w: u32,
}

impl PositionTriple {
    pub const fn new(t: u32, h: u32, w: u32) -> Self {
        Self { t, h, w }
    }

    /// Text and audio positions: every axis carries the same id.
    pub const fn degenerate(t: u32) -> Self {
        Self { t, h: t, w: t }
    }

    pub fn get(&self, axis: Axis) -> u32 {
        match axis {
            Axis::T => self.t,
            Axis::H => self.h,
            Axis::W => self.w,
        }
    }

    pub fn shifted(&self, dt: u32, dh: u32, dw: u32) -> Self {
        Self::new(self.t + dt, self.h + dh, self.w + dw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencySchedule {
    pub theta_base: f64,
    pub d: usize,
    pub thetas: Vec<f64>,
}

impl FrequencySchedule {
    pub fn n_freqs(&self) -> usize {
        self.thetas.len()
    }
}

/// `thetas[j] = theta_base^(−2j/d)` for `j < d/2`.
pub fn build_schedule(theta_base: f64, d: usize) -> Result<FrequencySchedule> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rope head dimension must be even and >= 2, got {d}"
        )));
    }
    if theta_base.is_nan() || theta_base <= 1.0 {
        return Err(Error::Config(format!(
            "rope theta_base must exceed 1, got {theta_base}"
        )));
    }
    let thetas = (0..d / 2)
        .map(|j| theta_base.powf(-2.0 * j as f64 / d as f64))
        .collect();
    Ok(FrequencySchedule {
        theta_base,
        d,
        thetas,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RopeMode {
    Vanilla,
    Sync,
}

impl fmt::Display for RopeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RopeMode::Vanilla => "vanilla",
            RopeMode::Sync => "sync",
        })
    }
}

impl FromStr for RopeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "sync" => Ok(Self::Sync),
            _ => Err(Error::Config(format!("unknown rope mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyPartition {
    pub mode: RopeMode,
    pub blocks: Vec<(Axis, usize)>,
    axis_of: Vec<Axis>,
}

impl FrequencyPartition {
    pub fn splits(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.1).collect()
    }

    pub fn axis(&self, j: usize) -> Axis {
        self.axis_of[j]
    }

    pub fn n_freqs(&self) -> usize {
        self.axis_of.len()
    }

    /// Frequency indices covered by block `b`.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let start: usize = self.blocks[..b].iter().map(|x| x.1).sum();
        start..start + self.blocks[b].1
    }

    /// `t,h,w[,t]` form used on the command line.
    pub fn describe(&self) -> String {
        self.splits()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Vanilla takes `[t, h, w]`; sync takes `[t, h, w, t]`. A sync partition
/// whose final block is 0 is the vanilla layout.
pub fn make_partition(mode: RopeMode, splits: &[usize], d: usize) -> Result<FrequencyPartition> {
    let axes: &[Axis] = match mode {
        RopeMode::Vanilla => &[Axis::T, Axis::H, Axis::W],
        RopeMode::Sync => &[Axis::T, Axis::H, Axis::W, Axis::T],
    };
    if splits.len() != axes.len() {
        return Err(Error::Config(format!(
            "{mode} partition needs {} splits, got {}",
            axes.len(),
            splits.len()
        )));
    }
    let total: usize = splits.iter().sum();
    if !d.is_multiple_of(2) || total != d / 2 {
        return Err(Error::Config(format!(
            "partition splits {splits:?} sum to {total}, expected d/2 = {}",
            d / 2
        )));
    }
    let blocks: Vec<(Axis, usize)> = axes.iter().copied().zip(splits.iter().copied()).collect();
    let axis_of = blocks
        .iter()
        .flat_map(|&(a, n)| std::iter::repeat_n(a, n))
        .collect();
    Ok(FrequencyPartition {
        mode,
        blocks,
        axis_of,
    })
}

/// Parses `t,h,w` (vanilla) or `t,h,w,t` (sync).
pub fn parse_partition(spec: &str, d: usize) -> Result<FrequencyPartition> {
    let splits = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad partition entry `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mode = if splits.len() == 3 {
        RopeMode::Vanilla
    } else {
        RopeMode::Sync
    };
    make_partition(mode, &splits, d)
}

/// Rotate `x` (length d) to position `pos`.
pub fn apply_rope(
    x: &[f64],
    pos: PositionTriple,
    schedule: &FrequencySchedule,
    partition: &FrequencyPartition,
) -> Result<Vec<f64>> {
    if x.len() != schedule.d || partition.n_freqs() * 2 != schedule.d {
        return Err(Error::Shape {
            op: "apply_rope",
            left: vec![x.len()],
            right: vec![schedule.d, partition.n_freqs() * 2],
        });
    }
    let mut out = x.to_vec();
    for (j, &theta) in schedule.thetas.iter().enumerate() {
        let p = pos.get(partition.axis(j));
        if p == 0 {
            continue;
        }
        let (s, c) = (theta * p as f64).sin_cos();
        let (a, b) = (x[2 * j], x[2 * j + 1]);
        out[2 * j] = a * c - b * s;
        out[2 * j + 1] = a * s + b * c;
    }
    Ok(out)
}

/// Mean over `band` of `cos(thetas[j] · Δ)` for `Δ = 0..=delta_max`.
pub fn relative_kernel_curve(
    band: &[usize],
    schedule: &FrequencySchedule,
    delta_max: usize,
) -> Result<Vec<f64>> {
    if band.is_empty() {
        return Err(Error::Invalid("kernel curve over an empty band".into()));
    }
    if let Some(&j) = band.iter().find(|&&j| j >= schedule.n_freqs()) {
        return Err(Error::Index {
            what: "frequency band",
            index: j,
            len: schedule.n_freqs(),
        });
    }
    let n = band.len() as f64;
    Ok((0..=delta_max)
        .map(|delta| {
            band.iter()
                .map(|&j| (schedule.thetas[j] * delta as f64).cos())
                .sum::<f64>()
                / n
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RopeConfig {
    pub schedule: FrequencySchedule,
    pub partition: FrequencyPartition,
}

impl RopeConfig {
    pub fn new(theta_base: f64, d: usize, mode: RopeMode, splits: &[usize]) -> Result<Self> {
        Ok(Self {
            schedule: build_schedule(theta_base, d)?,
            partition: make_partition(mode, splits, d)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.schedule.d
    }

    /// Cosine and signed-sine tables (`L × d`) for [`rope_tape`].
    pub fn tables(&self, positions: &[PositionTriple]) -> RopeTables {
        let d = self.schedule.d;
        let mut cos = vec![0.0; positions.len() * d];
        let mut sin = vec![0.0; positions.len() * d];
        for (r, pos) in positions.iter().enumerate() {
            for (j, &theta) in self.schedule.thetas.iter().enumerate() {
                let p = pos.get(self.partition.axis(j));
                let (s, c) = if p == 0 {
                    (0.0, 1.0)
                } else {
                    (theta * p as f64).sin_cos()
                };
                cos[r * d + 2 * j] = c;
                cos[r * d + 2 * j + 1] = c;
                sin[r * d + 2 * j] = -s;
                sin[r * d + 2 * j + 1] = s;
            }
        }
        let mut swap = vec![0.0; d * d];
        for j in 0..d / 2 {
            swap[(2 * j + 1) * d + 2 * j] = 1.0;
            swap[2 * j * d + 2 * j + 1] = 1.0;
        }
        RopeTables {
            cos: Tensor::from_parts(vec![positions.len(), d], cos),
            sin: Tensor::from_parts(vec![positions.len(), d], sin),
            swap: Tensor::from_parts(vec![d, d], swap),
        }
    }
}

/// Precomputed per-position rotation tables for one sequence.
pub struct RopeTables {
    pub cos: Tensor,
    pub sin: Tensor,
    /// Pair-swap permutation: `(x·P)[2j] = x[2j+1]`, `(x·P)[2j+1] = x[2j]`.
    pub swap: Tensor,
}

impl RopeTables {
    /// Tables restricted to the given rows.
    pub fn gather(&self, rows: &[usize]) -> RopeTables {
        let d = self.cos.cols();
        let pick = |t: &Tensor| {
            let mut out = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                out.extend_from_slice(t.row_slice(r));
            }
            Tensor::from_parts(vec![rows.len(), d], out)
        };
        RopeTables {
            cos: pick(&self.cos),
            sin: pick(&self.sin),
            swap: self.swap.clone(),
        }
    }
}

/// `x ∘ C + (x · P) ∘ S` on the tape, for `x: L × d`.
pub fn rope_tape(tape: &Tape, x: &Var, tables: &RopeTables) -> Result<Var> {
    let c = tape.constant(tables.cos.clone());
    let s = tape.constant(tables.sin.clone());
    let p = tape.constant(tables.swap.clone());
    let direct = tape.mul(x, &c)?;
    let swapped = tape.mul(&tape.matmul(x, &p)?, &s)?;
    tape.add(&direct, &swapped)
}
