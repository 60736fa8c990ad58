//! CSV and SVG emitters for kernel curves, budget allocation and selection
//! maps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rope::{build_schedule, relative_kernel_curve};
use crate::stream::{Modality, StreamLayout};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnalysisKind {
    RopeCurves,
    AllocationHist,
    SelectionMap,
}

impl FromStr for AnalysisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rope_curves" => Ok(Self::RopeCurves),
            "allocation_hist" => Ok(Self::AllocationHist),
            "selection_map" => Ok(Self::SelectionMap),
            _ => Err(Error::Invalid(format!("unknown analysis kind `{s}`"))),
        }
    }
}

/// Kind-specific inputs.
pub enum AnalysisInput<'a> {
    RopeCurves(&'a RopeCurveSpec),
    AllocationHist(&'a [AllocationPoint]),
    SelectionMap { layout: &'a StreamLayout, gates: &'a [u8] },
}

impl AnalysisInput<'_> {
    pub fn kind(&self) -> AnalysisKind {
        match self {
            Self::RopeCurves(_) => AnalysisKind::RopeCurves,
            Self::AllocationHist(_) => AnalysisKind::AllocationHist,
            Self::SelectionMap { .. } => AnalysisKind::SelectionMap,
        }
    }
}

/// Write `<dir>/<kind>.csv` and `<dir>/<kind>.svg`. Returns both paths.
pub fn emit_analysis(kind: &str, input: &AnalysisInput, dir: &FsPath) -> Result<(PathBuf, PathBuf)> {
    let kind: AnalysisKind = kind.parse()?;
    if kind != input.kind() {
        return Err(Error::Invalid(format!("inputs do not match analysis kind {kind:?}")));
    }
    let (name, csv, svg) = match input {
        AnalysisInput::RopeCurves(spec) => {
            let rows = rope_curves(spec)?;
            ("rope_curves", rope_curves_csv(&rows), rope_curves_svg(&rows))
        }
        AnalysisInput::AllocationHist(points) => {
            let bins = allocation_hist(points);
            ("allocation_hist", allocation_csv(&bins), allocation_svg(&bins))
        }
        AnalysisInput::SelectionMap { layout, gates } => {
            let map = selection_map(layout, gates)?;
            ("selection_map", selection_csv(&map), selection_svg(&map, layout.frame_grid))
        }
    };
    fs::create_dir_all(dir)?;
    let c = dir.join(format!("{name}.csv"));
    let s = dir.join(format!("{name}.svg"));
    fs::write(&c, csv)?;
    fs::write(&s, svg)?;
    Ok((c, s))
}

// ---------------------------------------------------------------- rope curves

#[derive(Clone, Debug, PartialEq)]
pub struct RopeCurveSpec {
    pub theta_base: f64,
    pub head_dim: usize,
    /// Number of highest frequencies in the high band.
    pub high: usize,
    /// Number of lowest frequencies in the low band.
    pub low: usize,
    pub delta_max: usize,
}

impl Default for RopeCurveSpec {
    fn default() -> Self {
        Self {
            theta_base: 10000.0,
            head_dim: 128,
            high: 18,
            low: 10,
            delta_max: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub delta: usize,
    pub g_high: f64,
    pub g_low: f64,
    pub g_full: f64,
}

pub fn rope_curves(spec: &RopeCurveSpec) -> Result<Vec<CurveRow>> {
    let s = build_schedule(spec.theta_base, spec.head_dim)?;
    let n = s.n_freqs();
    if spec.high > n || spec.low > n {
        return Err(Error::Invalid(format!(
            "bands of {} and {} frequencies exceed the {n} available",
            spec.high, spec.low
        )));
    }
    let high: Vec<usize> = (0..spec.high).collect();
    let low: Vec<usize> = (n - spec.low..n).collect();
    let full: Vec<usize> = (0..n).collect();
    let gh = relative_kernel_curve(&high, &s, spec.delta_max)?;
    let gl = relative_kernel_curve(&low, &s, spec.delta_max)?;
    let gf = relative_kernel_curve(&full, &s, spec.delta_max)?;
    Ok((0..=spec.delta_max)
        .map(|d| CurveRow {
            delta: d,
            g_high: gh[d],
            g_low: gl[d],
            g_full: gf[d],
        })
        .collect())
}

pub fn rope_curves_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("delta,g_high_band,g_low_band,g_full\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.delta, r.g_high, r.g_low, r.g_full);
    }
    s
}

// ----------------------------------------------------------------- allocation

/// One evaluated scene: its planted densities and the kept split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AllocationPoint {
    pub density_video: f64,
    pub density_audio: f64,
    pub kept_video: usize,
    pub kept_audio: usize,
}

/// Scenes sharing one density contrast `density_video − density_audio`.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationBin {
    pub contrast: f64,
    pub scenes: usize,
    pub kept_video: usize,
    pub kept_audio: usize,
    /// Scenes where the denser modality got the larger share.
    pub dense_majority: usize,
}

/// Group scenes by density contrast, rounded to two decimals.
pub fn allocation_hist(points: &[AllocationPoint]) -> Vec<AllocationBin> {
    let mut bins: Vec<AllocationBin> = Vec::new();
    for p in points {
        let c = ((p.density_video - p.density_audio) * 100.0).round() / 100.0;
        let i = match bins.iter().position(|b| b.contrast == c) {
            Some(i) => i,
            None => {
                bins.push(AllocationBin {
                    contrast: c,
                    scenes: 0,
                    kept_video: 0,
                    kept_audio: 0,
                    dense_majority: 0,
                });
                bins.len() - 1
            }
        };
        let b = &mut bins[i];
        b.scenes += 1;
        b.kept_video += p.kept_video;
        b.kept_audio += p.kept_audio;
        if dense_majority(p) {
            b.dense_majority += 1;
        }
    }
    bins.sort_by(|a, b| a.contrast.total_cmp(&b.contrast));
    bins
}

/// Whether the denser modality received more of the budget than the other.
pub fn dense_majority(p: &AllocationPoint) -> bool {
    if p.density_video > p.density_audio {
        p.kept_video > p.kept_audio
    } else if p.density_audio > p.density_video {
        p.kept_audio > p.kept_video
    } else {
        false
    }
}

pub fn allocation_csv(bins: &[AllocationBin]) -> String {
    let mut s = String::from("contrast,scenes,mean_kept_video,mean_kept_audio,dense_majority_share\n");
    for b in bins {
        let n = b.scenes.max(1) as f64;
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            b.contrast,
            b.scenes,
            b.kept_video as f64 / n,
            b.kept_audio as f64 / n,
            b.dense_majority as f64 / n
        );
    }
    s
}

// -------------------------------------------------------------- selection map

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionMap {
    /// `frames[f][h][w]` is true when that video token was kept.
    pub frames: Vec<Vec<Vec<bool>>>,
    pub audio: Vec<bool>,
}

pub fn selection_map(layout: &StreamLayout, gates: &[u8]) -> Result<SelectionMap> {
    let n_av = layout.counts.av();
    if gates.len() != n_av {
        return Err(Error::Shape {
            op: "selection_map",
            left: vec![gates.len()],
            right: vec![n_av],
        });
    }
    let (gh, gw) = layout.frame_grid;
    let mut frames = vec![vec![vec![false; gw]; gh]; layout.frame_ids.len()];
    let mut audio = vec![false; layout.counts.audio];
    for m in &layout.meta[..n_av] {
        let kept = gates[m.stream_index] == 1;
        match m.modality {
            Modality::Video => {
                let cells = gh * gw;
                let (f, c) = (m.local_index / cells, m.local_index % cells);
                frames[f][c / gw][c % gw] = kept;
            }
            Modality::Audio => audio[m.local_index] = kept,
            Modality::Text => {}
        }
    }
    Ok(SelectionMap { frames, audio })
}

pub fn selection_csv(map: &SelectionMap) -> String {
    let mut s = String::from("modality,frame,h,w,kept\n");
    for (f, grid) in map.frames.iter().enumerate() {
        for (h, row) in grid.iter().enumerate() {
            for (w, &k) in row.iter().enumerate() {
                let _ = writeln!(s, "video,{f},{h},{w},{}", u8::from(k));
            }
        }
    }
    for (i, &k) in map.audio.iter().enumerate() {
        let _ = writeln!(s, "audio,{i},0,0,{}", u8::from(k));
    }
    s
}

// ------------------------------------------------------------------------ svg

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

fn rope_curves_svg(rows: &[CurveRow]) -> String {
    let mut s = svg_open(W, H);
    let dmax = rows.last().map_or(1, |r| r.delta.max(1)) as f64;
    let x = |d: usize| PAD + (W - 2.0 * PAD) * d as f64 / dmax;
    // g in [-1, 1].
    let y = |g: f64| PAD + (H - 2.0 * PAD) * (1.0 - g) / 2.0;
    let _ = writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{0:.2}\" x2=\"{1:.2}\" y2=\"{0:.2}\" stroke=\"#999\"/>",
        y(0.0),
        W - PAD
    );
    let curves = [
        (rows.iter().map(|r| r.g_high).collect::<Vec<_>>(), "#d62728"),
        (rows.iter().map(|r| r.g_low).collect(), "#1f77b4"),
        (rows.iter().map(|r| r.g_full).collect(), "#2ca02c"),
    ];
    for (g, color) in curves {
        let pts: Vec<(f64, f64)> = rows.iter().zip(&g).map(|(r, &g)| (x(r.delta), y(g))).collect();
        s += &polyline(&pts, color);
    }
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"12\">g(delta), delta = 0..{dmax}: red high band, blue low band, green all</text>",
        H - 10.0
    );
    s + "</svg>\n"
}

fn allocation_svg(bins: &[AllocationBin]) -> String {
    let mut s = svg_open(W, H);
    let n = bins.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let peak = bins
        .iter()
        .map(|b| b.kept_video.max(b.kept_audio) as f64 / b.scenes.max(1) as f64)
        .fold(1.0, f64::max);
    let scale = (H - 2.0 * PAD) / peak;
    for (i, b) in bins.iter().enumerate() {
        let m = b.scenes.max(1) as f64;
        let x0 = PAD + slot * i as f64;
        let bw = slot * 0.4;
        for (j, (v, color)) in [(b.kept_video as f64 / m, "#ff7f0e"), (b.kept_audio as f64 / m, "#9467bd")]
            .into_iter()
            .enumerate()
        {
            let h = v * scale;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{h:.2}\" fill=\"{color}\"/>",
                x0 + slot * 0.1 + bw * j as f64,
                H - PAD - h
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" font-size=\"11\">{:+.2}</text>",
            x0 + slot * 0.3,
            H - PAD + 14.0,
            b.contrast
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"12\">mean kept tokens by density contrast: orange video, purple audio</text>",
        PAD - 12.0
    );
    s + "</svg>\n"
}

fn selection_svg(map: &SelectionMap, (gh, gw): (usize, usize)) -> String {
    let cell = 10.0;
    let gap = 6.0;
    let fw = gw as f64 * cell + gap;
    let width = (map.frames.len() as f64 * fw).max(map.audio.len() as f64 * 3.0) + 2.0 * gap;
    let height = gh as f64 * cell + 3.0 * gap + 12.0;
    let mut s = svg_open(width, height);
    for (f, grid) in map.frames.iter().enumerate() {
        for (h, row) in grid.iter().enumerate() {
            for (w, &k) in row.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\" stroke=\"#ccc\" stroke-width=\"0.5\"/>",
                    gap + f as f64 * fw + w as f64 * cell,
                    gap + h as f64 * cell,
                    if k { "#222" } else { "#eee" }
                );
            }
        }
    }
    let ya = 2.0 * gap + gh as f64 * cell;
    for (i, &k) in map.audio.iter().enumerate() {
        let _ = writeln!(
            s,
            "<rect x=\"{:.1}\" y=\"{ya:.1}\" width=\"3\" height=\"12\" fill=\"{}\"/>",
            gap + i as f64 * 3.0,
            if k { "#222" } else { "#eee" }
        );
    }
    s + "</svg>\n"
}
