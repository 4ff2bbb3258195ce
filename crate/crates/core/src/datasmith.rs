//! Dataset construction: shot segmentation, sliding-window pair extraction,
//! synthetic line art, evaluation sequences and the pair manifest.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ColorImage, SketchImage};

/// Half-open frame range `[start, end)` of one camera take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub start: usize,
    pub end: usize,
}

impl Shot {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Sorted, non-overlapping, non-empty shots.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShotIndex {
    shots: Vec<Shot>,
}

impl ShotIndex {
    pub fn new(shots: Vec<Shot>) -> Result<Self> {
        for (i, s) in shots.iter().enumerate() {
            if s.end <= s.start {
                return Err(Error::Validation(format!("shot {i} is empty: {s:?}")));
            }
            if i > 0 && s.start < shots[i - 1].end {
                return Err(Error::Validation(format!("shot {i} overlaps or is out of order")));
            }
        }
        Ok(Self { shots })
    }

    pub fn shots(&self) -> &[Shot] {
        &self.shots
    }

    pub fn len(&self) -> usize {
        self.shots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shots.is_empty()
    }

    /// `shot<TAB>start<TAB>end` lines under a header.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("shot\tstart\tend\n");
        for (i, shot) in self.shots.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{}\t{}", shot.start, shot.end);
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut shots = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Validation(format!("bad shot line {line:?}")))
            };
            if f.len() != 3 {
                return Err(Error::Validation(format!("bad shot line {line:?}")));
            }
            shots.push(Shot {
                start: parse(f[1])?,
                end: parse(f[2])?,
            });
        }
        Self::new(shots)
    }
}

pub const HUE_BINS: usize = 16;
pub const SAT_BINS: usize = 4;
pub const VAL_BINS: usize = 4;
pub const DEFAULT_SHOT_THRESHOLD: f64 = 0.4;

/// Normalized `16 x 4 x 4` HSV histogram.
pub fn hsv_histogram(img: &ColorImage) -> Vec<f64> {
    let mut hist = vec![0.0; HUE_BINS * SAT_BINS * VAL_BINS];
    for p in img.data().chunks_exact(3) {
        let (r, g, b) = (p[0], p[1], p[2]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let delta = max - min;
        let hue = if delta <= 0.0 {
            0.0
        } else if max == r {
            ((g - b) / delta).rem_euclid(6.0)
        } else if max == g {
            (b - r) / delta + 2.0
        } else {
            (r - g) / delta + 4.0
        } / 6.0;
        let sat = if max <= 0.0 { 0.0 } else { delta / max };
        let bin = |v: f32, n: usize| ((v * n as f32) as usize).min(n - 1);
        let idx = (bin(hue, HUE_BINS) * SAT_BINS + bin(sat, SAT_BINS)) * VAL_BINS + bin(max, VAL_BINS);
        hist[idx] += 1.0;
    }
    let total = (img.height() * img.width()) as f64;
    hist.iter_mut().for_each(|h| *h /= total);
    hist
}

/// `0.5 * sum (a - b)^2 / (a + b)`, in `[0, 1]` for normalized histograms.
pub fn chi_square(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .filter(|(x, y)| *x + *y > 0.0)
        .map(|(x, y)| (x - y) * (x - y) / (x + y))
        .sum::<f64>()
}

/// Incremental shot detector: a cut is placed before every frame whose
/// histogram distance to its predecessor exceeds the threshold.
#[derive(Debug, Clone)]
pub struct ShotDetector {
    threshold: f64,
    previous: Option<Vec<f64>>,
    count: usize,
    cuts: Vec<usize>,
}

impl ShotDetector {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            previous: None,
            count: 0,
            cuts: Vec::new(),
        }
    }

    pub fn push(&mut self, frame: &ColorImage) {
        let hist = hsv_histogram(frame);
        if let Some(prev) = &self.previous {
            if chi_square(prev, &hist) > self.threshold {
                self.cuts.push(self.count);
            }
        }
        self.previous = Some(hist);
        self.count += 1;
    }

    pub fn finish(self) -> Result<ShotIndex> {
        if self.count == 0 {
            return Err(Error::Validation("no frames to segment".into()));
        }
        let mut shots = Vec::with_capacity(self.cuts.len() + 1);
        let mut start = 0;
        for &c in &self.cuts {
            shots.push(Shot { start, end: c });
            start = c;
        }
        shots.push(Shot {
            start,
            end: self.count,
        });
        ShotIndex::new(shots)
    }
}

pub fn detect_shots(frames: &[ColorImage], threshold: f64) -> Result<ShotIndex> {
    let mut d = ShotDetector::new(threshold);
    frames.iter().for_each(|f| d.push(f));
    d.finish()
}

/// Number of windows `(s, s + width)` with `s = 0, stride, 2*stride, ...`
/// that fit inside `n` frames.
pub fn pair_count(n: usize, stride: usize, width: usize) -> usize {
    if n <= width || stride == 0 {
        0
    } else {
        (n - 1 - width) / stride + 1
    }
}

/// Window endpoints inside one shot, as absolute frame indices.
pub fn extract_pairs(shot: Shot, stride: usize, width: usize) -> Vec<(usize, usize)> {
    if stride == 0 || width == 0 {
        return Vec::new();
    }
    (0..pair_count(shot.len(), stride, width))
        .map(|w| {
            let s = shot.start + w * stride;
            (s, s + width)
        })
        .collect()
}

/// Extended difference-of-Gaussians line extraction on luma.
///
/// `D = G_sigma(L) - tau * G_{k sigma}(L)`; pixels with `D >= epsilon` are
/// white, the rest fall off as `1 + tanh(phi * (D - epsilon))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineArtParams {
    pub sigma: f64,
    pub k: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub phi: f64,
}

impl Default for LineArtParams {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            k: 1.6,
            tau: 0.98,
            epsilon: -0.01,
            phi: 200.0,
        }
    }
}

impl LineArtParams {
    pub fn describe(&self) -> String {
        format!(
            "xdog sigma={} k={} tau={} epsilon={} phi={}",
            self.sigma, self.k, self.tau, self.epsilon, self.phi
        )
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with clamped borders.
fn blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

pub fn synthesize_lineart(img: &ColorImage, p: &LineArtParams) -> SketchImage {
    let (h, w) = (img.height(), img.width());
    let luma: Vec<f64> = img.luminance().into_iter().map(f64::from).collect();
    let narrow = blur(&luma, h, w, p.sigma);
    let wide = blur(&luma, h, w, p.sigma * p.k);
    let data = narrow
        .iter()
        .zip(&wide)
        .map(|(a, b)| {
            let d = a - p.tau * b;
            let v = if d >= p.epsilon {
                1.0
            } else {
                1.0 + (p.phi * (d - p.epsilon)).tanh()
            };
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    SketchImage::new(h, w, data).expect("xdog output is in range")
}

/// Reference frame plus four successors at intervals `s, 2s, 3s, 4s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSequence {
    pub shot: usize,
    pub stride: usize,
    pub reference: usize,
    pub successors: [usize; 4],
}

impl EvalSequence {
    pub fn intervals(&self) -> [usize; 4] {
        [self.stride, 2 * self.stride, 3 * self.stride, 4 * self.stride]
    }
}

/// Mean absolute RGB difference below which a successor counts as unchanged.
pub const UNCHANGED_THRESHOLD: f64 = 0.002;

/// Shot ids listed one per line; `#` starts a comment.
pub fn parse_exclusions(text: &str) -> Result<BTreeSet<usize>> {
    let mut out = BTreeSet::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let id = line
            .split_whitespace()
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Validation(format!("bad exclusion line {line:?}")))?;
        out.insert(id);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SequenceOptions {
    pub stride: usize,
    pub seed: u64,
    pub unchanged_threshold: f64,
    pub exclusions: BTreeSet<usize>,
}

impl SequenceOptions {
    pub fn new(stride: usize, seed: u64) -> Self {
        Self {
            stride,
            seed,
            unchanged_threshold: UNCHANGED_THRESHOLD,
            exclusions: BTreeSet::new(),
        }
    }
}

/// One randomly placed five-frame sequence per shot. Shots that are too
/// short or excluded are skipped; sequences with an unchanged successor are
/// dropped. `frame` loads a frame by absolute index.
pub fn build_eval_sequences(
    shots: &ShotIndex,
    opts: &SequenceOptions,
    mut frame: impl FnMut(usize) -> Result<ColorImage>,
) -> Result<Vec<EvalSequence>> {
    if !(1..=10).contains(&opts.stride) {
        return Err(Error::Validation(format!("stride {} outside 1..=10", opts.stride)));
    }
    let span = 4 * opts.stride;
    let mut out = Vec::new();
    for (id, shot) in shots.shots().iter().enumerate() {
        if opts.exclusions.contains(&id) || shot.len() <= span {
            continue;
        }
        // per-shot stream so one shot's outcome does not shift the others
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let reference = shot.start + rng.gen_range(0..shot.len() - span);
        let successors = [1, 2, 3, 4].map(|m| reference + m * opts.stride);
        let ref_img = frame(reference)?;
        let mut unchanged = false;
        for &s in &successors {
            if ref_img.mean_abs_diff(&frame(s)?)? < opts.unchanged_threshold {
                unchanged = true;
                break;
            }
        }
        if !unchanged {
            out.push(EvalSequence {
                shot: id,
                stride: opts.stride,
                reference,
                successors,
            });
        }
    }
    Ok(out)
}

/// Numbered PNG frames of one video directory, ordered by the digits in the
/// file stem (ties broken by name).
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            frames.push(path);
        }
    }
    let key = |p: &PathBuf| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let digits: String = stem.chars().filter(|c| c.is_ascii_digit()).collect();
        (digits.parse::<u64>().unwrap_or(u64::MAX), p.file_name().map(|n| n.to_owned()))
    };
    frames.sort_by_key(key);
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePairRecord {
    pub shot: usize,
    pub first: PathBuf,
    pub second: PathBuf,
    pub first_sketch: PathBuf,
    pub second_sketch: PathBuf,
    pub stride: usize,
    pub width: usize,
}

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_COLUMNS: &str = "shot\tfirst\tsecond\tfirst_sketch\tsecond_sketch\tstride\twidth";

/// Tab-separated manifest. Header lines start with `# key=value`; then the
/// column line [`MANIFEST_COLUMNS`] and one record per line. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub source: String,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub shot_threshold: f64,
    pub sketch: String,
    pub records: Vec<FramePairRecord>,
}

fn path_field(p: &Path) -> Result<String> {
    let s = p.to_string_lossy().replace('\\', "/");
    if s.contains('\t') || s.contains('\n') {
        return Err(Error::Validation(format!("path {s:?} contains a tab or newline")));
    }
    Ok(s)
}

impl DatasetManifest {
    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        let _ = writeln!(s, "# linecolor-manifest version={}", self.version);
        let _ = writeln!(s, "# source={}", self.source);
        let _ = writeln!(s, "# created={}", self.created);
        let _ = writeln!(s, "# shot_threshold={}", self.shot_threshold);
        let _ = writeln!(s, "# sketch={}", self.sketch);
        let _ = writeln!(s, "{MANIFEST_COLUMNS}");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.shot,
                path_field(&r.first)?,
                path_field(&r.second)?,
                path_field(&r.first_sketch)?,
                path_field(&r.second_sketch)?,
                r.stride,
                r.width
            );
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Validation(format!("manifest: {m}"));
        let mut m = DatasetManifest {
            version: 0,
            source: String::new(),
            created: 0,
            shot_threshold: 0.0,
            sketch: String::new(),
            records: Vec::new(),
        };
        let mut seen_columns = false;
        for line in text.lines() {
            if let Some(h) = line.strip_prefix("# ") {
                if let Some(v) = h.strip_prefix("linecolor-manifest version=") {
                    m.version = v.parse().map_err(|_| bad(format!("version {v:?}")))?;
                } else if let Some((k, v)) = h.split_once('=') {
                    match k {
                        "source" => m.source = v.to_string(),
                        "created" => m.created = v.parse().map_err(|_| bad(format!("created {v:?}")))?,
                        "shot_threshold" => {
                            m.shot_threshold = v.parse().map_err(|_| bad(format!("threshold {v:?}")))?
                        }
                        "sketch" => m.sketch = v.to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            if !seen_columns {
                if line != MANIFEST_COLUMNS {
                    return Err(bad(format!("unexpected column line {line:?}")));
                }
                seen_columns = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad(format!("record has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("number {s:?}")));
            m.records.push(FramePairRecord {
                shot: num(f[0])?,
                first: f[1].into(),
                second: f[2].into(),
                first_sketch: f[3].into(),
                second_sketch: f[4].into(),
                stride: num(f[5])?,
                width: num(f[6])?,
            });
        }
        if m.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported version {}", m.version)));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub stride: usize,
    pub width: usize,
    pub shot_threshold: f64,
    pub lineart: LineArtParams,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            stride: 5,
            width: 40,
            shot_threshold: DEFAULT_SHOT_THRESHOLD,
            lineart: LineArtParams::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.width == 0 {
            return Err(Error::Config("stride and width must be at least 1".into()));
        }
        if !(self.shot_threshold > 0.0) {
            return Err(Error::Config("shot threshold must be positive".into()));
        }
        Ok(())
    }
}

/// What [`build_dataset`] wrote.
#[derive(Debug, Clone)]
pub struct BuildSummary {
    pub frames: FrameList,
    pub shots: ShotIndex,
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SHOTS_FILE: &str = "shots.tsv";
pub const SKETCH_DIR: &str = "sketch";
pub const FRAMES_FILE: &str = "frames.tsv";
pub const SEQUENCES_FILE: &str = "sequences.tsv";

/// Color and sketch path of every frame, by index, relative to the dataset
/// directory.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameList {
    pub color: Vec<PathBuf>,
    pub sketch: Vec<PathBuf>,
}

impl FrameList {
    pub fn len(&self) -> usize {
        self.color.len()
    }

    pub fn is_empty(&self) -> bool {
        self.color.is_empty()
    }

    pub fn to_tsv(&self) -> Result<String> {
        let mut s = String::from("index\tcolor\tsketch\n");
        for (i, (c, k)) in self.color.iter().zip(&self.sketch).enumerate() {
            let _ = writeln!(s, "{i}\t{}\t{}", path_field(c)?, path_field(k)?);
        }
        Ok(s)
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (n, line) in text.lines().skip(1).filter(|l| !l.trim().is_empty()).enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(n) {
                return Err(Error::Validation(format!("bad frame line {line:?}")));
            }
            out.color.push(f[1].into());
            out.sketch.push(f[2].into());
        }
        Ok(out)
    }
}

pub fn sequences_to_tsv(seqs: &[EvalSequence]) -> String {
    let mut s = String::from("shot\tstride\treference\tframe1\tframe2\tframe3\tframe4\n");
    for q in seqs {
        let [a, b, c, d] = q.successors;
        let _ = writeln!(s, "{}\t{}\t{}\t{a}\t{b}\t{c}\t{d}", q.shot, q.stride, q.reference);
    }
    s
}

pub fn sequences_from_tsv(text: &str) -> Result<Vec<EvalSequence>> {
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<usize> = line
            .split('\t')
            .map(|v| v.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Validation(format!("bad sequence line {line:?}")))?;
        if f.len() != 7 {
            return Err(Error::Validation(format!("bad sequence line {line:?}")));
        }
        let seq = EvalSequence {
            shot: f[0],
            stride: f[1],
            reference: f[2],
            successors: [f[3], f[4], f[5], f[6]],
        };
        if seq.successors.map(|x| x.wrapping_sub(seq.reference)) != seq.intervals() {
            return Err(Error::Validation(format!("sequence intervals are not exact: {line:?}")));
        }
        out.push(seq);
    }
    Ok(out)
}

/// Creation time: `SOURCE_DATE_EPOCH` when set, else the newest frame mtime.
fn creation_time(frames: &[PathBuf]) -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
        return t;
    }
    frames
        .iter()
        .filter_map(|p| fs::metadata(p).ok()?.modified().ok())
        .filter_map(|t| t.duration_since(UNIX_EPOCH).ok())
        .map(|d| d.as_secs())
        .max()
        .unwrap_or(0)
}

/// Segments `frames_dir` into shots, writes a sketch per frame under
/// `out_dir/sketch/`, and writes `frames.tsv`, `shots.tsv` and
/// `manifest.tsv`.
pub fn build_dataset(frames_dir: &Path, out_dir: &Path, cfg: &DatasetConfig) -> Result<BuildSummary> {
    cfg.validate()?;
    let frames = list_frames(frames_dir)?;
    if frames.is_empty() {
        return Err(Error::Validation(format!("no frames found in {}", frames_dir.display())));
    }
    let sketch_dir = out_dir.join(SKETCH_DIR);
    fs::create_dir_all(&sketch_dir).map_err(|e| Error::io(&sketch_dir, e))?;
    let out_abs = out_dir.canonicalize().map_err(|e| Error::io(out_dir, e))?;

    let mut detector = ShotDetector::new(cfg.shot_threshold);
    let mut color_rel = Vec::with_capacity(frames.len());
    let mut sketch_rel = Vec::with_capacity(frames.len());
    for path in &frames {
        let img = ColorImage::load_png(path)?;
        detector.push(&img);
        let name = path.file_name().expect("listed files have names");
        synthesize_lineart(&img, &cfg.lineart).save_png(&sketch_dir.join(name))?;
        let abs = path.canonicalize().map_err(|e| Error::io(path, e))?;
        color_rel.push(pathdiff::diff_paths(&abs, &out_abs).unwrap_or(abs));
        sketch_rel.push(Path::new(SKETCH_DIR).join(name));
    }
    let shots = detector.finish()?;

    let mut records = Vec::new();
    for (id, shot) in shots.shots().iter().enumerate() {
        for (a, b) in extract_pairs(*shot, cfg.stride, cfg.width) {
            records.push(FramePairRecord {
                shot: id,
                first: color_rel[a].clone(),
                second: color_rel[b].clone(),
                first_sketch: sketch_rel[a].clone(),
                second_sketch: sketch_rel[b].clone(),
                stride: cfg.stride,
                width: cfg.width,
            });
        }
    }
    let source = frames_dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| frames_dir.display().to_string());
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        source,
        created: creation_time(&frames),
        shot_threshold: cfg.shot_threshold,
        sketch: cfg.lineart.describe(),
        records,
    };
    let list = FrameList {
        color: color_rel,
        sketch: sketch_rel,
    };
    let frames_path = out_dir.join(FRAMES_FILE);
    fs::write(&frames_path, list.to_tsv()?).map_err(|e| Error::io(&frames_path, e))?;
    let shots_path = out_dir.join(SHOTS_FILE);
    fs::write(&shots_path, shots.to_tsv()).map_err(|e| Error::io(&shots_path, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest.to_text()?).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(BuildSummary {
        frames: list,
        shots,
        manifest,
        manifest_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_frames_are_one_shot() {
        let f = ColorImage::filled(8, 8, [0.3, 0.5, 0.1]).unwrap();
        let frames = vec![f; 12];
        let shots = detect_shots(&frames, DEFAULT_SHOT_THRESHOLD).unwrap();
        assert_eq!(shots.shots(), &[Shot { start: 0, end: 12 }]);
    }

    #[test]
    fn black_then_white_is_two_shots() {
        let black = ColorImage::filled(8, 8, [0.0; 3]).unwrap();
        let white = ColorImage::filled(8, 8, [1.0; 3]).unwrap();
        let frames: Vec<_> = (0..10).map(|i| if i < 4 { black.clone() } else { white.clone() }).collect();
        let h = hsv_histogram(&black);
        assert_eq!(chi_square(&h, &hsv_histogram(&white)), 1.0);
        let shots = detect_shots(&frames, DEFAULT_SHOT_THRESHOLD).unwrap();
        assert_eq!(shots.shots(), &[Shot { start: 0, end: 4 }, Shot { start: 4, end: 10 }]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(detect_shots(&[], 0.5), Err(Error::Validation(_))));
    }

    #[test]
    fn default_window_pairs() {
        let shot = Shot { start: 0, end: 46 };
        assert_eq!(extract_pairs(shot, 5, 40), vec![(0, 40), (5, 45)]);
        assert!(extract_pairs(Shot { start: 0, end: 40 }, 5, 40).is_empty());
        assert_eq!(extract_pairs(Shot { start: 0, end: 41 }, 5, 40), vec![(0, 40)]);
        assert_eq!(extract_pairs(Shot { start: 100, end: 146 }, 5, 40), vec![(100, 140), (105, 145)]);
    }

    proptest! {
        #[test]
        fn pair_count_matches_enumeration(n in 0usize..400, stride in 1usize..20, width in 1usize..80, start in 0usize..1000) {
            let pairs = if n == 0 { vec![] } else { extract_pairs(Shot { start, end: start + n }, stride, width) };
            let expected = if n > width { (n - 1 - width) / stride + 1 } else { 0 };
            prop_assert_eq!(pairs.len(), expected);
            for (a, b) in pairs {
                prop_assert_eq!(b - a, width);
                prop_assert!(a >= start && b < start + n);
            }
        }
    }

    #[test]
    fn solid_color_gives_blank_sketch() {
        let img = ColorImage::filled(32, 32, [0.8, 0.2, 0.4]).unwrap();
        let s = synthesize_lineart(&img, &LineArtParams::default());
        let white = s.data().iter().filter(|&&v| v > 0.9).count();
        assert!(white as f64 >= 0.99 * s.data().len() as f64);
    }

    #[test]
    fn square_outline() {
        let img = ColorImage::from_fn(32, 32, |y, x| {
            if (8..24).contains(&y) && (8..24).contains(&x) { [0.0; 3] } else { [1.0; 3] }
        })
        .unwrap();
        let s = synthesize_lineart(&img, &LineArtParams::default());
        let at = |y: usize, x: usize| s.pixel(y, x)[0];
        // strokes along the boundary, white far inside and far outside
        assert!(at(8, 16) < 0.5 && at(16, 8) < 0.5 && at(23, 16) < 0.5, "{} {} {}", at(8, 16), at(16, 8), at(23, 16));
        assert!(at(16, 16) > 0.9 && at(2, 2) > 0.9 && at(29, 29) > 0.9);
        assert_eq!(s, synthesize_lineart(&img, &LineArtParams::default()));
    }

    #[test]
    fn static_shot_is_eliminated() {
        let f = ColorImage::filled(8, 8, [0.5; 3]).unwrap();
        let shots = ShotIndex::new(vec![Shot { start: 0, end: 30 }]).unwrap();
        let seqs = build_eval_sequences(&shots, &SequenceOptions::new(5, 1), |_| Ok(f.clone())).unwrap();
        assert!(seqs.is_empty());
    }

    #[test]
    fn sequence_intervals() {
        let shots = ShotIndex::new(vec![Shot { start: 0, end: 60 }, Shot { start: 60, end: 70 }]).unwrap();
        let frame = |i: usize| ColorImage::filled(4, 4, [(i % 60) as f32 / 60.0, 0.0, 0.0]);
        for (stride, iv) in [(5, [5, 10, 15, 20]), (10, [10, 20, 30, 40])] {
            let seqs = build_eval_sequences(&shots, &SequenceOptions::new(stride, 3), frame).unwrap();
            // the second shot is too short for a 4*stride span
            assert_eq!(seqs.len(), 1);
            let s = &seqs[0];
            assert_eq!(s.intervals(), iv);
            assert_eq!(s.successors.map(|f| f - s.reference), iv);
            assert!(s.successors[3] < 60);
        }
        let mut opts = SequenceOptions::new(5, 3);
        opts.exclusions = parse_exclusions("# manual\n0  # character enters\n").unwrap();
        assert!(build_eval_sequences(&shots, &opts, frame).unwrap().is_empty());
        assert!(build_eval_sequences(&shots, &SequenceOptions::new(11, 3), frame).is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = DatasetManifest {
            version: MANIFEST_VERSION,
            source: "clip".into(),
            created: 42,
            shot_threshold: 0.4,
            sketch: LineArtParams::default().describe(),
            records: vec![FramePairRecord {
                shot: 0,
                first: "../frames/0.png".into(),
                second: "../frames/40.png".into(),
                first_sketch: "sketch/0.png".into(),
                second_sketch: "sketch/40.png".into(),
                stride: 5,
                width: 40,
            }],
        };
        let text = m.to_text().unwrap();
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
        assert!(DatasetManifest::parse("shot\tfirst\n").is_err());
    }

    #[test]
    fn sequence_tsv_round_trip() {
        let seqs = vec![EvalSequence {
            shot: 2,
            stride: 5,
            reference: 10,
            successors: [15, 20, 25, 30],
        }];
        assert_eq!(sequences_from_tsv(&sequences_to_tsv(&seqs)).unwrap(), seqs);
        assert!(sequences_from_tsv("h\n0\t5\t10\t15\t20\t25\t31\n").is_err());
    }

    #[test]
    fn shot_tsv_round_trip() {
        let s = ShotIndex::new(vec![Shot { start: 0, end: 5 }, Shot { start: 5, end: 9 }]).unwrap();
        assert_eq!(ShotIndex::from_tsv(&s.to_tsv()).unwrap(), s);
        assert!(ShotIndex::new(vec![Shot { start: 0, end: 5 }, Shot { start: 4, end: 9 }]).is_err());
    }
}
