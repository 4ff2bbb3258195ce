//! Image metrics, the fixed-reference sequence protocol, report tables and
//! the per-frame timing benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasmith::EvalSequence;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::raster::{ColorImage, SketchImage};

/// Table value used in place of an infinite PSNR.
pub const PSNR_CAP: f64 = 99.0;

fn check_shapes(a: &ColorImage, b: &ColorImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Validation(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// PSNR in dB on the 0-255 scale over all RGB samples. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = 255.0 * (*x as f64 - *y as f64);
            d * d
        })
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable filtering over valid positions only.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 255, averaged over the three channels.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Validation(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = ssim_window();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let chan = |img: &ColorImage| -> Vec<f64> { img.data().iter().skip(c).step_by(3).map(|v| *v as f64 * 255.0).collect() };
        let (x, y) = (chan(a), chan(b));
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
        let (mx, ..) = filter_valid(&x, h, w, &k);
        let (my, ..) = filter_valid(&y, h, w, &k);
        let (sxx, ..) = filter_valid(&prod(&x, &x), h, w, &k);
        let (syy, ..) = filter_valid(&prod(&y, &y), h, w, &k);
        let (sxy, ..) = filter_valid(&prod(&x, &y), h, w, &k);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / 3.0)
}

/// Everything a colorizer may look at for one prediction. `target` is the
/// ground truth, present so that oracles can be evaluated; real models must
/// not read it.
#[derive(Debug, Clone, Copy)]
pub struct EvalCase<'a> {
    pub prev_sketch: &'a SketchImage,
    pub prev_color: &'a ColorImage,
    pub next_sketch: &'a SketchImage,
    pub target: &'a ColorImage,
}

pub trait Colorizer {
    fn label(&self) -> &str;
    fn colorize(&self, case: &EvalCase<'_>) -> Result<ColorImage>;
}

/// Returns the ground truth; a ceiling for metrics and a floor for timing.
pub struct IdentityOracle;

impl Colorizer for IdentityOracle {
    fn label(&self) -> &str {
        "identity"
    }

    fn colorize(&self, case: &EvalCase<'_>) -> Result<ColorImage> {
        Ok(case.target.clone())
    }
}

pub struct GeneratorColorizer<'g> {
    pub label: String,
    pub generator: &'g Generator,
}

impl Colorizer for GeneratorColorizer<'_> {
    fn label(&self) -> &str {
        &self.label
    }

    fn colorize(&self, case: &EvalCase<'_>) -> Result<ColorImage> {
        self.generator.forward(case.prev_sketch, case.prev_color, case.next_sketch)
    }
}

/// Frames of one sequence: reference first, then the four successors.
#[derive(Debug, Clone)]
pub struct SequenceFrames {
    pub sequence: EvalSequence,
    pub sketches: [SketchImage; 5],
    pub colors: [ColorImage; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub stride: usize,
    /// Position of the predicted frame after the reference, 1..=4.
    pub frame: usize,
    pub iv: usize,
    /// Mean PSNR; infinite when every frame matched exactly.
    pub psnr: f64,
    pub ssim: f64,
    pub n: usize,
}

impl ReportRow {
    pub fn psnr_capped(&self) -> (f64, bool) {
        if self.psnr.is_finite() {
            (self.psnr, false)
        } else {
            (PSNR_CAP, true)
        }
    }

    /// `"30.24/0.9790"`; a capped PSNR is marked with `*`.
    pub fn cell(&self) -> String {
        let (p, capped) = self.psnr_capped();
        format!("{p:.2}{}/{:.4}", if capped { "*" } else { "" }, self.ssim)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub dataset: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str = "method,stride,frame,iv,psnr,ssim,n";

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
    }

    /// One row per (method, stride, frame). Infinite PSNR is written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let method = if r.method.contains([',', '"', '\n']) {
                format!("\"{}\"", r.method.replace('"', "\"\""))
            } else {
                r.method.clone()
            };
            let p = if r.psnr.is_finite() { format!("{:.4}", r.psnr) } else { "inf".into() };
            let _ = writeln!(s, "{method},{},{},{},{p},{:.6},{}", r.stride, r.frame, r.iv, r.ssim, r.n);
        }
        s
    }

    /// One table per stride, laid out as
    /// `Method | frame1(iv:s) | ... | frame4(iv:4s)` with `PSNR/SSIM` cells.
    pub fn to_table(&self) -> String {
        let mut strides: Vec<usize> = self.rows.iter().map(|r| r.stride).collect();
        strides.sort_unstable();
        strides.dedup();
        let mut s = String::new();
        let mut any_capped = false;
        for stride in strides {
            let _ = writeln!(s, "stride {stride}");
            let mut header = vec!["Method".to_string()];
            header.extend((1..=4).map(|f| format!("frame{f}(iv:{})", f * stride)));
            let mut lines = vec![header];
            let mut methods: Vec<&str> = Vec::new();
            for r in self.rows.iter().filter(|r| r.stride == stride) {
                if !methods.contains(&r.method.as_str()) {
                    methods.push(&r.method);
                }
            }
            for m in methods {
                let mut line = vec![m.to_string()];
                for f in 1..=4 {
                    let cell = self
                        .rows
                        .iter()
                        .find(|r| r.stride == stride && r.method == m && r.frame == f)
                        .map(|r| {
                            any_capped |= !r.psnr.is_finite();
                            r.cell()
                        })
                        .unwrap_or_else(|| "-".into());
                    line.push(cell);
                }
                lines.push(line);
            }
            let widths: Vec<usize> = (0..5).map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0)).collect();
            for l in &lines {
                let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
                let _ = writeln!(s, "| {} |", cells.join(" | "));
            }
            s.push('\n');
        }
        if any_capped {
            let _ = writeln!(s, "* identical images; PSNR capped at {PSNR_CAP:.1} dB");
        }
        s
    }
}

/// Predicts every successor of every sequence from the sequence's first frame
/// and averages PSNR/SSIM per (stride, position). With `chain`, each
/// prediction becomes the reference for the next position instead.
pub fn evaluate(model: &dyn Colorizer, sequences: &[SequenceFrames], chain: bool) -> Result<EvalReport> {
    // (stride, frame) -> (psnr values, ssim sum)
    let mut acc: BTreeMap<(usize, usize), (Vec<f64>, f64)> = BTreeMap::new();
    for seq in sequences {
        let mut ref_sketch = seq.sketches[0].clone();
        let mut ref_color = seq.colors[0].clone();
        for pos in 1..=4 {
            let case = EvalCase {
                prev_sketch: &ref_sketch,
                prev_color: &ref_color,
                next_sketch: &seq.sketches[pos],
                target: &seq.colors[pos],
            };
            let pred = model.colorize(&case)?;
            let p = psnr(&pred, &seq.colors[pos])?;
            let q = ssim(&pred, &seq.colors[pos])?;
            let slot = acc.entry((seq.sequence.stride, pos)).or_default();
            slot.0.push(p);
            slot.1 += q;
            if chain {
                ref_sketch = seq.sketches[pos].clone();
                ref_color = pred;
            }
        }
    }
    let rows = acc
        .into_iter()
        .map(|((stride, frame), (ps, ssum))| {
            let n = ps.len();
            ReportRow {
                method: model.label().to_string(),
                stride,
                frame,
                iv: stride * frame,
                psnr: ps.iter().sum::<f64>() / n as f64,
                ssim: ssum / n as f64,
                n,
            }
        })
        .collect();
    Ok(EvalReport {
        meta: ReportMeta::default(),
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub method: String,
    pub seconds_per_frame: f64,
    pub samples: Vec<f64>,
    pub hardware: String,
}

impl TimingReport {
    /// `(max - min) / median` of the per-repeat samples.
    pub fn spread(&self) -> f64 {
        let lo = self.samples.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / self.seconds_per_frame
    }
}

pub fn hardware_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpu}; {threads} threads; {} {}", std::env::consts::OS, std::env::consts::ARCH)
}

/// Median seconds per frame over `repeats` passes through `cases`, after
/// `warmup` untimed passes.
pub fn benchmark_time(model: &dyn Colorizer, cases: &[EvalCase<'_>], warmup: usize, repeats: usize) -> Result<TimingReport> {
    if repeats < 3 {
        return Err(Error::Validation(format!("need at least 3 repeats, got {repeats}")));
    }
    if cases.is_empty() {
        return Err(Error::Validation("no frames to time".into()));
    }
    for _ in 0..warmup {
        for c in cases {
            model.colorize(c)?;
        }
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for c in cases {
            std::hint::black_box(model.colorize(c)?);
        }
        samples.push(start.elapsed().as_secs_f64() / cases.len() as f64);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if repeats % 2 == 1 {
        sorted[repeats / 2]
    } else {
        0.5 * (sorted[repeats / 2 - 1] + sorted[repeats / 2])
    };
    Ok(TimingReport {
        method: model.label().to_string(),
        seconds_per_frame: median,
        samples,
        hardware: hardware_descriptor(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_card(h: usize, w: usize) -> ColorImage {
        ColorImage::from_fn(h, w, |y, x| {
            let a = 0.25 + 0.5 * ((x / 4 + y / 4) % 2) as f32;
            [a, 0.25 + 0.5 * x as f32 / w as f32, 0.25 + 0.5 * y as f32 / h as f32]
        })
        .unwrap()
    }

    fn noisy(img: &ColorImage, sigma: f32, seed: u64) -> ColorImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = img
            .data()
            .iter()
            .map(|v| {
                let u: f32 = rng.gen_range(-1.0..1.0);
                (v + u * sigma * 3f32.sqrt() / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        ColorImage::new(img.height(), img.width(), data).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = ColorImage::filled(8, 8, [0.0; 3]).unwrap();
        let b = ColorImage::filled(8, 8, [1.0; 3]).unwrap();
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let card = test_card(32, 32);
        let p5 = psnr(&card, &noisy(&card, 5.0, 1)).unwrap();
        let p1 = psnr(&card, &noisy(&card, 1.0, 1)).unwrap();
        assert!(p5 < p1, "{p5} {p1}");
        assert!(psnr(&a, &ColorImage::filled(8, 9, [0.0; 3]).unwrap()).is_err());
    }

    #[test]
    fn ssim_cases() {
        let card = test_card(32, 32);
        assert!((ssim(&card, &card).unwrap() - 1.0).abs() <= 1e-9);
        let other = noisy(&card, 20.0, 4);
        let ab = ssim(&card, &other).unwrap();
        assert_eq!(ab, ssim(&other, &card).unwrap());
        assert!(ab < 1.0);
        let inverted = ColorImage::new(32, 32, card.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&card, &inverted).unwrap() < 0.5);
        let small = ColorImage::filled(10, 32, [0.5; 3]).unwrap();
        assert!(matches!(ssim(&small, &small), Err(Error::Validation(_))));
    }

    #[test]
    fn cell_format() {
        let row = ReportRow {
            method: "LCMFTN".into(),
            stride: 1,
            frame: 1,
            iv: 1,
            psnr: 30.24,
            ssim: 0.979,
            n: 1,
        };
        assert_eq!(row.cell(), "30.24/0.9790");
        let capped = ReportRow { psnr: f64::INFINITY, ssim: 1.0, ..row };
        assert_eq!(capped.cell(), "99.00*/1.0000");
    }

    fn sequence(stride: usize) -> SequenceFrames {
        let colors = [0, 1, 2, 3, 4].map(|i| {
            ColorImage::from_fn(16, 16, |y, x| [((x + i) % 16) as f32 / 16.0, y as f32 / 16.0, 0.3]).unwrap()
        });
        let sketches = [0, 1, 2, 3, 4].map(|i| SketchImage::from_fn(16, 16, |_, x| [if (x + i) % 4 == 0 { 0.0 } else { 1.0 }]).unwrap());
        SequenceFrames {
            sequence: EvalSequence {
                shot: 0,
                stride,
                reference: 0,
                successors: [1, 2, 3, 4].map(|m| m * stride),
            },
            sketches,
            colors,
        }
    }

    #[test]
    fn identity_oracle_report() {
        let seqs: Vec<_> = [1, 5, 10].into_iter().map(sequence).collect();
        let r = evaluate(&IdentityOracle, &seqs, false).unwrap();
        assert_eq!(r.rows.len(), 12);
        for row in &r.rows {
            assert_eq!(row.iv, row.stride * row.frame);
            assert_eq!(row.psnr, f64::INFINITY);
            assert!((row.ssim - 1.0).abs() < 1e-9);
        }
        let csv = r.to_csv();
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().nth(1).unwrap(), "identity,1,1,1,inf,1.000000,1");
        let table = r.to_table();
        assert!(table.contains("frame4(iv:40)"), "{table}");
        assert!(table.contains("99.00*/1.0000"));
    }

    /// Brightens the reference, so chained predictions drift.
    struct Reference;

    impl Colorizer for Reference {
        fn label(&self) -> &str {
            "brighten"
        }

        fn colorize(&self, case: &EvalCase<'_>) -> Result<ColorImage> {
            let c = case.prev_color;
            ColorImage::new(c.height(), c.width(), c.data().iter().map(|v| (v + 0.05).min(1.0)).collect())
        }
    }

    #[test]
    fn chaining_changes_the_reference() {
        let seqs = vec![sequence(1)];
        let fixed = evaluate(&Reference, &seqs, false).unwrap();
        let chained = evaluate(&Reference, &seqs, true).unwrap();
        assert!(fixed.rows[3].psnr < fixed.rows[0].psnr);
        assert_eq!(fixed.rows[0], chained.rows[0]);
        assert_ne!(fixed.rows[3], chained.rows[3]);
    }

    #[test]
    fn benchmark_requires_three_repeats() {
        let s = sequence(1);
        let case = EvalCase {
            prev_sketch: &s.sketches[0],
            prev_color: &s.colors[0],
            next_sketch: &s.sketches[1],
            target: &s.colors[1],
        };
        assert!(benchmark_time(&IdentityOracle, &[case], 0, 2).is_err());
        let t = benchmark_time(&IdentityOracle, &[case], 1, 3).unwrap();
        assert_eq!(t.samples.len(), 3);
        assert!(t.seconds_per_frame < 0.01);
        assert!(!t.hardware.is_empty());
    }
}
