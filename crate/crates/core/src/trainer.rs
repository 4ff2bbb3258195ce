//! Optimization loop: Adam on `lambda1 * L1 + lambda2 * perceptual`, seeded
//! per-epoch sample order, JSON-lines log, periodic checkpoints and resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::datasmith::DatasetManifest;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{LossConfig, Objective};
use crate::raster::{batch_tensor, ColorImage, SketchImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Side length inputs are resized to.
    pub resolution: usize,
    pub seed: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Stops early after this many iterations in total.
    pub max_iterations: Option<usize>,
    pub loss: LossConfig,
    pub generator: GeneratorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            adam_epsilon: 1e-8,
            batch_size: 2,
            epochs: 40,
            resolution: 256,
            seed: 0,
            checkpoint_interval: 1000,
            max_iterations: None,
            loss: LossConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.learning_rate) || !positive(self.adam_epsilon) {
            return Err(Error::Config("learning rate and epsilon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if self.resolution == 0 || self.resolution % 8 != 0 {
            return Err(Error::Config(format!(
                "resolution {} is not a positive multiple of 8",
                self.resolution
            )));
        }
        self.loss.validate()?;
        self.generator.validate()
    }
}

/// One training example: reference sketch and color, target sketch and color.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub prev_sketch: SketchImage,
    pub prev_color: ColorImage,
    pub next_sketch: SketchImage,
    pub next_color: ColorImage,
}

impl TrainingPair {
    pub fn resized(&self, side: usize) -> Result<Self> {
        Ok(Self {
            prev_sketch: self.prev_sketch.resize(side, side)?,
            prev_color: self.prev_color.resize(side, side)?,
            next_sketch: self.next_sketch.resize(side, side)?,
            next_color: self.next_color.resize(side, side)?,
        })
    }
}

/// Random-access training examples.
pub trait PairSource {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<TrainingPair>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [TrainingPair] {
    fn len(&self) -> usize {
        <[TrainingPair]>::len(self)
    }

    fn load(&self, index: usize) -> Result<TrainingPair> {
        Ok(self[index].clone())
    }
}

impl PairSource for Vec<TrainingPair> {
    fn len(&self) -> usize {
        <[TrainingPair]>::len(self)
    }

    fn load(&self, index: usize) -> Result<TrainingPair> {
        Ok(self[index].clone())
    }
}

/// Pairs read from disk through a manifest; paths resolve against `root`.
pub struct ManifestSource {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl ManifestSource {
    pub fn new(manifest: DatasetManifest, root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            manifest,
        }
    }

    pub fn open(manifest_path: &Path) -> Result<Self> {
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(Self::new(DatasetManifest::load(manifest_path)?, root))
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }
}

impl PairSource for ManifestSource {
    fn len(&self) -> usize {
        self.manifest.records.len()
    }

    fn load(&self, index: usize) -> Result<TrainingPair> {
        let r = &self.manifest.records[index];
        Ok(TrainingPair {
            prev_sketch: SketchImage::load_png(&self.root.join(&r.first_sketch))?,
            prev_color: ColorImage::load_png(&self.root.join(&r.first))?,
            next_sketch: SketchImage::load_png(&self.root.join(&r.second_sketch))?,
            next_color: ColorImage::load_png(&self.root.join(&r.second))?,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub l1: f64,
    pub perceptual: f64,
    pub total: f64,
    pub wall_time: f64,
}

struct Adam {
    step: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    fn new(params: &[(String, Var)]) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { step: 0, m, v })
    }

    fn update(&mut self, cfg: &TrainConfig, params: &[(String, Var)], grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = self.m.get_mut(name).expect("state for every parameter");
            *m = ((&*m * cfg.beta1)? + (&g * (1.0 - cfg.beta1))?)?;
            let v = self.v.get_mut(name).expect("state for every parameter");
            *v = ((&*v * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?;
            let m_hat = (&*m / c1)?;
            let denom = ((&*v / c2)?.sqrt()? + cfg.adam_epsilon)?;
            let next = (var.as_tensor().detach() - (m_hat / denom)? * cfg.learning_rate)?;
            var.set(&next)?;
        }
        Ok(())
    }

    fn export(&self, out: &mut BTreeMap<String, Tensor>) {
        for (k, t) in &self.m {
            out.insert(format!("adam.m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v/{k}"), t.clone());
        }
    }

    fn import(&mut self, aux: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        for (prefix, state) in [("adam.m/", &mut self.m), ("adam.v/", &mut self.v)] {
            for (k, slot) in state.iter_mut() {
                let t = aux
                    .get(&format!("{prefix}{k}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {k} missing")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state for {k} has wrong shape")));
                }
                *slot = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    iteration: usize,
    adam_step: usize,
    train: TrainConfig,
}

/// Where a run writes its artifacts. All optional.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Log a progress line at info level every this many iterations.
    pub progress_every: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub history: Vec<IterationRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub iterations: usize,
}

pub struct Trainer {
    cfg: TrainConfig,
    generator: Generator,
    objective: Objective,
    params: Vec<(String, Var)>,
    adam: Adam,
    iteration: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut gcfg = cfg.generator.clone();
        gcfg.seed = cfg.seed;
        let generator = Generator::new(gcfg)?;
        Self::assemble(cfg, generator)
    }

    fn assemble(cfg: TrainConfig, generator: Generator) -> Result<Self> {
        let objective = Objective::new(cfg.loss.clone())?;
        let params: Vec<(String, Var)> = generator
            .parameters()
            .store()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let adam = Adam::new(&params)?;
        Ok(Self {
            cfg,
            generator,
            objective,
            params,
            adam,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// generator config stored in the checkpoint wins over `cfg.generator`.
    pub fn resume(mut cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let state: ResumeState = serde_json::from_value(ck.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint has no training state: {e}")))?;
        if cfg.generator.fingerprint() != ck.generator.fingerprint() {
            log::warn!("generator config differs from the checkpoint; using the checkpoint's");
        }
        cfg.generator = ck.generator.clone();
        cfg.validate()?;
        let generator = ck.to_generator()?;
        let mut t = Self::assemble(cfg, generator)?;
        t.adam.import(&ck.auxiliary, state.adam_step)?;
        t.iteration = state.iteration;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn into_generator(self) -> Generator {
        self.generator
    }

    /// Iterations completed so far, including those before a resume.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_generator(&self.generator)?;
        self.adam.export(&mut ck.auxiliary);
        ck.extra = serde_json::to_value(ResumeState {
            iteration: self.iteration,
            adam_step: self.adam.step,
            train: self.cfg.clone(),
        })?;
        Ok(ck)
    }

    /// Forward, loss, backward and one Adam update on `batch`.
    pub fn step(&mut self, batch: &[TrainingPair]) -> Result<(f64, f64, f64)> {
        if batch.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let dev = self.generator.device().clone();
        let ps: Vec<&SketchImage> = batch.iter().map(|p| &p.prev_sketch).collect();
        let pc: Vec<&ColorImage> = batch.iter().map(|p| &p.prev_color).collect();
        let ns: Vec<&SketchImage> = batch.iter().map(|p| &p.next_sketch).collect();
        let nc: Vec<&ColorImage> = batch.iter().map(|p| &p.next_color).collect();
        let out = self.generator.forward_tensors(
            &batch_tensor(&ps, &dev)?,
            &batch_tensor(&pc, &dev)?,
            &batch_tensor(&ns, &dev)?,
        )?;
        let terms = self.objective.terms(&batch_tensor(&nc, &dev)?, &out)?;
        let total = terms.total_value()?;
        let values = (terms.color_value()?, terms.perceptual_value()?, total);
        if !total.is_finite() {
            return Ok(values);
        }
        let grads = terms.total.backward()?;
        self.adam.update(&self.cfg, &self.params, &grads)?;
        Ok(values)
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// Sample indices of iteration `it`: a seeded shuffle per epoch, so the
    /// order depends only on (seed, iteration).
    fn batch_indices(&self, n: usize, it: usize) -> (usize, Vec<usize>) {
        let per_epoch = self.batches_per_epoch(n);
        let epoch = it / per_epoch;
        let slot = it % per_epoch;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ epoch as u64);
        order.shuffle(&mut rng);
        let lo = slot * self.cfg.batch_size;
        let hi = (lo + self.cfg.batch_size).min(n);
        (epoch, order[lo..hi].to_vec())
    }

    fn total_iterations(&self, n: usize) -> usize {
        let full = self.cfg.epochs * self.batches_per_epoch(n);
        self.cfg.max_iterations.map_or(full, |m| m.min(full))
    }

    /// Runs until the configured epochs (or `max_iterations`) are done.
    pub fn run(&mut self, source: &dyn PairSource, opts: &RunOptions) -> Result<TrainOutcome> {
        let n = source.len();
        if n == 0 {
            return Err(Error::Validation("training set is empty".into()));
        }
        let mut log = match &opts.log_path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(&*p, e))?;
                Some((p.clone(), BufWriter::new(f)))
            }
            None => None,
        };
        let side = self.cfg.resolution;
        let total_iters = self.total_iterations(n);
        let start = Instant::now();
        let mut history = Vec::new();
        let mut checkpoints = Vec::new();

        while self.iteration < total_iters {
            let (epoch, indices) = self.batch_indices(n, self.iteration);
            let mut batch = Vec::with_capacity(indices.len());
            for i in indices {
                match source.load(i).and_then(|p| p.resized(side)) {
                    Ok(p) => batch.push(p),
                    Err(e) => log::warn!("skipping sample {i}: {e}"),
                }
            }
            let it = self.iteration;
            self.iteration += 1;
            if batch.is_empty() {
                continue;
            }
            let (l1, perceptual, total) = self.step(&batch)?;
            if !total.is_finite() {
                let diag = match &opts.checkpoint_dir {
                    Some(dir) => {
                        let p = dir.join(format!("diverged-{it:07}.ckpt"));
                        self.checkpoint()?.save(&p)?;
                        Some(p)
                    }
                    None => None,
                };
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    checkpoint: diag,
                });
            }
            let rec = IterationRecord {
                iteration: it,
                epoch,
                l1,
                perceptual,
                total,
                wall_time: start.elapsed().as_secs_f64(),
            };
            if let Some((p, w)) = &mut log {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(&*p, e))?;
            }
            match opts.progress_every {
                Some(k) if k > 0 && self.iteration % k == 0 => log::info!(
                    "iteration {}/{total_iters} epoch {epoch}: l1 {l1:.5} perceptual {perceptual:.5} total {total:.5}",
                    self.iteration
                ),
                _ => log::debug!("iteration {it} epoch {epoch}: total {total:.5}"),
            }
            history.push(rec);

            let due = self.cfg.checkpoint_interval > 0 && self.iteration % self.cfg.checkpoint_interval == 0;
            if let (true, Some(dir)) = (due, &opts.checkpoint_dir) {
                let p = dir.join(format!("iter-{:07}.ckpt", self.iteration));
                self.checkpoint()?.save(&p)?;
                checkpoints.push(p);
            }
        }
        if let Some((p, w)) = &mut log {
            w.flush().map_err(|e| Error::io(&*p, e))?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            let p = dir.join("last.ckpt");
            self.checkpoint()?.save(&p)?;
            checkpoints.push(p);
        }
        Ok(TrainOutcome {
            history,
            checkpoints,
            iterations: self.iteration,
        })
    }
}

/// Trains a fresh generator on the pairs of a manifest file.
pub fn train(manifest_path: &Path, cfg: TrainConfig, opts: &RunOptions) -> Result<(Generator, TrainOutcome)> {
    let source = ManifestSource::open(manifest_path)?;
    let mut t = Trainer::new(cfg)?;
    let outcome = t.run(&source, opts)?;
    Ok((t.into_generator(), outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::ProviderSpec;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            resolution: 16,
            batch_size: 2,
            epochs: 2,
            learning_rate: 1e-3,
            checkpoint_interval: 0,
            loss: LossConfig {
                lambda_perceptual: 0.0,
                ..LossConfig::default()
            },
            generator: GeneratorConfig {
                encoder_widths: [4, 4, 8, 8],
                sketch_widths: [4, 4, 4, 4, 4, 4],
                ru_blocks: 1,
                cardinality: 2,
                pretrained_provider: ProviderSpec::Null,
                ..GeneratorConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn pairs(n: usize) -> Vec<TrainingPair> {
        (0..n)
            .map(|i| {
                let c = ColorImage::from_fn(16, 16, |y, x| [(x + i) as f32 / 32.0, y as f32 / 16.0, 0.5]).unwrap();
                let s = SketchImage::from_fn(16, 16, |y, x| [if (x + y + i) % 5 == 0 { 0.0 } else { 1.0 }]).unwrap();
                TrainingPair {
                    prev_sketch: s.clone(),
                    prev_color: c.clone(),
                    next_sketch: s,
                    next_color: c,
                }
            })
            .collect()
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.beta1, c.beta2), (1e-4, 0.5, 0.9));
        assert_eq!((c.batch_size, c.epochs, c.resolution), (2, 40, 256));
        c.validate().unwrap();
        let bad = TrainConfig { resolution: 100, ..TrainConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let t = Trainer::new(tiny_cfg()).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|it| t.batch_indices(5, it).1).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert_eq!(t.batch_indices(5, 3).0, 1);
        assert_eq!(t.total_iterations(5), 6);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let data = pairs(3);
        let run = || {
            let mut t = Trainer::new(tiny_cfg()).unwrap();
            t.run(&data, &RunOptions::default()).unwrap().history
        };
        let a: Vec<f64> = run().iter().map(|r| r.total).collect();
        let b: Vec<f64> = run().iter().map(|r| r.total).collect();
        assert_eq!(a.len(), 4);
        assert_eq!(a, b);
    }

    #[test]
    fn log_and_checkpoints_written() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(dir.path().join("ck")),
            log_path: Some(dir.path().join("train.jsonl")),
            progress_every: Some(1),
        };
        let cfg = TrainConfig { checkpoint_interval: 2, ..tiny_cfg() };
        let mut t = Trainer::new(cfg).unwrap();
        let out = t.run(&pairs(4), &opts).unwrap();
        assert_eq!(out.iterations, 4);
        assert_eq!(out.checkpoints.len(), 3);
        let log = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
        let recs: Vec<IterationRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs[3].iteration, 3);
        let ck = Checkpoint::load(&out.checkpoints[0]).unwrap();
        assert_eq!(Trainer::resume(tiny_cfg(), &ck).unwrap().iteration(), 2);
    }

    struct Flaky(Vec<TrainingPair>);

    impl PairSource for Flaky {
        fn len(&self) -> usize {
            self.0.len()
        }

        fn load(&self, i: usize) -> Result<TrainingPair> {
            if i == 0 {
                Err(Error::Validation("unreadable".into()))
            } else {
                Ok(self.0[i].clone())
            }
        }
    }

    #[test]
    fn unreadable_samples_are_skipped() {
        let mut t = Trainer::new(tiny_cfg()).unwrap();
        let out = t.run(&Flaky(pairs(2)), &RunOptions::default()).unwrap();
        assert_eq!(out.iterations, 2);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { learning_rate: 1e30, ..tiny_cfg() };
        let mut t = Trainer::new(cfg).unwrap();
        let opts = RunOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..RunOptions::default()
        };
        match t.run(&pairs(2), &opts) {
            Err(Error::NonFiniteLoss { checkpoint: Some(p), .. }) => assert!(p.exists()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
