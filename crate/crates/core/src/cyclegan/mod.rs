//! Unpaired two-domain translation: two generators, two least-squares
//! critics, adversarial plus cycle-consistency training.

mod losses;
mod nets;

pub use losses::{adversarial_losses, critic_loss, cycle_loss, fooling_loss, l1, AdversarialLosses, Net};
pub use nets::{from_batch, to_batch, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{decode_params, encode_params, Adam, Array, Graph, Params, Var};
use crate::error::{Error, Result};
use crate::metrics::{ssim_map, SsimParams};
use crate::volume::{embed_slice, extract_slice, Slice2D, Volume};

pub const LOSS_CSV_HEADER: &str = "step,lr,d_a_loss,d_b_loss,g_adv_loss,cycle_loss,total";
const CHECKPOINT_FORMAT: &str = "dmrimap-cyclegan";
const PARAMS_FILE: &str = "params.bin";
const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Default 2: 400 steps on a 200-image set, enough for the toy task.
    pub epochs: usize,
    /// Weight of the cycle term in the generator objective.
    pub cycle_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    /// Size of the buffer of past translations shown to the critics; 0 disables it.
    pub image_pool: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            epochs: 2,
            cycle_weight: 10.0,
            batch_size: 1,
            seed: 0,
            beta1: 0.5,
            beta2: 0.999,
            image_pool: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.cycle_weight >= 0.0
            && self.epochs > 0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    pub fn steps_per_epoch(&self, n_a: usize, n_b: usize) -> usize {
        n_a.max(n_b).div_ceil(self.batch_size)
    }
}

/// Constant `lr0` for the first half of `total` steps, then linear to 0.
pub fn learning_rate(lr0: f64, step: usize, total: usize) -> f64 {
    let half = total as f64 / 2.0;
    let s = step as f64;
    if s <= half {
        lr0
    } else if s >= total as f64 {
        0.0
    } else {
        lr0 * (total as f64 - s) / (total as f64 - half)
    }
}

/// Losses of one optimisation step. `cycle_loss` is unweighted; `total` is
/// `d_a_loss + d_b_loss + g_adv_loss + cycle_weight * cycle_loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub lr: f64,
    pub d_a_loss: f64,
    pub d_b_loss: f64,
    pub g_adv_loss: f64,
    pub cycle_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.d_a_loss, self.d_b_loss, self.g_adv_loss, self.cycle_loss, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            self.step, self.lr, self.d_a_loss, self.d_b_loss, self.g_adv_loss, self.cycle_loss, self.total
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub step: usize,
}

/// Both translation directions and both critics.
#[derive(Debug, Clone)]
pub struct CycleGan {
    pub g_a2b: Generator,
    pub g_b2a: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
    pub seed: u64,
    pub step: usize,
}

impl CycleGan {
    pub fn new(gen: GeneratorConfig, disc: DiscriminatorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            g_a2b: Generator::new(gen, "g_a2b", &mut rng)?,
            g_b2a: Generator::new(gen, "g_b2a", &mut rng)?,
            d_a: Discriminator::new(disc, gen.image_channels, "d_a", &mut rng)?,
            d_b: Discriminator::new(disc, gen.image_channels, "d_b", &mut rng)?,
            seed,
            step: 0,
        })
    }

    fn stores(&self) -> [&Params; 4] {
        [
            self.g_a2b.params(),
            self.g_b2a.params(),
            self.d_a.params(),
            self.d_b.params(),
        ]
    }

    fn merged(&self) -> Result<Params> {
        let mut all = Params::new();
        for store in self.stores() {
            for (name, value) in store.iter() {
                all.add(name, value.clone())?;
            }
        }
        Ok(all)
    }

    /// Writes `params.bin` and `checkpoint.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, train: Option<&TrainConfig>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let bin = dir.join(PARAMS_FILE);
        std::fs::write(&bin, encode_params(&self.merged()?)).map_err(|e| Error::io(&bin, e))?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            generator: *self.g_a2b.config(),
            discriminator: *self.d_a.config(),
            train: train.copied(),
            seed: self.seed,
            step: self.step,
        };
        let mp = dir.join(MANIFEST_FILE);
        std::fs::write(&mp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, CheckpointManifest)> {
        let dir = dir.as_ref();
        let mp = dir.join(MANIFEST_FILE);
        let text = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let bin = dir.join(PARAMS_FILE);
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let arrays = decode_params(&bytes)?;
        let mut model = Self::new(manifest.generator, manifest.discriminator, manifest.seed)?;
        model.step = manifest.step;
        let mut groups: [Vec<(String, Array)>; 4] = Default::default();
        for (name, a) in arrays {
            let k = ["g_a2b.", "g_b2a.", "d_a.", "d_b."]
                .iter()
                .position(|p| name.starts_with(p))
                .ok_or_else(|| Error::Checkpoint(format!("parameter {name:?} belongs to no network")))?;
            groups[k].push((name, a));
        }
        let [ga, gb, da, db] = groups;
        model.g_a2b.params_mut().assign(&ga)?;
        model.g_b2a.params_mut().assign(&gb)?;
        model.d_a.params_mut().assign(&da)?;
        model.d_b.params_mut().assign(&db)?;
        Ok((model, manifest))
    }

    /// Losses of the current networks on one pair of batches, without updates.
    pub fn evaluate_losses(&self, a: &[Slice2D], b: &[Slice2D], cycle_weight: f64) -> Result<LossReport> {
        let mut g = Graph::new();
        let va = g.constant(to_batch(a)?);
        let vb = g.constant(to_batch(b)?);
        let (ga, gb) = (
            |g: &mut Graph, x: Var| self.g_a2b.forward(g, x),
            |g: &mut Graph, x: Var| self.g_b2a.forward(g, x),
        );
        let (da, db) = (
            |g: &mut Graph, x: Var| self.d_a.forward(g, x),
            |g: &mut Graph, x: Var| self.d_b.forward(g, x),
        );
        let adv = adversarial_losses(&mut g, &da, &db, &ga, &gb, va, vb)?;
        let cyc = cycle_loss(&mut g, &ga, &gb, va, vb)?;
        let (d_a, d_b, g_adv, c) = (
            g.value(adv.d_a).item(),
            g.value(adv.d_b).item(),
            g.value(adv.g_adv).item(),
            g.value(cyc).item(),
        );
        Ok(LossReport {
            step: self.step,
            lr: 0.0,
            d_a_loss: d_a,
            d_b_loss: d_b,
            g_adv_loss: g_adv,
            cycle_loss: c,
            total: d_a + d_b + g_adv + cycle_weight * c,
        })
    }

    /// One Adam step of both critics on real batches and given translations.
    /// Returns `(d_a_loss, d_b_loss)`. Generator weights are not touched.
    pub fn critic_step(
        &mut self,
        real_a: &Array,
        real_b: &Array,
        fake_a: &Array,
        fake_b: &Array,
        adam: &Adam,
    ) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let (ra, rb) = (g.constant(real_a.clone()), g.constant(real_b.clone()));
        let (fa, fb) = (g.constant(fake_a.clone()), g.constant(fake_b.clone()));
        let da = |g: &mut Graph, x: Var| self.d_a.forward(g, x);
        let db = |g: &mut Graph, x: Var| self.d_b.forward(g, x);
        let la = critic_loss(&mut g, &da, ra, fa)?;
        let lb = critic_loss(&mut g, &db, rb, fb)?;
        let sum = g.add(la, lb)?;
        let losses = (g.value(la).item(), g.value(lb).item());
        g.backward(sum)?;
        g.export_grads(self.d_a.params_mut());
        g.export_grads(self.d_b.params_mut());
        self.d_a.params_mut().adam_step(adam)?;
        self.d_b.params_mut().adam_step(adam)?;
        Ok(losses)
    }

    /// Builds `g_adv + cycle_weight * cycle` on translations already in `g`.
    /// Returns the objective and the unweighted terms.
    fn generator_objective(
        &self,
        g: &mut Graph,
        a: Var,
        b: Var,
        fake_a: Var,
        fake_b: Var,
        cycle_weight: f64,
    ) -> Result<(Var, f64, f64)> {
        let da = |g: &mut Graph, x: Var| self.d_a.forward(g, x);
        let db = |g: &mut Graph, x: Var| self.d_b.forward(g, x);
        let adv_b = fooling_loss(g, &db, fake_b)?;
        let adv_a = fooling_loss(g, &da, fake_a)?;
        let adv = g.add(adv_b, adv_a)?;
        let rec_a = self.g_b2a.forward(g, fake_b)?;
        let rec_b = self.g_a2b.forward(g, fake_a)?;
        let ca = l1(g, rec_a, a)?;
        let cb = l1(g, rec_b, b)?;
        let cyc = g.add(ca, cb)?;
        let weighted = g.scale(cyc, cycle_weight);
        let total = g.add(adv, weighted)?;
        Ok((total, g.value(adv).item(), g.value(cyc).item()))
    }

    fn step_generators(&mut self, g: &mut Graph, objective: Var, adam: &Adam) -> Result<()> {
        g.backward(objective)?;
        g.export_grads(self.g_a2b.params_mut());
        g.export_grads(self.g_b2a.params_mut());
        self.g_a2b.params_mut().adam_step(adam)?;
        self.g_b2a.params_mut().adam_step(adam)
    }

    /// One Adam step of both generators on `g_adv + cycle_weight * cycle`.
    /// Returns `(g_adv_loss, cycle_loss)`. Critic weights are not touched.
    pub fn generator_step(&mut self, a: &Array, b: &Array, cycle_weight: f64, adam: &Adam) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let fake_b = self.g_a2b.forward(&mut g, va)?;
        let fake_a = self.g_b2a.forward(&mut g, vb)?;
        let (obj, adv, cyc) = self.generator_objective(&mut g, va, vb, fake_a, fake_b, cycle_weight)?;
        self.step_generators(&mut g, obj, adam)?;
        Ok((adv, cyc))
    }

    /// One critic update followed by one generator update against the
    /// updated critics. The translations are computed once and shared.
    pub fn train_step(
        &mut self,
        a: &Array,
        b: &Array,
        cfg: &TrainConfig,
        lr: f64,
        pool: &mut ImagePool,
    ) -> Result<LossReport> {
        let adam = Adam {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
        };
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let fake_b = self.g_a2b.forward(&mut g, va)?;
        let fake_a = self.g_b2a.forward(&mut g, vb)?;
        let shown_a = pool.a.offer(g.value(fake_a));
        let shown_b = pool.b.offer(g.value(fake_b));
        let (d_a_loss, d_b_loss) = self.critic_step(a, b, &shown_a, &shown_b, &adam)?;
        // critic weights are bound into `g` only now, after their update
        let (obj, g_adv_loss, cycle) = self.generator_objective(&mut g, va, vb, fake_a, fake_b, cfg.cycle_weight)?;
        self.step_generators(&mut g, obj, &adam)?;
        let report = LossReport {
            step: self.step,
            lr,
            d_a_loss,
            d_b_loss,
            g_adv_loss,
            cycle_loss: cycle,
            total: d_a_loss + d_b_loss + g_adv_loss + cfg.cycle_weight * cycle,
        };
        self.step += 1;
        Ok(report)
    }
}

/// Buffer of earlier translations; with capacity 0 it passes batches through.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    capacity: usize,
    images: Vec<Array>,
    rng: ChaCha8Rng,
}

impl HistoryBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            images: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Returns the batch to show the critic: the new one, or with
    /// probability one half a stored one that the new batch replaces.
    pub fn offer(&mut self, fresh: &Array) -> Array {
        if self.capacity == 0 {
            return fresh.clone();
        }
        if self.images.len() < self.capacity {
            self.images.push(fresh.clone());
            return fresh.clone();
        }
        if self.rng.gen_bool(0.5) {
            let k = self.rng.gen_range(0..self.images.len());
            let old = std::mem::replace(&mut self.images[k], fresh.clone());
            if old.shape() == fresh.shape() {
                return old;
            }
        }
        fresh.clone()
    }
}

#[derive(Debug, Clone)]
pub struct ImagePool {
    pub a: HistoryBuffer,
    pub b: HistoryBuffer,
}

impl ImagePool {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            a: HistoryBuffer::new(capacity, seed ^ 0xa),
            b: HistoryBuffer::new(capacity, seed ^ 0xb),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CycleGan,
    pub reports: Vec<LossReport>,
}

fn check_set(name: &str, set: &[Slice2D]) -> Result<[usize; 2]> {
    let first = set
        .first()
        .ok_or_else(|| Error::Config(format!("training set {name} is empty")))?;
    for s in set {
        if s.dims() != first.dims() {
            return Err(Error::dims(first.dims(), s.dims()));
        }
    }
    Ok(first.dims())
}

fn write_csv(path: &Path, reports: &[LossReport]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(LOSS_CSV_HEADER);
    text.push('\n');
    for r in reports {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Alternating critic / generator training on unpaired sets.
///
/// With `out_dir`, `loss.csv` and `checkpoint/` are rewritten after every
/// epoch. A non-finite loss stops training with a `diagnostic.json` dump.
pub fn train(
    data_a: &[Slice2D],
    data_b: &[Slice2D],
    gen: GeneratorConfig,
    disc: DiscriminatorConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let da = check_set("A", data_a)?;
    let db = check_set("B", data_b)?;
    if da != db {
        return Err(Error::dims(da, db));
    }
    let mut model = CycleGan::new(gen, disc, cfg.seed)?;
    let mut probe = Graph::new();
    let x = probe.constant(to_batch(&data_a[..1])?);
    model.g_a2b.check_input(probe.shape(x))?;
    if disc.output_side(da[0]) == 0 || disc.output_side(da[1]) == 0 {
        return Err(Error::Config(format!(
            "{}x{} images are too small for {} critic layers",
            da[0], da[1], disc.n_convs
        )));
    }
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let per_epoch = cfg.steps_per_epoch(data_a.len(), data_b.len());
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut pool = ImagePool::new(cfg.image_pool, cfg.seed);
    let mut reports = Vec::with_capacity(total);
    let mut order_a: Vec<usize> = (0..data_a.len()).collect();
    let mut order_b: Vec<usize> = (0..data_b.len()).collect();
    for epoch in 0..cfg.epochs {
        order_a.shuffle(&mut rng);
        order_b.shuffle(&mut rng);
        for k in 0..per_epoch {
            let pick = |order: &[usize], data: &[Slice2D]| -> Vec<Slice2D> {
                (0..cfg.batch_size)
                    .map(|j| data[order[(k * cfg.batch_size + j) % order.len()]].clone())
                    .collect()
            };
            let a = to_batch(&pick(&order_a, data_a))?;
            let b = to_batch(&pick(&order_b, data_b))?;
            let lr = learning_rate(cfg.lr, model.step, total);
            let report = model.train_step(&a, &b, cfg, lr, &mut pool)?;
            if !report.is_finite() {
                if let Some(d) = out_dir {
                    let p = d.join("diagnostic.json");
                    let dump = serde_json::json!({ "epoch": epoch, "report": report, "recent": &reports[reports.len().saturating_sub(20)..] });
                    std::fs::write(&p, serde_json::to_vec_pretty(&dump)?).map_err(|e| Error::io(&p, e))?;
                }
                return Err(Error::NonFinite(format!(
                    "loss at step {}: {}",
                    report.step,
                    report.csv_row()
                )));
            }
            reports.push(report);
        }
        let last = reports.last().expect("at least one step");
        log::info!(
            "epoch {}/{}: d_a {:.4} d_b {:.4} g_adv {:.4} cycle {:.4}",
            epoch + 1,
            cfg.epochs,
            last.d_a_loss,
            last.d_b_loss,
            last.g_adv_loss,
            last.cycle_loss
        );
        if let Some(d) = out_dir {
            write_csv(&d.join("loss.csv"), &reports)?;
            model.save(d.join("checkpoint"), Some(cfg))?;
        }
    }
    Ok(TrainOutcome { model, reports })
}

/// Mean of a window at each end of a series, for noisy per-step losses.
pub fn windowed_ends(values: &[f64], window: usize) -> (f64, f64) {
    let w = window.clamp(1, values.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (mean(&values[..w.min(values.len())]), mean(&values[values.len().saturating_sub(w)..]))
}

/// MSSIM of each translated image against its known partner. Images are
/// compared with a fixed dynamic range of 1.
pub fn paired_mssim(gen: &Generator, pairs: &[(Slice2D, Slice2D)]) -> Result<Vec<f64>> {
    let p = SsimParams::default().with_range(1.0);
    pairs
        .iter()
        .map(|(a, b)| Ok(ssim_map(&gen.translate(a)?, b, None, &p)?.mssim))
        .collect()
}

/// Translates every slice of `vol` perpendicular to `axis`.
pub fn translate_volume(gen: &Generator, vol: &Volume, axis: usize) -> Result<Volume> {
    extract_slice(vol, axis, 0)?;
    let mut out = vol.clone();
    for i in 0..vol.dims()[axis] {
        let s = extract_slice(vol, axis, i)?.without_mask();
        out = embed_slice(&out, axis, i, &gen.translate(&s)?)?;
    }
    Ok(out)
}
