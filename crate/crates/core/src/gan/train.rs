//! Alternating discriminator/generator training over one random patch per
//! training scan per epoch.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{discriminator_loss, generator_loss, LossBreakdown, LossOptions};
use super::model::{Architecture, ClipStats, DiscMode, GanModel, Group};
use crate::dataset::{sample_epoch, valid_positions, DatasetSplit};
use crate::error::{Error, Result};
use crate::field::{default_threshold, extract_sample, flip_signs, symmetric_l2, white_matter_mask, PatchSpec, VectorVolume, WhiteMatterMask};
use crate::phantom::derive_seed;
use crate::tensor::optim::{AdamConfig, OptimState};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    /// Target for real samples in the discriminator loss.
    pub smoothing: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Randomly flip voxel signs of every training sample.
    pub sign_flip: bool,
    /// Fixed validation patches drawn per validation scan.
    pub val_patches: usize,
    pub loss: LossOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 300,
            smoothing: 0.9,
            adam: AdamConfig::default(),
            seed: 42,
            sign_flip: true,
            val_patches: 4,
            loss: LossOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::contract("batch size must be at least 2 (batch normalization)"));
        }
        if !(self.smoothing > 0.5 && self.smoothing <= 1.0) {
            return Err(Error::contract(format!("label smoothing {} outside (0.5, 1]", self.smoothing)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::contract("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Normalized volumes and everything derived from the training split.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub n: usize,
    /// Volumes divided by `normalizer`.
    pub volumes: Vec<VectorVolume>,
    pub split: DatasetSplit,
    /// Valid patch positions per scan (white-matter center, context in bounds).
    pub positions: Vec<Vec<PatchSpec>>,
    /// Mean white-matter magnitude of the raw training volumes.
    pub normalizer: f32,
    pub clip: ClipStats,
    /// White-matter threshold of each scan, in normalized units.
    pub thresholds: Vec<f32>,
    pub masks: Vec<WhiteMatterMask>,
}

impl TrainingData {
    /// `mask_fraction` sets each scan's white-matter threshold as a fraction
    /// of its 99th-percentile magnitude.
    pub fn prepare(raw: Vec<VectorVolume>, split: DatasetSplit, n: usize, mask_fraction: f32) -> Result<Self> {
        Self::prepare_with_normalizer(raw, split, n, mask_fraction, None)
    }

    /// As [`TrainingData::prepare`], but reuses a normalizer fixed earlier
    /// (for example the one stored with a trained model).
    pub fn prepare_with_normalizer(
        raw: Vec<VectorVolume>,
        split: DatasetSplit,
        n: usize,
        mask_fraction: f32,
        normalizer: Option<f32>,
    ) -> Result<Self> {
        if split.num_scans() != raw.len() {
            return Err(Error::contract(format!(
                "split covers {} scans but {} volumes were given",
                split.num_scans(),
                raw.len()
            )));
        }
        let thresholds: Vec<f32> = raw.iter().map(|v| default_threshold(v, mask_fraction)).collect();
        let masks: Vec<_> = raw.iter().zip(&thresholds).map(|(v, t)| white_matter_mask(v, *t)).collect();

        let (mut sum, mut count) = (0.0f64, 0usize);
        for &scan in &split.train {
            for (m, inside) in raw[scan].magnitudes().iter().zip(masks[scan].cells()) {
                if *inside {
                    sum += *m as f64;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::contract("training split has no white-matter voxels"));
        }
        let normalizer = normalizer.unwrap_or((sum / count as f64) as f32);
        if !(normalizer.is_finite() && normalizer > 0.0) {
            return Err(Error::contract(format!("normalizer {normalizer} must be positive")));
        }
        let volumes: Vec<VectorVolume> = raw.iter().map(|v| v.scaled(1.0 / normalizer)).collect();
        let clip = ClipStats::from_vectors(split.train.iter().flat_map(|s| volumes[*s].data().chunks(3)))?;
        let positions = masks.iter().map(|m| valid_positions(m, n)).collect();
        Ok(Self {
            n,
            volumes,
            split,
            positions,
            normalizer,
            clip,
            thresholds: thresholds.iter().map(|t| t / normalizer).collect(),
            masks,
        })
    }

    /// Validation patches, identical for every epoch of a run.
    pub fn validation_specs(&self, seed: u64, per_scan: usize) -> Result<Vec<(usize, PatchSpec)>> {
        let mut out = Vec::new();
        for k in 0..per_scan as u64 {
            let scans = &self.split.validation;
            let pos: Vec<_> = scans.iter().map(|s| self.positions[*s].clone()).collect();
            let specs = sample_epoch(scans, &pos, derive_seed(seed, &[0x76616c]), k)?;
            out.extend(scans.iter().copied().zip(specs));
        }
        Ok(out)
    }
}

/// Stacks samples into `[B,2n,2n,2n,3]` contexts and `[B,n,n,n,3]` patches.
pub fn stack(volumes: &[VectorVolume], items: &[(usize, PatchSpec)]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut ctx = Vec::new();
    let mut patch = Vec::new();
    let n = items.first().map(|i| i.1.n).ok_or_else(|| Error::contract("empty batch"))?;
    for (scan, spec) in items {
        let s = extract_sample(&volumes[*scan], *spec)?;
        ctx.extend_from_slice(s.context.data());
        patch.extend_from_slice(s.patch.data());
    }
    let b = items.len();
    Ok((
        Tensor::new(vec![b, 2 * n, 2 * n, 2 * n, 3], ctx)?,
        Tensor::new(vec![b, n, n, n, 3], patch)?,
    ))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    /// 1-based index of the finished epoch.
    pub epoch: u64,
    pub loss: LossBreakdown,
    /// Fraction of real and fake samples the discriminator classified correctly.
    pub d_accuracy: f64,
    /// Mean per-voxel symmetric L2 error on the validation patches.
    pub val_error: f64,
}

impl EpochMetrics {
    pub const COLUMNS: [&'static str; 8] = [
        "epoch",
        "total",
        "adversarial",
        "reconstruction",
        "variance_penalty",
        "coarse",
        "d_accuracy",
        "val_error",
    ];

    pub fn header() -> String {
        format!("# {}", Self::COLUMNS.join("\t"))
    }

    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            self.epoch, l.total, l.adversarial, l.reconstruction, l.variance_penalty, l.coarse, self.d_accuracy, self.val_error
        )
    }
}

pub struct Trainer {
    pub model: GanModel<f32>,
    pub gen_opt: OptimState<f32>,
    pub disc_opt: OptimState<f32>,
    /// Drives batch order and sign-flip augmentation.
    pub rng: ChaCha8Rng,
    /// Number of completed epochs.
    pub epoch: u64,
    pub cfg: TrainConfig,
    pub normalizer: f32,
}

fn indices(model: &GanModel<f32>, groups: &[Group]) -> Vec<usize> {
    (0..model.params().len()).filter(|i| groups.contains(&model.params()[*i].group)).collect()
}

const GENERATOR: [Group; 2] = [Group::Coarse, Group::Fine];
const DISCRIMINATOR: [Group; 1] = [Group::Discriminator];

impl Trainer {
    pub fn new(arch: Architecture, cfg: TrainConfig, data: &TrainingData) -> Result<Self> {
        cfg.validate()?;
        if arch.n != data.n {
            return Err(Error::contract(format!("model n={} but data prepared for n={}", arch.n, data.n)));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x696e6974]));
        let mut model = GanModel::new(arch, &mut init_rng)?;
        model.clip = Some(data.clip.clone());
        let pick = |groups: &[Group]| -> Vec<&Tensor<f32>> {
            indices(&model, groups).into_iter().map(|i| &model.params()[i].value).collect()
        };
        let gen_opt = OptimState::new(cfg.adam, pick(&GENERATOR));
        let disc_opt = OptimState::new(cfg.adam, pick(&DISCRIMINATOR));
        Ok(Self {
            gen_opt,
            disc_opt,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x74726e])),
            epoch: 0,
            normalizer: data.normalizer,
            model,
            cfg,
        })
    }

    fn apply_update(&mut self, groups: &[Group], grads: Vec<Tensor<f32>>) -> Result<()> {
        let idx: HashSet<usize> = indices(&self.model, groups).into_iter().collect();
        let names: Vec<String> = self
            .model
            .params()
            .iter()
            .enumerate()
            .filter(|(i, _)| idx.contains(i))
            .map(|(_, p)| p.name.clone())
            .collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let mut params: Vec<&mut Tensor<f32>> = self
            .model
            .params_mut()
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| idx.contains(i))
            .map(|(_, p)| &mut p.value)
            .collect();
        let opt = if groups.contains(&Group::Discriminator) { &mut self.disc_opt } else { &mut self.gen_opt };
        opt.step(&names, &mut params, &grads)
    }

    /// One discriminator update followed by one generator update.
    /// Returns the generator loss and the number of correct discriminator calls.
    pub fn train_batch(&mut self, context: Tensor<f32>, real: Tensor<f32>) -> Result<(LossBreakdown, usize)> {
        let batch = real.shape()[0];
        let mut g = Graph::new();
        let gen_bound = self.model.bind(&mut g, &GENERATOR, &GENERATOR);
        let ctx = g.constant(context.clone());
        let out = self.model.generator_forward(&mut g, &gen_bound, ctx)?;

        // Discriminator step on a frozen copy of the generated patch.
        let (correct, disc_grads, stats) = {
            let mut dg = Graph::new();
            let bound = self.model.bind(&mut dg, &DISCRIMINATOR, &DISCRIMINATOR);
            let c = dg.constant(context);
            let fake = dg.constant(g.value(out.patch).clone());
            let r = dg.constant(real.clone());
            let (real_p, mut stats) = self.model.discriminator_forward(&mut dg, &bound, r, c, DiscMode::Train)?;
            let (fake_p, fake_stats) = self.model.discriminator_forward(&mut dg, &bound, fake, c, DiscMode::Train)?;
            stats.extend(fake_stats);
            let loss = discriminator_loss(&mut dg, real_p, fake_p, self.cfg.smoothing)?;
            if !dg.value(loss).is_finite() {
                return Err(Error::NonFinite { component: "discriminator loss".into() });
            }
            let correct = dg.value(real_p).data().iter().filter(|p| **p > 0.5).count()
                + dg.value(fake_p).data().iter().filter(|p| **p < 0.5).count();
            let grads = dg.backward(loss)?;
            let disc_grads = indices(&self.model, &DISCRIMINATOR)
                .into_iter()
                .map(|i| grads.get_or_zeros(self.model.var(&bound, i)))
                .collect::<Vec<_>>();
            (correct, disc_grads, stats)
        };
        self.apply_update(&DISCRIMINATOR, disc_grads)?;
        let layers = stats.len() / 2;
        self.model.update_running(&stats[..layers]);
        self.model.update_running(&stats[layers..]);

        // Generator step against the updated discriminator.
        let disc_bound = self.model.bind(&mut g, &DISCRIMINATOR, &[]);
        let (d_prob, _) = self.model.discriminator_forward(&mut g, &disc_bound, out.patch, ctx, DiscMode::Train)?;
        let target = g.constant(real);
        let vars = generator_loss(&mut g, target, out.patch, out.logvar, Some(d_prob), Some(out.coarse), &self.cfg.loss)?;
        let breakdown = LossBreakdown::read(&g, &vars);
        let grads = g.backward(vars.total)?;
        let gen_grads = indices(&self.model, &GENERATOR)
            .into_iter()
            .map(|i| grads.get_or_zeros(self.model.var(&gen_bound, i)))
            .collect();
        self.apply_update(&GENERATOR, gen_grads)?;
        debug_assert!(correct <= 2 * batch);
        Ok((breakdown, correct))
    }

    /// Runs the next epoch and returns its metrics.
    pub fn run_epoch(&mut self, data: &TrainingData) -> Result<EpochMetrics> {
        let scans = &data.split.train;
        let positions: Vec<_> = scans.iter().map(|s| data.positions[*s].clone()).collect();
        let specs = sample_epoch(scans, &positions, self.cfg.seed, self.epoch)?;
        let mut items: Vec<(usize, PatchSpec)> = scans.iter().copied().zip(specs).collect();
        items.shuffle(&mut self.rng);

        let mut sum = LossBreakdown::default();
        let (mut batches, mut correct, mut judged) = (0usize, 0usize, 0usize);
        for chunk in items.chunks(self.cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (mut ctx, mut patch) = stack(&data.volumes, chunk)?;
            if self.cfg.sign_flip {
                flip_signs(ctx.data_mut(), &mut self.rng);
                flip_signs(patch.data_mut(), &mut self.rng);
            }
            let (loss, ok) = self.train_batch(ctx, patch)?;
            sum.adversarial += loss.adversarial;
            sum.reconstruction += loss.reconstruction;
            sum.variance_penalty += loss.variance_penalty;
            sum.coarse += loss.coarse;
            sum.total += loss.total;
            correct += ok;
            judged += 2 * chunk.len();
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::contract("no training batch of at least 2 samples"));
        }
        let nb = batches as f64;
        let loss = LossBreakdown {
            adversarial: sum.adversarial / nb,
            reconstruction: sum.reconstruction / nb,
            variance_penalty: sum.variance_penalty / nb,
            coarse: sum.coarse / nb,
            total: sum.total / nb,
        };
        self.epoch += 1;
        let val_error = self.validation_error(data)?;
        let metrics = EpochMetrics {
            epoch: self.epoch,
            loss,
            d_accuracy: correct as f64 / judged as f64,
            val_error,
        };
        for (name, v) in metrics.loss.components() {
            if !v.is_finite() {
                return Err(Error::NonFinite { component: format!("epoch {} {name}", self.epoch) });
            }
        }
        if !metrics.val_error.is_finite() {
            return Err(Error::NonFinite { component: "validation error".into() });
        }
        Ok(metrics)
    }

    /// Mean per-voxel symmetric L2 error of the fine prediction on the fixed validation patches.
    pub fn validation_error(&self, data: &TrainingData) -> Result<f64> {
        let specs = data.validation_specs(self.cfg.seed, self.cfg.val_patches)?;
        mean_patch_error(&self.model, &data.volumes, &specs, self.cfg.batch_size)
    }
}

pub fn mean_patch_error(
    model: &GanModel<f32>,
    volumes: &[VectorVolume],
    items: &[(usize, PatchSpec)],
    batch_size: usize,
) -> Result<f64> {
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in items.chunks(batch_size.max(1)) {
        let (ctx, truth) = stack(volumes, chunk)?;
        let (pred, _) = model.predict(ctx)?;
        for (p, t) in pred.data().chunks(3).zip(truth.data().chunks(3)) {
            total += symmetric_l2([p[0], p[1], p[2]], [t[0], t[1], t[2]]) as f64;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

