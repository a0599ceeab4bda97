//! Binary training checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "MDCK"  u32 version
//! u64 config_len  config echo (UTF-8)
//! architecture:  u64 n, u64 width, f64 alpha, f64 clip_k, f64 logvar_min, f64 logvar_max
//! training:      u64 batch, u64 epochs, f64 smoothing, f64 lr, f64 beta1, f64 beta2, f64 eps,
//!                u64 seed, u8 sign_flip, u64 val_patches, f64 coarse_weight, u8 squared_residual
//! u64 epoch  f32 normalizer  u8 has_clip [6 x f64 clip mean/std]
//! rng:           32-byte seed, u64 stream, u128 word position
//! u64 generator_steps  u64 discriminator_steps
//! u64 running_layers  running_layers x u8 initialized
//! u64 tensor_count, then per tensor: u64 name_len, name, u64 rank, rank x u64 dims, f32 data
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::loss::LossOptions;
use super::model::{Architecture, ClipStats, GanModel, Group};
use super::train::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::tensor::optim::{AdamConfig, OptimState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.bytes(name.as_bytes());
        self.u64(t.shape().len() as u64);
        for d in t.shape() {
            self.u64(*d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len()).ok_or_else(|| mismatch("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| mismatch("size out of range"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(mismatch(format!("invalid flag byte {b}"))),
        }
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| mismatch("string is not UTF-8"))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let rank = self.usize()?;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| mismatch("tensor too large"))?;
        if len.checked_mul(4).is_none_or(|b| b > self.buf.len() - self.pos) {
            return Err(mismatch(format!("tensor `{name}` runs past the end of the file")));
        }
        let data = (0..len).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(shape, data)?))
    }
}

fn mismatch(msg: impl Into<String>) -> Error {
    Error::CheckpointMismatch { version: VERSION, msg: msg.into() }
}

fn optimizer_names(model: &GanModel<f32>, groups: &[Group]) -> Vec<String> {
    model.params().iter().filter(|p| groups.contains(&p.group)).map(|p| p.name.clone()).collect()
}

const GENERATOR: [Group; 2] = [Group::Coarse, Group::Fine];
const DISCRIMINATOR: [Group; 1] = [Group::Discriminator];

/// Serializes the complete training state. `config_echo` is stored verbatim
/// for inspection and is not interpreted on load.
pub fn to_bytes(trainer: &Trainer, config_echo: &str) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.bytes(config_echo.as_bytes());

    let a = &trainer.model.arch;
    w.u64(a.n as u64);
    w.u64(a.width as u64);
    for v in [a.alpha, a.clip_k, a.logvar_min, a.logvar_max] {
        w.f64(v);
    }
    let c = &trainer.cfg;
    w.u64(c.batch_size as u64);
    w.u64(c.epochs);
    for v in [c.smoothing, c.adam.lr, c.adam.beta1, c.adam.beta2, c.adam.eps] {
        w.f64(v);
    }
    w.u64(c.seed);
    w.u8(c.sign_flip as u8);
    w.u64(c.val_patches as u64);
    w.f64(c.loss.coarse_weight);
    w.u8(c.loss.squared_residual as u8);

    w.u64(trainer.epoch);
    w.0.extend_from_slice(&trainer.normalizer.to_le_bytes());
    match &trainer.model.clip {
        Some(clip) => {
            w.u8(1);
            for v in clip.mean.iter().chain(&clip.std) {
                w.f64(*v);
            }
        }
        None => w.u8(0),
    }
    w.0.extend_from_slice(&trainer.rng.get_seed());
    w.u64(trainer.rng.get_stream());
    w.0.extend_from_slice(&trainer.rng.get_word_pos().to_le_bytes());
    w.u64(trainer.gen_opt.step);
    w.u64(trainer.disc_opt.step);
    w.u64(trainer.model.running.len() as u64);
    for r in &trainer.model.running {
        w.u8(r.initialized as u8);
    }

    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    for p in trainer.model.params() {
        tensors.push((p.name.clone(), p.value.clone()));
    }
    for (tag, opt, groups) in [("gen", &trainer.gen_opt, &GENERATOR[..]), ("disc", &trainer.disc_opt, &DISCRIMINATOR[..])] {
        for (i, name) in optimizer_names(&trainer.model, groups).iter().enumerate() {
            tensors.push((format!("adam.{tag}.m.{name}"), opt.first[i].clone()));
            tensors.push((format!("adam.{tag}.v.{name}"), opt.second[i].clone()));
        }
    }
    for (i, r) in trainer.model.running.iter().enumerate() {
        tensors.push((format!("running.{i}.mean"), Tensor::from_vec(r.mean.clone())));
        tensors.push((format!("running.{i}.var"), Tensor::from_vec(r.var.clone())));
    }
    w.u64(tensors.len() as u64);
    for (name, t) in &tensors {
        w.tensor(name, t);
    }
    w.0
}

/// A decoded checkpoint: the training state and the stored config echo.
pub struct Checkpoint {
    pub trainer: Trainer,
    pub config_echo: String,
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(&MAGIC[..]) {
        return Err(mismatch("missing MDCK magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch {
            version,
            msg: format!("unsupported format version (this build reads version {VERSION})"),
        });
    }
    let config_echo = r.string()?;
    let arch = Architecture {
        n: r.usize()?,
        width: r.usize()?,
        alpha: r.f64()?,
        clip_k: r.f64()?,
        logvar_min: r.f64()?,
        logvar_max: r.f64()?,
    };
    let batch_size = r.usize()?;
    let epochs = r.u64()?;
    let smoothing = r.f64()?;
    let adam = AdamConfig { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
    let cfg = TrainConfig {
        batch_size,
        epochs,
        smoothing,
        adam,
        seed: r.u64()?,
        sign_flip: r.flag()?,
        val_patches: r.usize()?,
        loss: LossOptions { coarse_weight: r.f64()?, squared_residual: r.flag()? },
    };
    let epoch = r.u64()?;
    let normalizer = r.f32()?;
    let clip = if r.flag()? {
        let v: Vec<f64> = (0..6).map(|_| r.f64()).collect::<Result<_>>()?;
        Some(ClipStats { mean: [v[0], v[1], v[2]], std: [v[3], v[4], v[5]] })
    } else {
        None
    };
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let gen_steps = r.u64()?;
    let disc_steps = r.u64()?;
    let layers = r.usize()?;
    let flags = (0..layers).map(|_| r.flag()).collect::<Result<Vec<_>>>()?;
    let count = r.usize()?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(mismatch(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(mismatch("trailing bytes after the last tensor"));
    }

    let mut model = GanModel::<f32>::new(arch, &mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))
        .map_err(|e| mismatch(format!("stored architecture is invalid: {e}")))?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = tensors.remove(name).ok_or_else(|| mismatch(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(mismatch(format!("tensor `{name}` has shape {:?}, model expects {shape:?}", t.shape())));
        }
        Ok(t)
    };
    for p in model.params_mut() {
        let shape = p.value.shape().to_vec();
        p.value = take(&p.name, &shape)?;
    }
    let mut optim = |tag: &str, groups: &[Group], steps: u64, model: &GanModel<f32>| -> Result<OptimState<f32>> {
        let mut state = OptimState::new(adam, model.params().iter().filter(|p| groups.contains(&p.group)).map(|p| &p.value));
        state.step = steps;
        for (i, name) in optimizer_names(model, groups).iter().enumerate() {
            let shape = state.first[i].shape().to_vec();
            state.first[i] = take(&format!("adam.{tag}.m.{name}"), &shape)?;
            state.second[i] = take(&format!("adam.{tag}.v.{name}"), &shape)?;
        }
        Ok(state)
    };
    let gen_opt = optim("gen", &GENERATOR, gen_steps, &model)?;
    let disc_opt = optim("disc", &DISCRIMINATOR, disc_steps, &model)?;
    if flags.len() != model.running.len() {
        return Err(mismatch(format!("{} running-stat layers stored, model has {}", flags.len(), model.running.len())));
    }
    for (i, (run, init)) in model.running.iter_mut().zip(flags).enumerate() {
        let c = run.mean.len();
        run.mean = take(&format!("running.{i}.mean"), &[c])?.into_data();
        run.var = take(&format!("running.{i}.var"), &[c])?.into_data();
        run.initialized = init;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(mismatch(format!("unexpected tensor `{extra}`")));
    }
    model.clip = clip;

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(Checkpoint {
        trainer: Trainer { model, gen_opt, disc_opt, rng, epoch, cfg, normalizer },
        config_echo,
    })
}

/// Writes atomically: the file at `path` is either the previous checkpoint or the new one.
pub fn save(path: &Path, trainer: &Trainer, config_echo: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(trainer, config_echo)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
