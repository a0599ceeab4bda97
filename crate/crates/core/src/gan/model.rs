//! Coarse-to-fine generator with a duplicated output head, and the
//! conditional discriminator.
//!
//! Layer tables (`K` kernel, `C` channels, `S` stride, `D` dilation, `w` the
//! base width, 128 at full size):
//!
//! * coarse: K3 Cw S1 x3, K1 C(w/2) S2, K1 C3 S1
//! * fine:   K3 Cw S1 x3, K3 Cw S1 D2, K3 Cw S1 D4, K1 C(w/2) S2, then two
//!   K1 C3 S1 heads (orientation and log-variance)
//! * discriminator: K3 C(w/4) S1, K3 C(w/2) S2, K3 Cw S2, K3 Cw S1 x2, each
//!   with batch norm, then a one-unit dense layer and a sigmoid
//!
//! Every convolution, the output heads included, is followed by a leaky ReLU.

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::PatchSpec;
use crate::tensor::init::{glorot_uniform, he_normal};
use crate::tensor::{BatchStats, BnMode, ConvSpec, Graph, Real, Tensor, Var};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    /// Patch side; the context cube has side `2n`.
    pub n: usize,
    pub width: usize,
    pub alpha: f64,
    /// Outputs are clipped to `mean +- clip_k * std` of the training vectors.
    pub clip_k: f64,
    pub logvar_min: f64,
    pub logvar_max: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            n: 8,
            width: 128,
            alpha: 0.3,
            clip_k: 5.0,
            logvar_min: -10.0,
            logvar_max: 10.0,
        }
    }
}

impl Architecture {
    pub fn context_side(&self) -> usize {
        2 * self.n
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.width < 2 {
            return Err(Error::contract(format!("invalid architecture n={} width={}", self.n, self.width)));
        }
        if !(0.0..1.0).contains(&self.alpha) || !(self.clip_k > 0.0) || self.logvar_min >= self.logvar_max {
            return Err(Error::contract("invalid activation, clip, or log-variance settings"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Coarse,
    Fine,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Per-channel clipping statistics of ground-truth vectors, fixed before training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ClipStats {
    /// Mean and population standard deviation of each vector component.
    pub fn from_vectors<'a>(vectors: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut n = 0.0;
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for v in vectors {
            n += 1.0;
            for c in 0..3 {
                sum[c] += v[c] as f64;
                sq[c] += (v[c] as f64).powi(2);
            }
        }
        if n == 0.0 {
            return Err(Error::contract("clip statistics need at least one vector"));
        }
        let mean = sum.map(|s| s / n);
        let std = std::array::from_fn(|c| (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt());
        if std.iter().any(|s: &f64| !(*s > 0.0)) {
            return Err(Error::contract("clip statistics have zero spread"));
        }
        Ok(Self { mean, std })
    }

    fn bounds<T: Real>(&self, k: f64) -> (Vec<T>, Vec<T>) {
        (
            (0..3).map(|c| T::lit(self.mean[c] - k * self.std[c])).collect(),
            (0..3).map(|c| T::lit(self.mean[c] + k * self.std[c])).collect(),
        )
    }
}

/// Batch-norm running statistics; empty until the first train-mode update.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Real> RunningStats<T> {
    fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    /// The first update adopts the batch statistics; later ones blend them
    /// in with momentum [`BN_MOMENTUM`].
    pub fn update(&mut self, batch: &BatchStats<T>) {
        if !self.initialized {
            self.mean.clone_from(&batch.mean);
            self.var.clone_from(&batch.var);
            self.initialized = true;
            return;
        }
        let m = T::lit(BN_MOMENTUM);
        let rest = T::one() - m;
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + rest * *b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = m * *r + rest * *b;
        }
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    spec: ConvSpec,
    weight: usize,
    bias: usize,
    /// Index into `GanModel::norms`.
    norm: Option<usize>,
}

#[derive(Clone, Debug)]
struct NormLayer {
    gamma: usize,
    beta: usize,
}

/// All parameters of the generator pair and the discriminator.
#[derive(Clone, Debug)]
pub struct GanModel<T> {
    pub arch: Architecture,
    params: Vec<Param<T>>,
    coarse: Vec<ConvLayer>,
    fine: Vec<ConvLayer>,
    head_mean: ConvLayer,
    head_logvar: ConvLayer,
    disc: Vec<ConvLayer>,
    norms: Vec<NormLayer>,
    pub running: Vec<RunningStats<T>>,
    dense_weight: usize,
    dense_bias: usize,
    pub clip: Option<ClipStats>,
}

/// Graph handles for the parameters of one forward pass.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    fn get(&self, index: usize) -> Var {
        self.vars[index].expect("parameter group was not bound for this pass")
    }
}

pub struct GeneratorOutput {
    pub coarse: Var,
    pub patch: Var,
    pub logvar: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscMode {
    /// Batch statistics; the caller may fold the returned stats into the running averages.
    Train,
    /// Running statistics.
    Eval,
}

struct Builder<'a, T, R: ?Sized> {
    params: Vec<Param<T>>,
    rng: &'a mut R,
}

impl<T: Real, R: Rng + ?Sized> Builder<'_, T, R> {
    fn push(&mut self, name: String, group: Group, value: Tensor<T>) -> usize {
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, group: Group, cin: usize, spec: ConvSpec) -> ConvLayer {
        let k = spec.kernel;
        let shape = [k, k, k, cin, spec.channels_out];
        let w = he_normal(&shape, k * k * k * cin, self.rng);
        let weight = self.push(format!("{prefix}.weight"), group, w);
        let bias = self.push(format!("{prefix}.bias"), group, Tensor::zeros(&[spec.channels_out]));
        ConvLayer { spec, weight, bias, norm: None }
    }
}

impl<T: Real> GanModel<T> {
    /// Fresh model: He-normal kernels, Glorot-uniform dense weights, zero
    /// biases, unit batch-norm scales.
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let w = arch.width;
        let (quarter, half) = ((w / 4).max(1), (w / 2).max(1));
        let mut b = Builder { params: Vec::new(), rng };

        let mut cin = 3;
        let mut coarse = Vec::new();
        let coarse_specs = [
            ConvSpec::new(3, w, 1),
            ConvSpec::new(3, w, 1),
            ConvSpec::new(3, w, 1),
            ConvSpec::new(1, half, 2),
            ConvSpec::new(1, 3, 1),
        ];
        for (i, spec) in coarse_specs.into_iter().enumerate() {
            coarse.push(b.conv(&format!("coarse.conv{i}"), Group::Coarse, cin, spec));
            cin = spec.channels_out;
        }

        cin = 3;
        let mut fine = Vec::new();
        let fine_specs = [
            ConvSpec::new(3, w, 1),
            ConvSpec::new(3, w, 1),
            ConvSpec::new(3, w, 1),
            ConvSpec::new(3, w, 1).dilated(2),
            ConvSpec::new(3, w, 1).dilated(4),
            ConvSpec::new(1, half, 2),
        ];
        for (i, spec) in fine_specs.into_iter().enumerate() {
            fine.push(b.conv(&format!("fine.conv{i}"), Group::Fine, cin, spec));
            cin = spec.channels_out;
        }
        let head = ConvSpec::new(1, 3, 1);
        let head_mean = b.conv("fine.head_mean", Group::Fine, cin, head);
        let head_logvar = b.conv("fine.head_logvar", Group::Fine, cin, head);

        cin = 3;
        let mut disc = Vec::new();
        let mut norms = Vec::new();
        let mut running = Vec::new();
        let disc_specs = [
            ConvSpec::new(3, quarter, 1),
            ConvSpec::new(3, half, 2),
            ConvSpec::new(3, w, 2),
            ConvSpec::new(3, w, 1),
            ConvSpec::new(3, w, 1),
        ];
        let mut side = arch.context_side();
        for (i, spec) in disc_specs.into_iter().enumerate() {
            let mut layer = b.conv(&format!("disc.conv{i}"), Group::Discriminator, cin, spec);
            let c = spec.channels_out;
            let gamma = b.push(format!("disc.bn{i}.gamma"), Group::Discriminator, Tensor::full(&[c], T::one()));
            let beta = b.push(format!("disc.bn{i}.beta"), Group::Discriminator, Tensor::zeros(&[c]));
            layer.norm = Some(norms.len());
            norms.push(NormLayer { gamma, beta });
            running.push(RunningStats::new(c));
            disc.push(layer);
            cin = c;
            side = spec.out_extent(side);
        }
        let features = side.pow(3) * cin;
        let dw = glorot_uniform(&[features, 1], features, 1, b.rng);
        let dense_weight = b.push("disc.dense.weight".into(), Group::Discriminator, dw);
        let dense_bias = b.push("disc.dense.bias".into(), Group::Discriminator, Tensor::zeros(&[1]));

        Ok(Self {
            arch,
            params: b.params,
            coarse,
            fine,
            head_mean,
            head_logvar,
            disc,
            norms,
            running,
            dense_weight,
            dense_bias,
            clip: None,
        })
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_indices(&self, group: Group) -> Vec<usize> {
        (0..self.params.len()).filter(|i| self.params[*i].group == group).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers the parameters of `include` on `g`; those in `trainable` require gradients.
    pub fn bind(&self, g: &mut Graph<T>, include: &[Group], trainable: &[Group]) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                include
                    .contains(&p.group)
                    .then(|| g.leaf(p.value.clone(), trainable.contains(&p.group)))
            })
            .collect();
        Bound { vars }
    }

    /// Graph variable of parameter `index` in a binding.
    pub fn var(&self, bound: &Bound, index: usize) -> Var {
        bound.get(index)
    }

    fn apply(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        layer: &ConvLayer,
        x: Var,
        mode: DiscMode,
        stats: &mut Vec<BatchStats<T>>,
    ) -> Result<Var> {
        let mut y = g.conv3d(x, bound.get(layer.weight), bound.get(layer.bias), &layer.spec)?;
        if let Some(ni) = layer.norm {
            let norm = &self.norms[ni];
            let (gamma, beta) = (bound.get(norm.gamma), bound.get(norm.beta));
            let eps = T::lit(BN_EPS);
            let (out, batch) = match mode {
                DiscMode::Train => g.batch_norm(y, gamma, beta, BnMode::Train, eps)?,
                DiscMode::Eval => {
                    let r = &self.running[ni];
                    if !r.initialized {
                        return Err(Error::UninitializedStats);
                    }
                    g.batch_norm(y, gamma, beta, BnMode::Eval { mean: &r.mean, var: &r.var }, eps)?
                }
            };
            stats.extend(batch);
            y = out;
        }
        Ok(g.leaky_relu(y, T::lit(self.arch.alpha)))
    }

    fn check_shape(&self, g: &Graph<T>, v: Var, side: usize, what: &str) -> Result<usize> {
        let s = g.shape(v);
        if s.len() != 5 || s[1..] != [side, side, side, 3] {
            return Err(Error::contract(format!(
                "{what} must be [B,{side},{side},{side},3], got {s:?}"
            )));
        }
        Ok(s[0])
    }

    /// Coarse prediction from the masked context, then the fine prediction
    /// and log-variance from the context with the (gradient-blocked) coarse
    /// patch pasted into its center.
    pub fn generator_forward(&self, g: &mut Graph<T>, bound: &Bound, context: Var) -> Result<GeneratorOutput> {
        self.check_shape(g, context, self.arch.context_side(), "generator context")?;
        let clip = self.clip.as_ref().ok_or(Error::MissingClipStats)?;
        let (lo, hi) = clip.bounds::<T>(self.arch.clip_k);
        let mut none = Vec::new();

        let mut x = context;
        for layer in &self.coarse {
            x = self.apply(g, bound, layer, x, DiscMode::Train, &mut none)?;
        }
        let coarse = g.clip(x, &lo, &hi)?;

        let frozen = g.detach(coarse);
        let mut x = g.paste(frozen, context, PatchSpec::offset(self.arch.n))?;
        for layer in &self.fine {
            x = self.apply(g, bound, layer, x, DiscMode::Train, &mut none)?;
        }
        let mean = self.apply(g, bound, &self.head_mean, x, DiscMode::Train, &mut none)?;
        let patch = g.clip(mean, &lo, &hi)?;
        let raw = self.apply(g, bound, &self.head_logvar, x, DiscMode::Train, &mut none)?;
        let reduced = g.mean_channels(raw);
        let logvar = g.clip(reduced, &[T::lit(self.arch.logvar_min)], &[T::lit(self.arch.logvar_max)])?;
        Ok(GeneratorOutput { coarse, patch, logvar })
    }

    /// Probability that `patch` is the true center of `context`, one per batch element.
    pub fn discriminator_forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        patch: Var,
        context: Var,
        mode: DiscMode,
    ) -> Result<(Var, Vec<BatchStats<T>>)> {
        let n = self.arch.n;
        let b = self.check_shape(g, patch, n, "discriminator patch")?;
        if self.check_shape(g, context, 2 * n, "discriminator context")? != b {
            return Err(Error::contract("patch and context batch sizes differ"));
        }
        let mut x = g.paste(patch, context, PatchSpec::offset(n))?;
        let mut stats = Vec::new();
        for layer in &self.disc {
            x = self.apply(g, bound, layer, x, mode, &mut stats)?;
        }
        let features = g.value(x).len() / b;
        let flat = g.reshape(x, &[b, features])?;
        let logit = g.dense(flat, bound.get(self.dense_weight), bound.get(self.dense_bias))?;
        Ok((g.sigmoid(logit), stats))
    }

    /// Folds train-mode batch statistics (in layer order) into the running averages.
    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        for (r, s) in self.running.iter_mut().zip(stats) {
            r.update(s);
        }
    }

    /// Generator-only forward on constant inputs: fine patch and log-variance values.
    pub fn predict(&self, context: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, &[Group::Coarse, Group::Fine], &[]);
        let ctx = g.constant(context);
        let out = self.generator_forward(&mut g, &bound, ctx)?;
        Ok((g.value(out.patch).clone(), g.value(out.logvar).clone()))
    }
}
