use fiberfill::dataset::make_split;
use fiberfill::gan::checkpoint;
use fiberfill::gan::model::GeneratorOutput;
use fiberfill::gan::{
    discriminator_loss, generator_loss, Architecture, ClipStats, DiscMode, GanModel, Group, LossOptions, TrainConfig, Trainer,
    TrainingData,
};
use fiberfill::phantom::{generate_phantom, CohortConfig};
use fiberfill::tensor::{Graph, Tensor};
use fiberfill::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model(n: usize, width: usize, seed: u64) -> GanModel<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = GanModel::new(Architecture { n, width, ..Architecture::default() }, &mut rng).unwrap();
    m.clip = Some(ClipStats { mean: [0.1, -0.1, 0.0], std: [0.5, 0.4, 0.3] });
    m
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn tiny_data(num_scans: usize, side: usize, ratios: [f64; 3]) -> TrainingData {
    let cohort = CohortConfig { num_scans, side, ..CohortConfig::default() };
    let vols = (0..num_scans).map(|i| generate_phantom(&cohort.phantom(5, i)).unwrap().0).collect();
    let split = make_split(num_scans, ratios, 5).unwrap();
    TrainingData::prepare(vols, split, 4, 0.1).unwrap()
}

fn small_train_config() -> TrainConfig {
    TrainConfig { batch_size: 2, val_patches: 2, seed: 3, adam: fiberfill::tensor::optim::AdamConfig { lr: 1e-3, ..Default::default() }, ..TrainConfig::default() }
}

#[test]
fn generator_shapes_and_clip() {
    let model = small_model(8, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &[Group::Coarse, Group::Fine], &[]);
    let ctx = g.constant(random(&mut rng, &[2, 16, 16, 16, 3], 50.0));
    let GeneratorOutput { coarse, patch, logvar } = model.generator_forward(&mut g, &bound, ctx).unwrap();
    assert_eq!(g.shape(coarse), &[2, 8, 8, 8, 3]);
    assert_eq!(g.shape(patch), &[2, 8, 8, 8, 3]);
    assert_eq!(g.shape(logvar), &[2, 8, 8, 8, 1]);
    let clip = model.clip.as_ref().unwrap();
    for v in [coarse, patch] {
        for (i, x) in g.value(v).data().iter().enumerate() {
            let c = i % 3;
            let (lo, hi) = (clip.mean[c] - 5.0 * clip.std[c], clip.mean[c] + 5.0 * clip.std[c]);
            assert!((lo as f32..=hi as f32).contains(x), "{x} outside [{lo}, {hi}]");
        }
    }
    assert!(g.value(logvar).data().iter().all(|s| (-10.0..=10.0).contains(s)));
}

#[test]
fn discriminator_outputs_are_probabilities_and_pure_in_eval_mode() {
    let mut model = small_model(4, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let patch = random(&mut rng, &[3, 4, 4, 4, 3], 1.0);
    let ctx = random(&mut rng, &[3, 8, 8, 8, 3], 1.0);
    let run = |model: &GanModel<f32>, mode| {
        let mut g = Graph::new();
        let b = model.bind(&mut g, &[Group::Discriminator], &[]);
        let (p, c) = (g.constant(patch.clone()), g.constant(ctx.clone()));
        let (prob, stats) = model.discriminator_forward(&mut g, &b, p, c, mode).unwrap();
        (g.value(prob).clone(), stats)
    };
    let (train, stats) = run(&model, DiscMode::Train);
    assert_eq!(train.shape(), &[3, 1]);
    assert!(train.data().iter().all(|p| *p > 0.0 && *p < 1.0));
    model.update_running(&stats);
    let (a, _) = run(&model, DiscMode::Eval);
    let (b, _) = run(&model, DiscMode::Eval);
    assert_eq!(a, b);
}

/// Generator objective pieces on one random batch; returns gradients of
/// `total` for every parameter.
fn generator_grads(model: &GanModel<f32>, with_coarse: bool, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all = [Group::Coarse, Group::Fine, Group::Discriminator];
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &all, &all);
    let ctx = g.constant(random(&mut rng, &[4, 8, 8, 8, 3], 1.0));
    let real = g.constant(random(&mut rng, &[4, 4, 4, 4, 3], 1.0));
    let out = model.generator_forward(&mut g, &bound, ctx).unwrap();
    let (d, _) = model.discriminator_forward(&mut g, &bound, out.patch, ctx, DiscMode::Train).unwrap();
    let coarse = with_coarse.then_some(out.coarse);
    let l = generator_loss(&mut g, real, out.patch, out.logvar, Some(d), coarse, &LossOptions::default()).unwrap();
    let grads = g.backward(l.total).unwrap();
    (0..model.params().len()).map(|i| grads.get_or_zeros(model.var(&bound, i))).collect()
}

#[test]
fn coarse_network_learns_only_from_its_reconstruction_term() {
    let model = small_model(4, 8, 6);
    let without = generator_grads(&model, false, 1);
    let with = generator_grads(&model, true, 1);
    for (i, p) in model.params().iter().enumerate() {
        if p.group == Group::Coarse {
            assert!(without[i].data().iter().all(|v| *v == 0.0), "{} gets adversarial/attenuation gradient", p.name);
        }
    }
    let coarse_signal: f32 = model
        .params()
        .iter()
        .zip(&with)
        .filter(|(p, _)| p.group == Group::Coarse)
        .map(|(_, g)| g.data().iter().map(|v| v.abs()).sum::<f32>())
        .sum();
    assert!(coarse_signal > 0.0);
}

#[test]
fn every_parameter_receives_a_gradient() {
    let model = small_model(4, 8, 8);
    let gen = generator_grads(&model, true, 2);
    // Discriminator gradients from its own objective on a batch of 32.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &[Group::Discriminator], &[Group::Discriminator]);
    let ctx = g.constant(random(&mut rng, &[32, 8, 8, 8, 3], 1.0));
    let real = g.constant(random(&mut rng, &[32, 4, 4, 4, 3], 1.0));
    let fake = g.constant(random(&mut rng, &[32, 4, 4, 4, 3], 1.0));
    let (rp, _) = model.discriminator_forward(&mut g, &bound, real, ctx, DiscMode::Train).unwrap();
    let (fp, _) = model.discriminator_forward(&mut g, &bound, fake, ctx, DiscMode::Train).unwrap();
    let l = discriminator_loss(&mut g, rp, fp, 0.9).unwrap();
    let grads = g.backward(l).unwrap();
    for (i, p) in model.params().iter().enumerate() {
        let grad = if p.group == Group::Discriminator { grads.get_or_zeros(model.var(&bound, i)) } else { gen[i].clone() };
        assert!(grad.is_finite(), "{}", p.name);
        assert!(grad.data().iter().any(|v| *v != 0.0), "{} has an all-zero gradient", p.name);
    }
}

#[test]
fn discriminator_step_lowers_its_loss_on_the_same_batch() {
    let mut model = small_model(4, 8, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ctx = random(&mut rng, &[8, 8, 8, 8, 3], 1.0);
    let real = random(&mut rng, &[8, 4, 4, 4, 3], 1.0);
    let fake = random(&mut rng, &[8, 4, 4, 4, 3], 0.2);
    let eval = |model: &GanModel<f32>| -> (f32, Vec<Tensor<f32>>, Vec<usize>) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, &[Group::Discriminator], &[Group::Discriminator]);
        let c = g.constant(ctx.clone());
        let (r, f) = (g.constant(real.clone()), g.constant(fake.clone()));
        let (rp, _) = model.discriminator_forward(&mut g, &bound, r, c, DiscMode::Train).unwrap();
        let (fp, _) = model.discriminator_forward(&mut g, &bound, f, c, DiscMode::Train).unwrap();
        let l = discriminator_loss(&mut g, rp, fp, 0.9).unwrap();
        let value = g.value(l).item();
        let grads = g.backward(l).unwrap();
        let idx = model.param_indices(Group::Discriminator);
        (value, idx.iter().map(|i| grads.get_or_zeros(model.var(&bound, *i))).collect(), idx)
    };
    let (before, grads, idx) = eval(&model);
    for (i, grad) in idx.iter().zip(&grads) {
        let p = &mut model.params_mut()[*i].value;
        for (w, d) in p.data_mut().iter_mut().zip(grad.data()) {
            *w -= 1e-3 * d;
        }
    }
    let (after, _, _) = eval(&model);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn one_epoch_smoke_run() {
    let data = tiny_data(4, 16, [0.5, 0.25, 0.25]);
    let arch = Architecture { n: 4, width: 8, ..Architecture::default() };
    let mut trainer = Trainer::new(arch, small_train_config(), &data).unwrap();
    let m = trainer.run_epoch(&data).unwrap();
    assert_eq!(m.epoch, 1);
    for (name, v) in m.loss.components() {
        assert!(v.is_finite(), "{name}");
    }
    assert!(m.val_error.is_finite() && (0.0..=1.0).contains(&m.d_accuracy));
    let line = m.to_line();
    assert_eq!(line.split('\t').count(), 8);
    assert!(line.split('\t').skip(1).all(|f| f.parse::<f64>().unwrap().is_finite()));
}

#[test]
fn total_is_the_sum_of_its_components() {
    let data = tiny_data(6, 16, [0.5, 0.25, 0.25]);
    let arch = Architecture { n: 4, width: 8, ..Architecture::default() };
    let mut trainer = Trainer::new(arch, small_train_config(), &data).unwrap();
    let l = trainer.run_epoch(&data).unwrap().loss;
    let sum = l.adversarial + l.reconstruction + l.variance_penalty + l.coarse;
    assert!((l.total - sum).abs() <= 1e-5 * l.total.abs().max(1.0));
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(f)
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    single_threaded(|| {
        let data = tiny_data(8, 16, [0.5, 0.25, 0.25]);
        let arch = Architecture { n: 4, width: 8, ..Architecture::default() };
        let mut straight = Trainer::new(arch.clone(), small_train_config(), &data).unwrap();
        let full: Vec<String> = (0..3).map(|_| straight.run_epoch(&data).unwrap().to_line()).collect();

        let mut first = Trainer::new(arch, small_train_config(), &data).unwrap();
        let mut lines: Vec<String> = (0..2).map(|_| first.run_epoch(&data).unwrap().to_line()).collect();
        let bytes = checkpoint::to_bytes(&first, "echo");
        let loaded = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.config_echo, "echo");
        assert_eq!(checkpoint::to_bytes(&loaded.trainer, "echo"), bytes);
        let mut resumed = loaded.trainer;
        lines.push(resumed.run_epoch(&data).unwrap().to_line());
        assert_eq!(lines, full);
        assert_eq!(checkpoint::to_bytes(&resumed, ""), checkpoint::to_bytes(&straight, ""));
    });
}

#[test]
fn same_seed_gives_identical_runs() {
    single_threaded(|| {
        let data = tiny_data(6, 16, [0.5, 0.25, 0.25]);
        let arch = Architecture { n: 4, width: 8, ..Architecture::default() };
        let run = || {
            let mut t = Trainer::new(arch.clone(), small_train_config(), &data).unwrap();
            let log: Vec<String> = (0..2).map(|_| t.run_epoch(&data).unwrap().to_line()).collect();
            (log, checkpoint::to_bytes(&t, ""))
        };
        assert_eq!(run(), run());
    });
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let data = tiny_data(4, 16, [0.5, 0.25, 0.25]);
    let arch = Architecture { n: 4, width: 8, ..Architecture::default() };
    let t = Trainer::new(arch, small_train_config(), &data).unwrap();
    let bytes = checkpoint::to_bytes(&t, "");
    let mismatch = |b: &[u8]| matches!(checkpoint::from_bytes(b), Err(Error::CheckpointMismatch { .. }));

    assert!(mismatch(&bytes[..bytes.len() - 3]));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(mismatch(&magic));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(checkpoint::from_bytes(&version), Err(Error::CheckpointMismatch { version: 9, .. })));
    // Stored width 8 -> 16: every tensor shape now disagrees with the rebuilt model.
    let width_at = 4 + 4 + 8 + 8;
    let mut wider = bytes.clone();
    wider[width_at] = 16;
    match checkpoint::from_bytes(&wider) {
        Err(Error::CheckpointMismatch { msg, .. }) => assert!(msg.contains("shape"), "{msg}"),
        other => panic!("expected mismatch, got {:?}", other.map(|c| c.trainer.epoch)),
    }
}

#[test]
fn invalid_training_configs_are_rejected() {
    let data = tiny_data(4, 16, [0.5, 0.25, 0.25]);
    let arch = Architecture { n: 4, width: 8, ..Architecture::default() };
    for cfg in [
        TrainConfig { batch_size: 1, ..small_train_config() },
        TrainConfig { smoothing: 0.5, ..small_train_config() },
        TrainConfig { smoothing: 1.1, ..small_train_config() },
    ] {
        assert!(Trainer::new(arch.clone(), cfg, &data).is_err());
    }
}

