//! Central finite-difference checks of every differentiable graph op and of
//! the composed adversarial objective, in 64-bit arithmetic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gan::{discriminator_loss, generator_loss, Architecture, ClipStats, DiscMode, GanModel, Group, LossOptions};
use crate::tensor::{BnMode, ConvSpec, Graph, Tensor, Var};

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-5;
pub const ABS_TOL: f64 = 1e-7;
/// Elements per input checked at most (a deterministic sample beyond that).
pub const MAX_ELEMENTS: usize = 600;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Analytic gradient multiplied by `1 + factor` for the named case, to show
/// the checker catches a wrong gradient.
#[derive(Clone, Debug, Default)]
pub struct Perturbation {
    pub case: String,
    pub factor: f64,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: String,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

/// Absolute and relative error, and whether they pass. The relative error
/// is reported as 0 for gradients below `ABS_TOL / REL_TOL`, where only the
/// absolute bound applies.
fn within(a: f64, n: f64) -> (f64, f64, bool) {
    let abs = (a - n).abs();
    let mag = a.abs().max(n.abs());
    let rel = if mag < ABS_TOL / REL_TOL { 0.0 } else { abs / mag };
    (abs, rel, abs < ABS_TOL || rel < REL_TOL)
}

fn sample_indices(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_ELEMENTS {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, len, MAX_ELEMENTS).into_vec();
    idx.sort_unstable();
    idx
}

/// Projects a tensor output onto fixed random weights so every element matters.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wv = g.constant(Tensor::new(shape, w)?);
    let m = g.mul(out, wv)?;
    Ok(g.sum(m))
}

fn check_case(case: &Case, perturb: Option<&Perturbation>, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = (case.build)(&mut g, &vars)?;
        let loss = project(&mut g, out, 0x5eed)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = project(&mut g, out, 0x5eed)?;
    let grads = g.backward(loss)?;
    let scale = match perturb {
        Some(p) if p.case == case.name => 1.0 + p.factor,
        _ => 1.0,
    };

    let mut result = CheckResult { name: case.name.clone(), checked: 0, max_abs_error: 0.0, max_rel_error: 0.0, passed: true };
    let mut inputs = case.inputs.clone();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v);
        for i in sample_indices(inputs[k].len(), rng) {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + STEP;
            let up = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig - STEP;
            let down = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let (abs, rel, ok) = within(analytic.data()[i] * scale, numeric);
            result.checked += 1;
            result.max_abs_error = result.max_abs_error.max(abs);
            result.max_rel_error = result.max_rel_error.max(rel);
            result.passed &= ok;
        }
    }
    Ok(result)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero so piecewise-linear ops stay on one side of the kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn conv_case(rng: &mut ChaCha8Rng, spec: ConvSpec, side: usize, cin: usize) -> Case {
    let k = spec.kernel;
    let name = format!("conv3d K{}S{}D{}", k, spec.stride, spec.dilation);
    Case {
        name,
        inputs: vec![
            uniform(rng, &[2, side, side, side, cin], -1.0, 1.0),
            uniform(rng, &[k, k, k, cin, spec.channels_out], -0.5, 0.5),
            uniform(rng, &[spec.channels_out], -0.5, 0.5),
        ],
        build: Box::new(move |g, v| g.conv3d(v[0], v[1], v[2], &spec)),
    }
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut cases = vec![
        conv_case(rng, ConvSpec::new(3, 3, 1), 5, 2),
        conv_case(rng, ConvSpec::new(3, 3, 2), 6, 2),
        conv_case(rng, ConvSpec::new(3, 2, 1).dilated(2), 6, 2),
        conv_case(rng, ConvSpec::new(3, 2, 1).dilated(4), 6, 2),
        conv_case(rng, ConvSpec::new(1, 3, 2), 6, 2),
        conv_case(rng, ConvSpec::new(1, 3, 1), 4, 3),
    ];
    cases.push(Case {
        name: "dense".into(),
        inputs: vec![uniform(rng, &[3, 5], -1.0, 1.0), uniform(rng, &[5, 2], -1.0, 1.0), uniform(rng, &[2], -1.0, 1.0)],
        build: Box::new(|g, v| g.dense(v[0], v[1], v[2])),
    });
    cases.push(Case {
        name: "reshape".into(),
        inputs: vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| g.reshape(v[0], &[6, 4])),
    });
    cases.push(Case {
        name: "leaky_relu".into(),
        inputs: vec![off_zero(rng, &[4, 5])],
        build: Box::new(|g, v| Ok(g.leaky_relu(v[0], 0.3))),
    });
    cases.push(Case {
        name: "sigmoid".into(),
        inputs: vec![uniform(rng, &[4, 5], -4.0, 4.0)],
        build: Box::new(|g, v| Ok(g.sigmoid(v[0]))),
    });
    cases.push(Case {
        name: "batch_norm (train)".into(),
        inputs: vec![uniform(rng, &[2, 3, 3, 3, 4], -1.0, 1.0), uniform(rng, &[4], 0.5, 1.5), uniform(rng, &[4], -0.5, 0.5)],
        build: Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train, 1e-3)?.0)),
    });
    let (mean, var) = (vec![0.1, -0.2, 0.0], vec![0.5, 1.5, 2.0]);
    cases.push(Case {
        name: "batch_norm (eval)".into(),
        inputs: vec![uniform(rng, &[2, 2, 2, 2, 3], -1.0, 1.0), uniform(rng, &[3], 0.5, 1.5), uniform(rng, &[3], -0.5, 0.5)],
        build: Box::new(move |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var }, 1e-3)?.0)),
    });
    let mut clipped = uniform(rng, &[4, 3], -2.0, 2.0);
    for v in clipped.data_mut() {
        // Keep clear of the bounds at +-1.
        if (v.abs() - 1.0).abs() < 0.05 {
            *v *= 1.2;
        }
    }
    cases.push(Case {
        name: "clip".into(),
        inputs: vec![clipped],
        build: Box::new(|g, v| g.clip(v[0], &[-1.0, -1.0, -1.0], &[1.0, 1.0, 1.0])),
    });
    cases.push(Case {
        name: "mean_channels".into(),
        inputs: vec![uniform(rng, &[2, 2, 2, 2, 3], -1.0, 1.0)],
        build: Box::new(|g, v| Ok(g.mean_channels(v[0]))),
    });
    for squared in [false, true] {
        let (a, b) = separated_pairs(rng, 12);
        cases.push(Case {
            name: if squared { "symmetric_l2 (squared)" } else { "symmetric_l2" }.into(),
            inputs: vec![a, b],
            build: Box::new(move |g, v| g.symmetric_l2(v[0], v[1], squared)),
        });
    }
    cases.push(Case {
        name: "exp".into(),
        inputs: vec![uniform(rng, &[3, 4], -2.0, 2.0)],
        build: Box::new(|g, v| Ok(g.exp(v[0]))),
    });
    cases.push(Case {
        name: "ln".into(),
        inputs: vec![uniform(rng, &[3, 4], 0.2, 3.0)],
        build: Box::new(|g, v| Ok(g.ln(v[0]))),
    });
    cases.push(Case {
        name: "affine".into(),
        inputs: vec![uniform(rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| Ok(g.affine(v[0], -1.7, 0.4))),
    });
    cases.push(Case {
        name: "add".into(),
        inputs: vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| g.add(v[0], v[1])),
    });
    cases.push(Case {
        name: "mul".into(),
        inputs: vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| g.mul(v[0], v[1])),
    });
    cases.push(Case {
        name: "sum".into(),
        inputs: vec![uniform(rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| Ok(g.sum(v[0]))),
    });
    cases.push(Case {
        name: "mean".into(),
        inputs: vec![uniform(rng, &[3, 4], -1.0, 1.0)],
        build: Box::new(|g, v| Ok(g.mean(v[0]))),
    });
    cases.push(Case {
        name: "paste".into(),
        inputs: vec![uniform(rng, &[2, 2, 2, 2, 3], -1.0, 1.0), uniform(rng, &[2, 4, 4, 4, 3], -1.0, 1.0)],
        build: Box::new(|g, v| g.paste(v[0], v[1], 1)),
    });
    cases
}

/// Vector pairs whose two symmetric branches differ clearly and whose distance is not near zero.
fn separated_pairs(rng: &mut ChaCha8Rng, count: usize) -> (Tensor<f64>, Tensor<f64>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    while a.len() < 3 * count {
        let x: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let y: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let (m, p) = crate::field::branch_norms_sq(x, y);
        if (m - p).abs() > 0.05 && m.min(p) > 0.01 {
            a.extend(x);
            b.extend(y);
        }
    }
    let shape = vec![count, 1, 1, 1, 3];
    (Tensor::new(shape.clone(), a).expect("shape"), Tensor::new(shape, b).expect("shape"))
}

/// Small model and batch for the composed checks.
fn toy_model(seed: u64) -> Result<(GanModel<f64>, Tensor<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture { n: 2, width: 4, ..Architecture::default() };
    let mut model = GanModel::<f64>::new(arch, &mut rng)?;
    // Wide clip bounds keep every output off the clip kink.
    model.clip = Some(ClipStats { mean: [0.0; 3], std: [100.0; 3] });
    let mut ctx = uniform(&mut rng, &[2, 4, 4, 4, 3], -1.0, 1.0);
    for x in 1..3 {
        for y in 1..3 {
            for z in 1..3 {
                for b in 0..2 {
                    let base = (((b * 4 + x) * 4 + y) * 4 + z) * 3;
                    ctx.data_mut()[base..base + 3].fill(0.0);
                }
            }
        }
    }
    let real = uniform(&mut rng, &[2, 2, 2, 2, 3], -1.0, 1.0);
    Ok((model, ctx, real))
}

#[derive(Clone, Copy)]
enum Objective {
    /// Full generator objective; returns (total, coarse term).
    Generator,
    Discriminator,
}

fn objective(model: &GanModel<f64>, ctx: &Tensor<f64>, real: &Tensor<f64>, which: Objective) -> Result<(Graph<f64>, Vec<Var>, Var, Var)> {
    let all = [Group::Coarse, Group::Fine, Group::Discriminator];
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &all, &all);
    let vars = (0..model.params().len()).map(|i| model.var(&bound, i)).collect();
    let c = g.constant(ctx.clone());
    let out = model.generator_forward(&mut g, &bound, c)?;
    match which {
        Objective::Generator => {
            let (d, _) = model.discriminator_forward(&mut g, &bound, out.patch, c, DiscMode::Train)?;
            let t = g.constant(real.clone());
            let opts = LossOptions::default();
            let l = generator_loss(&mut g, t, out.patch, out.logvar, Some(d), Some(out.coarse), &opts)?;
            Ok((g, vars, l.total, l.coarse))
        }
        Objective::Discriminator => {
            let fake = g.detach(out.patch);
            let r = g.constant(real.clone());
            let (rp, _) = model.discriminator_forward(&mut g, &bound, r, c, DiscMode::Train)?;
            let (fp, _) = model.discriminator_forward(&mut g, &bound, fake, c, DiscMode::Train)?;
            let l = discriminator_loss(&mut g, rp, fp, 0.9)?;
            Ok((g, vars, l, l))
        }
    }
}

/// Checks parameter gradients of one objective. Coarse parameters are
/// compared against the coarse reconstruction term alone, since the coarse
/// output reaches the rest of the objective only through a gradient stop.
fn check_composed(name: &str, which: Objective, groups: &[Group], perturb: Option<&Perturbation>, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let (mut model, ctx, real) = toy_model(7)?;
    let (mut g, vars, total, _) = objective(&model, &ctx, &real, which)?;
    let grads = g.backward(total)?;
    let scale = match perturb {
        Some(p) if p.case == name => 1.0 + p.factor,
        _ => 1.0,
    };
    let mut result = CheckResult { name: name.into(), checked: 0, max_abs_error: 0.0, max_rel_error: 0.0, passed: true };
    for (p, &var) in vars.iter().enumerate().take(model.params().len()) {
        let group = model.params()[p].group;
        if !groups.contains(&group) {
            continue;
        }
        let analytic = grads.get_or_zeros(var);
        let value_at = |m: &GanModel<f64>| -> Result<f64> {
            let (g, _, total, coarse) = objective(m, &ctx, &real, which)?;
            let target = if group == Group::Coarse && matches!(which, Objective::Generator) { coarse } else { total };
            Ok(g.value(target).item())
        };
        for i in sample_indices(model.params()[p].value.len(), rng) {
            let orig = model.params()[p].value.data()[i];
            model.params_mut()[p].value.data_mut()[i] = orig + STEP;
            let up = value_at(&model)?;
            model.params_mut()[p].value.data_mut()[i] = orig - STEP;
            let down = value_at(&model)?;
            model.params_mut()[p].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let (abs, rel, ok) = within(analytic.data()[i] * scale, numeric);
            result.checked += 1;
            result.max_abs_error = result.max_abs_error.max(abs);
            result.max_rel_error = result.max_rel_error.max(rel);
            result.passed &= ok;
        }
    }
    Ok(result)
}

/// Names of every case in [`run_suite`], in order.
pub fn case_names() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut names: Vec<String> = op_cases(&mut rng).into_iter().map(|c| c.name).collect();
    names.extend(COMPOSED.iter().map(|s| s.to_string()));
    names
}

const COMPOSED: [&str; 3] = ["generator objective (coarse)", "generator objective (fine + discriminator)", "discriminator objective"];

pub fn run_suite(perturb: Option<&Perturbation>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x67726164);
    let mut results = Vec::new();
    for case in op_cases(&mut rng) {
        results.push(check_case(&case, perturb, &mut rng)?);
    }
    results.push(check_composed(COMPOSED[0], Objective::Generator, &[Group::Coarse], perturb, &mut rng)?);
    results.push(check_composed(COMPOSED[1], Objective::Generator, &[Group::Fine, Group::Discriminator], perturb, &mut rng)?);
    results.push(check_composed(COMPOSED[2], Objective::Discriminator, &[Group::Discriminator], perturb, &mut rng)?);
    Ok(results)
}
