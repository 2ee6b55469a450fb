//! Finite-difference gradient battery over every tape primitive and the
//! full model with its loss.

use moct_autodiff::{gradcheck, AutodiffError, BatchNormState, DiffArray, GradcheckOptions, NormMode, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::model::{BoundParams, Model, Phase};
use crate::training::{combined_loss, DICE_EPS};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst relative error over all seeds.
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub seeds: u64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct BatteryOptions {
    /// Random instances per primitive.
    pub seeds: u64,
    /// Adds a primitive with a deliberately wrong backward pass.
    pub inject_fault: bool,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        Self { seeds: 20, inject_fault: false }
    }
}

type Check = fn(&mut Tape<f64>, &[Var], &Instance) -> moct_autodiff::Result<Var>;

/// Non-differentiable side inputs of one random instance.
struct Instance {
    labels: Vec<usize>,
    onehot: Vec<f64>,
    bn: BatchNormState<f64>,
    stride: usize,
    axis: usize,
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DiffArray<f64> {
    let n = shape.iter().product();
    DiffArray::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap().with_grad()
}

/// Contracts an output with fixed random weights so every upstream gradient
/// element is distinct.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> moct_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let w = tape.constant(&shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn instance(rng: &mut ChaCha8Rng, seed: u64) -> Instance {
    let labels: Vec<usize> = (0..32).map(|_| rng.random_range(0..3)).collect();
    let mut onehot = vec![0.0; 96];
    for (i, &l) in labels.iter().enumerate() {
        onehot[((i / 16) * 3 + l) * 16 + i % 16] = 1.0;
    }
    let mut bn = BatchNormState::new(3);
    bn.running_mean = vec![0.1, -0.2, 0.3];
    bn.running_var = vec![0.5, 1.5, 2.0];
    Instance { labels, onehot, bn, stride: 1 + (seed as usize % 2), axis: (seed % 2) as usize }
}

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Check)> {
    vec![
        ("conv2d", vec![vec![2, 3, 6, 6], vec![4, 3, 3, 3], vec![4]], |t, v, i| t.conv2d(v[0], v[1], Some(v[2]), i.stride, 1)),
        ("batchnorm2d_train", vec![vec![2, 3, 3, 3], vec![3], vec![3]], |t, v, i| {
            Ok(t.batchnorm2d(v[0], v[1], v[2], &i.bn, NormMode::Train, 1e-5)?.0)
        }),
        ("batchnorm2d_eval", vec![vec![2, 3, 3, 3], vec![3], vec![3]], |t, v, i| {
            Ok(t.batchnorm2d(v[0], v[1], v[2], &i.bn, NormMode::Eval, 1e-5)?.0)
        }),
        ("relu", vec![vec![3, 7]], |t, v, _| Ok(t.relu(v[0]))),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v, _| t.add(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v, _| t.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |t, v, _| Ok(t.scale(v[0], -1.3))),
        ("add_broadcast", vec![vec![2, 3, 4], vec![3, 4]], |t, v, _| t.add_broadcast(v[0], v[1])),
        ("concat", vec![vec![2, 1, 4], vec![2, 3, 4]], |t, v, _| t.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![2, 5, 3]], |t, v, _| t.slice(v[0], 1, 1, 3)),
        ("add_to_rows", vec![vec![2, 5, 3], vec![2, 3, 3]], |t, v, _| t.add_to_rows(v[0], v[1], 1)),
        ("gather", vec![vec![4, 6]], |t, v, _| t.gather(v[0], &[3, 8], (0..24).map(|i| (i * 7) % 24).collect())),
        ("reshape", vec![vec![2, 6]], |t, v, _| t.reshape(v[0], &[3, 4])),
        ("sum", vec![vec![2, 3]], |t, v, _| Ok(t.sum(v[0]))),
        ("mean", vec![vec![2, 3]], |t, v, _| Ok(t.mean(v[0]))),
        ("maxpool2d", vec![vec![2, 2, 4, 6]], |t, v, _| t.maxpool2d(v[0])),
        ("linear", vec![vec![3, 5, 6], vec![4, 6], vec![4]], |t, v, _| t.linear(v[0], v[1], Some(v[2]))),
        ("layernorm", vec![vec![3, 5, 6], vec![6], vec![6]], |t, v, _| t.layernorm(v[0], v[1], v[2], 1e-5)),
        ("softmax", vec![vec![3, 4, 5]], |t, v, i| t.softmax(v[0], 1 + i.axis)),
        ("attention", vec![vec![5, 8], vec![5, 8], vec![5, 8]], |t, v, _| t.attention(v[0], v[1], v[2], 2)),
        ("cross_entropy", vec![vec![2, 3, 4, 4]], |t, v, i| t.cross_entropy(v[0], &i.labels)),
        ("soft_dice", vec![vec![2, 3, 4, 4]], |t, v, i| {
            let p = t.softmax(v[0], 1)?;
            t.soft_dice(p, &i.onehot, 1.0)
        }),
    ]
}

/// `x^2` whose backward claims `x` instead of `2x`.
fn faulty_square(t: &mut Tape<f64>, v: &[Var], _: &Instance) -> moct_autodiff::Result<Var> {
    let y: Vec<f64> = t.value(v[0]).iter().map(|a| a * a).collect();
    let shape = t.shape(v[0]).to_vec();
    t.custom(&[v[0]], &shape, y, |ins, _, g| vec![ins[0].iter().zip(g).map(|(a, b)| a * b).collect()])
}

fn run_primitive(name: &str, shapes: &[Vec<usize>], f: Check, seeds: u64) -> Result<CheckOutcome, AutodiffError> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<DiffArray<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let inst = instance(&mut rng, seed);
        let err = gradcheck(&inputs, |t, v| {
            let out = f(t, v, &inst)?;
            probe(t, out, seed)
        }, &GradcheckOptions::default())?;
        worst = worst.max(err);
    }
    Ok(CheckOutcome { name: name.into(), max_relative_error: worst, tolerance: PRIMITIVE_TOLERANCE, seeds })
}

/// Full forward pass of a small model plus the combined loss, in train mode,
/// with respect to every parameter tensor and the input.
pub fn model_gradcheck(seed: u64) -> Result<f64, AutodiffError> {
    let cfg = ModelConfig { c_base: 8, heads: 2, image_hw: 16, ..ModelConfig::desk() };
    let model: Model<f64> = Model::new(cfg, seed).map_err(|e| AutodiffError::InvalidArgument { op: "model", detail: e.to_string() })?;
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let mut inputs: Vec<DiffArray<f64>> = model.params.iter().map(|(_, v)| v.clone()).collect();
    for arr in inputs.iter_mut() {
        // Move biases and affine terms off their symmetric initial values.
        for v in arr.data_mut() {
            *v += 0.1 * rng.random_range(-1.0..1.0);
        }
    }
    let n = 2;
    inputs.push(random(&[n, 3, 16, 16], &mut rng));
    let labels: Vec<usize> = (0..n * 256).map(|_| rng.random_range(0..2)).collect();
    let tasks = [2, 3];
    let f = |tape: &mut Tape<f64>, vars: &[Var]| {
        let to_ad = |e: crate::Error| AutodiffError::InvalidArgument { op: "model", detail: e.to_string() };
        let bound = BoundParams::from_map(names.iter().cloned().zip(vars.iter().copied()).collect());
        let out = model.forward(tape, &bound, vars[names.len()], &tasks, Phase::Train).map_err(to_ad)?;
        combined_loss(tape, out.logits, &labels, &[1.0, 0.7], DICE_EPS).map_err(to_ad)
    };
    let opts = GradcheckOptions { max_elements_per_input: Some(4), seed, one_sided_at_kinks: true, ..Default::default() };
    gradcheck(&inputs, f, &opts)
}

/// Runs every check; a failing comparison is reported, not raised.
pub fn run_battery(opts: &BatteryOptions) -> crate::Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (name, shapes, f) in primitives() {
        out.push(run_primitive(name, &shapes, f, opts.seeds)?);
    }
    if opts.inject_fault {
        out.push(run_primitive("faulty_square", &[vec![6]], faulty_square, 1)?);
    }
    let mut worst: f64 = 0.0;
    for seed in 0..opts.seeds {
        worst = worst.max(model_gradcheck(seed)?);
    }
    out.push(CheckOutcome {
        name: "model+combined_loss".into(),
        max_relative_error: worst,
        tolerance: COMPOSITE_TOLERANCE,
        seeds: opts.seeds,
    });
    Ok(out)
}
