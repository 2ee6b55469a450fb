use std::collections::BTreeMap;

use moct_autodiff::{BatchNormState, DiffArray, Gradients, Real, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    /// Normal(0, 0.02).
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn push(out: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(ParamSpec { name, shape, init });
}

pub fn conv_spec(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
    push(out, format!("{prefix}.w"), vec![cout, cin, k, k], Init::FanIn(cin * k * k));
    if bias {
        push(out, format!("{prefix}.b"), vec![cout], Init::Zeros);
    }
}

fn norm_spec(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    push(out, format!("{prefix}.gamma"), vec![c], Init::Ones);
    push(out, format!("{prefix}.beta"), vec![c], Init::Zeros);
}

fn linear_spec(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize, bias: bool) {
    push(out, format!("{prefix}.w"), vec![dout, din], Init::FanIn(din));
    if bias {
        push(out, format!("{prefix}.b"), vec![dout], Init::Zeros);
    }
}

pub(crate) fn resconv_spec(out: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    conv_spec(out, &format!("{prefix}.conv1"), cin, cout, 3, false);
    norm_spec(out, &format!("{prefix}.bn1"), cout);
    conv_spec(out, &format!("{prefix}.conv2"), cout, cout, 3, false);
    norm_spec(out, &format!("{prefix}.bn2"), cout);
    conv_spec(out, &format!("{prefix}.skip"), cin, cout, 1, false);
    norm_spec(out, &format!("{prefix}.bnskip"), cout);
}

pub(crate) fn block_spec(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, expansion: usize) {
    norm_spec(out, &format!("{prefix}.ln1"), d);
    linear_spec(out, &format!("{prefix}.attn.q"), d, d, true);
    linear_spec(out, &format!("{prefix}.attn.k"), d, d, false);
    linear_spec(out, &format!("{prefix}.attn.v"), d, d, true);
    linear_spec(out, &format!("{prefix}.attn.o"), d, d, true);
    norm_spec(out, &format!("{prefix}.ln2"), d);
    linear_spec(out, &format!("{prefix}.ffn.fc1"), d, expansion * d, true);
    linear_spec(out, &format!("{prefix}.ffn.fc2"), expansion * d, d, true);
}

pub const BLOCKS_PER_LEVEL: usize = 3;

/// Every learnable tensor of the network, in construction order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for level in 0..cfg.levels {
        let cin = if level == 0 { cfg.in_channels } else { cfg.enc_channels(level - 1) };
        resconv_spec(&mut out, &format!("enc.{level}"), cin, cfg.enc_channels(level));
        conv_spec(&mut out, &format!("pff.{level}"), cfg.enc_channels(level), cfg.reduced_channels(level), 1, true);
    }
    let deepest = cfg.levels - 1;
    push(&mut out, "dec.pos_embed".into(), vec![cfg.seq_len(), cfg.token_dim(deepest)], Init::Embedding);
    for level in (0..cfg.levels).rev() {
        if level < deepest {
            linear_spec(&mut out, &format!("dec.{level}.proj"), cfg.token_dim(level + 1), cfg.token_dim(level), true);
        }
        for b in 0..BLOCKS_PER_LEVEL {
            block_spec(&mut out, &format!("dec.{level}.block{b}"), cfg.token_dim(level), cfg.ffn_expansion);
        }
    }
    conv_spec(&mut out, "head", cfg.reduced_channels(0), cfg.n_classes, 3, true);
    out
}

/// Names of the batch-normalization layers, which carry running statistics.
pub fn batchnorm_layers(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for level in 0..cfg.levels {
        for bn in ["bn1", "bn2", "bnskip"] {
            out.push((format!("enc.{level}.{bn}"), cfg.enc_channels(level)));
        }
    }
    out
}

/// Number of learnable scalars. The task token is a fixed input, not a
/// parameter, and running statistics are not learnable.
pub fn count_params(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(|p| p.shape.iter().product::<usize>()).sum()
}

/// Learnable tensors plus batch-normalization running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, DiffArray<T>>,
    norms: BTreeMap<String, BatchNormState<T>>,
}

/// Tape handles of every parameter for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }
}

impl<T: Real> ParameterStore<T> {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for spec in layout(cfg) {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); numel],
                Init::Ones => vec![T::one(); numel],
                Init::FanIn(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                    (0..numel).map(|_| T::lit(normal.sample(&mut rng))).collect()
                }
                Init::Embedding => {
                    let normal = Normal::new(0.0, 0.02).unwrap();
                    (0..numel).map(|_| T::lit(normal.sample(&mut rng))).collect()
                }
            };
            let arr = DiffArray::new(&spec.shape, data)?.with_grad();
            if params.insert(spec.name.clone(), arr).is_some() {
                return Err(Error::Config(format!("duplicate parameter name {}", spec.name)));
            }
        }
        let norms = batchnorm_layers(cfg).into_iter().map(|(n, c)| (n, BatchNormState::new(c))).collect();
        Ok(Self { params, norms })
    }

    /// Assembles a store from raw tensors, checking them against `cfg`.
    /// Reports the first tensor (in layout order) that is missing or misshapen.
    pub fn from_parts(
        cfg: &ModelConfig,
        mut params: BTreeMap<String, DiffArray<T>>,
        norms: BTreeMap<String, BatchNormState<T>>,
    ) -> Result<Self> {
        cfg.validate()?;
        for spec in layout(cfg) {
            match params.get_mut(&spec.name) {
                None => return Err(Error::Config(format!("missing tensor `{}`", spec.name))),
                Some(p) if p.shape() != spec.shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "tensor `{}` has shape {:?}, config expects {:?}",
                        spec.name,
                        p.shape(),
                        spec.shape
                    )))
                }
                Some(p) => p.set_requires_grad(true),
            }
        }
        let expected = layout(cfg).len();
        if params.len() != expected {
            let known: Vec<String> = layout(cfg).into_iter().map(|s| s.name).collect();
            let extra = params.keys().find(|k| !known.contains(k)).cloned().unwrap_or_default();
            return Err(Error::Config(format!("unexpected tensor `{extra}`")));
        }
        for (name, c) in batchnorm_layers(cfg) {
            match norms.get(&name) {
                Some(s) if s.running_mean.len() == c && s.running_var.len() == c => {}
                _ => return Err(Error::Config(format!("running statistics `{name}` missing or misshapen"))),
            }
        }
        Ok(Self { params, norms })
    }

    pub fn get(&self, name: &str) -> Option<&DiffArray<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DiffArray<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DiffArray<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DiffArray<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn norms(&self) -> &BTreeMap<String, BatchNormState<T>> {
        &self.norms
    }

    pub fn norm(&self, name: &str) -> &BatchNormState<T> {
        &self.norms[name]
    }

    pub fn norm_mut(&mut self, name: &str) -> Option<&mut BatchNormState<T>> {
        self.norms.get_mut(name)
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    /// Enrolls every parameter as a trainable leaf.
    pub fn bind(&mut self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams { vars: self.params.iter_mut().map(|(k, v)| (k.clone(), tape.enroll(v))).collect() }
    }

    /// Places every parameter on the tape as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let mut c = v.clone();
                c.set_requires_grad(false);
                (k.clone(), tape.leaf(&c))
            })
            .collect();
        BoundParams { vars }
    }

    /// Pulls gradients for all bound parameters out of a backward pass.
    pub fn absorb_grads(&mut self, grads: &Gradients<T>) {
        for p in self.params.values_mut() {
            p.absorb_grad(grads);
        }
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::lit(x.to_f64().unwrap())).collect();
        ParameterStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            norms: self
                .norms
                .iter()
                .map(|(k, s)| {
                    (k.clone(), BatchNormState { running_mean: conv(&s.running_mean), running_var: conv(&s.running_var) })
                })
                .collect(),
        }
    }
}
