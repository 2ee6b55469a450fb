//! Forward pass: CNN encoder, pyramid feature fusion, task-conditioned
//! transformer decoder and segmentation head.

use moct_autodiff::{BatchStats, NormMode, Real, Tape, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::params::{BoundParams, ParameterStore, BLOCKS_PER_LEVEL};
use crate::model::patches::{merge_index, partition_index};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    fn norm_mode(self) -> NormMode {
        match self {
            Phase::Train => NormMode::Train,
            Phase::Eval => NormMode::Eval,
        }
    }
}

/// Token sequence at one decoder level.
#[derive(Clone, Copy, Debug)]
pub struct TokenSet {
    /// `[N, n, d]` image tokens.
    pub image_tokens: Var,
    /// `[N, 1, d]` task token, if present.
    pub task_token: Option<Var>,
    pub level: usize,
}

/// Values recorded around one skip addition in the decoder.
#[derive(Clone, Copy, Debug)]
pub struct SkipAddition {
    pub level: usize,
    pub before: Var,
    pub after: Var,
}

pub struct ForwardOutput<T> {
    /// `[N, n_classes, H, W]`.
    pub logits: Var,
    pub features: Vec<Var>,
    pub pff_tokens: Vec<Var>,
    pub skip_additions: Vec<SkipAddition>,
    /// Sequence leaving each decoder level, deepest first.
    pub sequences: Vec<Var>,
    /// Batch statistics per normalization layer (train phase only).
    pub batch_stats: Vec<(String, BatchStats<T>)>,
}

/// A network definition plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParameterStore<T>,
}

/// One forward pass in progress. Exposes the network stages individually;
/// [`Model::forward`] chains them.
pub struct Forward<'a, T> {
    cfg: &'a ModelConfig,
    store: &'a ParameterStore<T>,
    p: &'a BoundParams,
    phase: Phase,
    stats: Vec<(String, BatchStats<T>)>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(model: &'a Model<T>, bound: &'a BoundParams, phase: Phase) -> Self {
        Self { cfg: &model.config, store: &model.params, p: bound, phase, stats: Vec::new() }
    }

    /// Batch statistics gathered so far (train phase).
    pub fn into_stats(self) -> Vec<(String, BatchStats<T>)> {
        self.stats
    }

    fn bn(&mut self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let (y, stats) = tape.batchnorm2d(
            x,
            self.p.get(&format!("{name}.gamma")),
            self.p.get(&format!("{name}.beta")),
            self.store.norm(name),
            self.phase.norm_mode(),
            T::lit(BN_EPS),
        )?;
        if let Some(s) = stats {
            self.stats.push((name.to_string(), s));
        }
        Ok(y)
    }

    fn conv_bn_relu(&mut self, tape: &mut Tape<T>, x: Var, conv: &str, bn: &str, pad: usize) -> Result<Var> {
        let c = tape.conv2d(x, self.p.get(&format!("{conv}.w")), None, 1, pad)?;
        let n = self.bn(tape, c, bn)?;
        Ok(tape.relu(n))
    }

    /// Two conv-BN-ReLU stages plus a conv-BN-ReLU skip branch, summed.
    pub fn resconv(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str) -> Result<Var> {
        let a = self.conv_bn_relu(tape, x, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), 1)?;
        let a = self.conv_bn_relu(tape, a, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), 1)?;
        let s = self.conv_bn_relu(tape, x, &format!("{prefix}.skip"), &format!("{prefix}.bnskip"), 0)?;
        Ok(tape.add(a, s)?)
    }

    /// Feature maps at the output of every level, before pooling.
    pub fn encoder(&mut self, tape: &mut Tape<T>, image: Var) -> Result<Vec<Var>> {
        let mut features = Vec::with_capacity(self.cfg.levels);
        let mut x = image;
        for level in 0..self.cfg.levels {
            let f = self.resconv(tape, x, &format!("enc.{level}"))?;
            features.push(f);
            if level + 1 < self.cfg.levels {
                x = tape.maxpool2d(f)?;
            }
        }
        Ok(features)
    }

    /// Channel reduction and patch partition: `[N, n, d_level]` tokens.
    pub fn pff(&mut self, tape: &mut Tape<T>, feature: Var, level: usize) -> Result<Var> {
        let p = self.p;
        let r = tape.conv2d(feature, p.get(&format!("pff.{level}.w")), Some(p.get(&format!("pff.{level}.b"))), 1, 0)?;
        let s = tape.shape(r).to_vec();
        let side = self.cfg.patch_side(level);
        let idx = partition_index(s[0], s[1], s[2], s[3], side);
        let d = side * side * s[1];
        Ok(tape.gather(r, &[s[0], self.cfg.n_tokens(), d], idx)?)
    }

    pub fn block(&mut self, tape: &mut Tape<T>, x: Var, prefix: &str, raw_rows: usize) -> Result<Var> {
        transformer_block(tape, self.p, x, prefix, self.cfg.heads, raw_rows)
    }

    /// Decoder and head. Returns the logits and the sequence leaving each
    /// level, deepest first.
    pub fn decoder(
        &mut self,
        tape: &mut Tape<T>,
        pff: &[Var],
        task_ids: &[usize],
        skips: &mut Vec<SkipAddition>,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = self.cfg;
        let deepest = cfg.levels - 1;
        let batch = tape.shape(pff[deepest])[0];
        let mut x = pff[deepest];
        let offset = usize::from(cfg.has_task_token());
        if cfg.has_task_token() {
            let token = task_token(tape, task_ids, cfg.token_dim(deepest))?;
            x = tape.concat(&[token, x], 1)?;
        }
        x = tape.add_broadcast(x, self.p.get("dec.pos_embed"))?;
        // The token enters attention un-normalized once, where it is inserted.
        for b in 0..BLOCKS_PER_LEVEL {
            let raw_rows = if b == 0 { offset } else { 0 };
            x = self.block(tape, x, &format!("dec.{deepest}.block{b}"), raw_rows)?;
        }
        let mut sequences = vec![x];
        for level in (0..deepest).rev() {
            let proj = format!("dec.{level}.proj");
            x = tape.linear(x, self.p.get(&format!("{proj}.w")), Some(self.p.get(&format!("{proj}.b"))))?;
            let before = x;
            x = tape.add_to_rows(x, pff[level], offset)?;
            skips.push(SkipAddition { level, before, after: x });
            for b in 0..BLOCKS_PER_LEVEL {
                x = self.block(tape, x, &format!("dec.{level}.block{b}"), 0)?;
            }
            sequences.push(x);
        }
        if cfg.has_task_token() {
            x = tape.slice(x, 1, 1, cfg.n_tokens())?;
        }
        let c = cfg.reduced_channels(0);
        let hw = cfg.image_hw;
        let merged = tape.gather(x, &[batch, c, hw, hw], merge_index(batch, c, hw, hw, cfg.patch_side(0)))?;
        let logits = tape.conv2d(merged, self.p.get("head.w"), Some(self.p.get("head.b")), 1, 1)?;
        Ok((logits, sequences))
    }
}

/// `[N, 1, d]` constant rows filled with each sample's task index.
pub fn task_token<T: Real>(tape: &mut Tape<T>, task_ids: &[usize], d: usize) -> Result<Var> {
    let data = task_ids.iter().flat_map(|&k| std::iter::repeat_n(T::from_usize(k).unwrap(), d)).collect();
    Ok(tape.constant(&[task_ids.len(), 1, d], data)?)
}

/// Pre-norm transformer block: `t = x + MHA(LN(x)); out = t + FFN(LN(t))`.
/// The first `raw_rows` tokens bypass the attention pre-norm. A task token is
/// a constant row, and per-token LN would map every task id to the same vector.
pub fn transformer_block<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    x: Var,
    prefix: &str,
    heads: usize,
    raw_rows: usize,
) -> Result<Var> {
    let g = |s: &str| p.get(&format!("{prefix}.{s}"));
    let h = norm_rows(tape, x, g("ln1.gamma"), g("ln1.beta"), raw_rows)?;
    let q = tape.linear(h, g("attn.q.w"), Some(g("attn.q.b")))?;
    let k = tape.linear(h, g("attn.k.w"), None)?;
    let v = tape.linear(h, g("attn.v.w"), Some(g("attn.v.b")))?;
    let a = tape.attention(q, k, v, heads)?;
    let o = tape.linear(a, g("attn.o.w"), Some(g("attn.o.b")))?;
    let t = tape.add(x, o)?;
    let h = tape.layernorm(t, g("ln2.gamma"), g("ln2.beta"), T::lit(LN_EPS))?;
    let f = tape.linear(h, g("ffn.fc1.w"), Some(g("ffn.fc1.b")))?;
    let f = tape.relu(f);
    let f = tape.linear(f, g("ffn.fc2.w"), Some(g("ffn.fc2.b")))?;
    Ok(tape.add(t, f)?)
}

/// Layer norm over every token except the leading `raw_rows`.
fn norm_rows<T: Real>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, raw_rows: usize) -> Result<Var> {
    let eps = T::lit(LN_EPS);
    if raw_rows == 0 {
        return Ok(tape.layernorm(x, gamma, beta, eps)?);
    }
    let shape = tape.shape(x).to_vec();
    let axis = shape.len() - 2;
    let n = shape[axis];
    let raw = tape.slice(x, axis, 0, raw_rows)?;
    let rest = tape.slice(x, axis, raw_rows, n - raw_rows)?;
    let rest = tape.layernorm(rest, gamma, beta, eps)?;
    Ok(tape.concat(&[raw, rest], axis)?)
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParameterStore::init(&config, seed)?;
        Ok(Self { config, params })
    }

    fn check_input(&self, tape: &Tape<T>, slab: Var, task_ids: &[usize]) -> Result<()> {
        let cfg = &self.config;
        let s = tape.shape(slab);
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_hw || s[3] != cfg.image_hw {
            return Err(Error::Config(format!(
                "input {s:?} does not match [N, {}, {}, {}]",
                cfg.in_channels, cfg.image_hw, cfg.image_hw
            )));
        }
        if cfg.has_task_token() {
            if task_ids.len() != s[0] {
                return Err(Error::Config(format!("{} task ids for a batch of {}", task_ids.len(), s[0])));
            }
            if let Some(&bad) = task_ids.iter().find(|&&k| k == 0 || k > cfg.n_tasks) {
                return Err(Error::Config(format!("task id {bad} outside [1, {}]", cfg.n_tasks)));
            }
        }
        Ok(())
    }

    /// Full forward pass on a `[N, in_channels, H, W]` slab. `task_ids` holds
    /// one id per sample and is ignored by the base architecture.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        slab: Var,
        task_ids: &[usize],
        phase: Phase,
    ) -> Result<ForwardOutput<T>> {
        self.check_input(tape, slab, task_ids)?;
        let mut fwd = Forward::new(self, bound, phase);
        let features = fwd.encoder(tape, slab)?;
        let pff_tokens =
            features.iter().enumerate().map(|(l, &f)| fwd.pff(tape, f, l)).collect::<Result<Vec<_>>>()?;
        let mut skip_additions = Vec::new();
        let (logits, sequences) = fwd.decoder(tape, &pff_tokens, task_ids, &mut skip_additions)?;
        Ok(ForwardOutput { logits, features, pff_tokens, skip_additions, sequences, batch_stats: fwd.into_stats() })
    }

    /// Folds batch statistics from a training forward pass into the running
    /// statistics.
    pub fn update_norms(&mut self, stats: &[(String, BatchStats<T>)]) {
        for (name, s) in stats {
            if let Some(state) = self.params.norm_mut(name) {
                state.update(s, T::lit(BN_MOMENTUM));
            }
        }
    }

    /// Inference helper: logits for a batch of slabs, no gradient tracking.
    pub fn predict_logits(&self, slabs: &[T], batch: usize, task_ids: &[usize]) -> Result<(Vec<usize>, Vec<T>)> {
        let cfg = &self.config;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let x = tape.constant(&[batch, cfg.in_channels, cfg.image_hw, cfg.image_hw], slabs.to_vec())?;
        let out = self.forward(&mut tape, &bound, x, task_ids, Phase::Eval)?;
        Ok((tape.shape(out.logits).to_vec(), tape.value(out.logits).to_vec()))
    }

    /// Image tokens and task token of one sample at `level` given the
    /// sequence node produced there.
    pub fn split_tokens(&self, tape: &mut Tape<T>, seq: Var, level: usize) -> Result<TokenSet> {
        if self.config.has_task_token() {
            let task = tape.slice(seq, 1, 0, 1)?;
            let img = tape.slice(seq, 1, 1, self.config.n_tokens())?;
            Ok(TokenSet { image_tokens: img, task_token: Some(task), level })
        } else {
            Ok(TokenSet { image_tokens: seq, task_token: None, level })
        }
    }
}
