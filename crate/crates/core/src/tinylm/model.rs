//! Toy decoder-only transformer with per-layer intervention hook points.
//!
//! Pre-norm blocks (causal multi-head attention + FFN), learned positional
//! embeddings, and a softmax head. Every block output can be captured and, at
//! selected positions, rewritten by an intervention operator before the next
//! block consumes it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::interventions::{apply_on_tape, stage_on_tape, AppliedIntervention, InterventionSet, StagedParams};
use crate::numerics::{adamw_step, seeded_rng, AdamWConfig, OptimizerState, Tape, Tensor, VarId};
use crate::tinylm::vocab::Vocab;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { dim: 64, layers: 4, heads: 4, ffn_dim: 128, context: 128 }
    }
}

/// Which positions an intervention rewrites: the last `prompt_positions` of
/// the prompt and, when `intervene_outputs` is set, every generated/output
/// position.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HookSpec {
    pub layers: Vec<usize>,
    pub prompt_positions: usize,
    pub intervene_outputs: bool,
}

impl HookSpec {
    pub fn new(layers: Vec<usize>, prompt_positions: usize) -> Self {
        HookSpec { layers, prompt_positions, intervene_outputs: true }
    }

    pub fn validate(&self, model_layers: usize) -> Result<()> {
        if self.prompt_positions == 0 {
            return Err(Error::InvalidArgument("prompt_positions must be at least 1".into()));
        }
        for &l in &self.layers {
            if l >= model_layers {
                return Err(Error::InvalidArgument(format!(
                    "layer {l} out of range for a {model_layers}-layer model"
                )));
            }
        }
        Ok(())
    }

    /// Position set for a sequence that starts with `prompt_len` prompt
    /// tokens. Prompt shorter than P clamps to the whole prompt.
    pub fn positions(&self, prompt_len: usize, total_len: usize) -> Vec<usize> {
        let start = prompt_len.saturating_sub(self.prompt_positions);
        let end = if self.intervene_outputs { total_len } else { prompt_len.min(total_len) };
        (start..end).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// The base language model. All parameters are plain tensors; training stages
/// them on a tape per step.
#[derive(Debug, Clone)]
pub struct TinyModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub head: Tensor,
}

impl TinyModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let d = config.dim;
        let v = vocab.size();
        let init = 0.02;
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_gain: ones(d),
                ln1_bias: Tensor::zeros(vec![d]),
                wq: Tensor::randn(vec![d, d], init, &mut rng),
                wk: Tensor::randn(vec![d, d], init, &mut rng),
                wv: Tensor::randn(vec![d, d], init, &mut rng),
                wo: Tensor::randn(vec![d, d], init, &mut rng),
                ln2_gain: ones(d),
                ln2_bias: Tensor::zeros(vec![d]),
                w1: Tensor::randn(vec![d, config.ffn_dim], init, &mut rng),
                b1: Tensor::zeros(vec![config.ffn_dim]),
                w2: Tensor::randn(vec![config.ffn_dim, d], init, &mut rng),
                b2: Tensor::zeros(vec![d]),
            })
            .collect();
        TinyModel {
            config,
            embed: Tensor::randn(vec![v, d], init, &mut rng),
            pos: Tensor::randn(vec![config.context, d], init, &mut rng),
            blocks,
            lnf_gain: ones(d),
            lnf_bias: Tensor::zeros(vec![d]),
            head: Tensor::randn(vec![d, v], init, &mut rng),
            vocab,
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string(), "pos".to_string()];
        for i in 0..self.blocks.len() {
            for f in
                ["ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2"]
            {
                names.push(format!("block{i}.{f}"));
            }
        }
        names.push("lnf_gain".into());
        names.push("lnf_bias".into());
        names.push("head".into());
        names
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed, &self.pos];
        for b in &self.blocks {
            out.extend([
                &b.ln1_gain, &b.ln1_bias, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2_gain, &b.ln2_bias,
                &b.w1, &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.head]);
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embed, &mut self.pos];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.numel()).sum()
    }

    /// Copies every parameter onto the tape. Leaves require gradients iff
    /// `trainable`.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedModel {
        let lift = |tape: &mut Tape, t: &Tensor| {
            let t = if trainable { t.clone().with_grad() } else { t.clone() };
            tape.leaf(t)
        };
        StagedModel {
            leaf_ids: self.param_tensors().iter().map(|t| lift(tape, t)).collect(),
            layers: self.blocks.len(),
        }
    }

    /// Stages intervention parameters for the layers they belong to.
    pub fn stage_interventions(
        &self,
        tape: &mut Tape,
        set: &InterventionSet,
        trainable: bool,
    ) -> Result<BTreeMap<usize, StagedParams>> {
        let mut staged = BTreeMap::new();
        for (&layer, params) in &set.by_layer {
            if layer >= self.blocks.len() {
                return Err(Error::InvalidArgument(format!(
                    "intervention layer {layer} out of range for a {}-layer model",
                    self.blocks.len()
                )));
            }
            if params.dim != self.config.dim {
                return Err(Error::ShapeMismatch(format!(
                    "intervention dim {} vs model dim {}",
                    params.dim, self.config.dim
                )));
            }
            staged.insert(layer, stage_on_tape(tape, params, trainable));
        }
        Ok(staged)
    }

    /// Runs the model over `ids` on the tape. Block outputs listed in
    /// `capture_layers` are captured before any rewrite; staged interventions
    /// rewrite their layer's output at `positions`.
    pub fn forward_staged(
        &self,
        tape: &mut Tape,
        staged: &StagedModel,
        ids: &[usize],
        interventions: Option<(&BTreeMap<usize, StagedParams>, &[usize])>,
        capture_layers: &[usize],
    ) -> Result<ForwardRecord> {
        let n = ids.len();
        if n == 0 {
            return Err(Error::InvalidArgument("cannot run the model on an empty sequence".into()));
        }
        if n > self.config.context {
            return Err(Error::InvalidArgument(format!(
                "sequence of {n} tokens exceeds context length {}",
                self.config.context
            )));
        }
        if let Some((_, positions)) = interventions {
            if let Some(&p) = positions.iter().find(|&&p| p >= n) {
                return Err(Error::InvalidArgument(format!(
                    "intervention position {p} outside sequence of length {n}"
                )));
            }
        }

        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = tape.embed_lookup(staged.embed(), ids.to_vec());
        let pos = tape.gather_rows(staged.pos(), (0..n).collect());
        let mut x = tape.add(tok, pos);

        let mut captured = BTreeMap::new();
        let mut applied = BTreeMap::new();

        for layer in 0..self.blocks.len() {
            let blk = staged.block(layer);

            // Attention sublayer.
            let normed = tape.layer_norm_rows(x, LN_EPS);
            let normed = tape.mul_row_broadcast(normed, blk.ln1_gain);
            let normed = tape.add_row_broadcast(normed, blk.ln1_bias);
            let q = tape.matmul(normed, blk.wq);
            let k = tape.matmul(normed, blk.wk);
            let v = tape.matmul(normed, blk.wv);
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let (from, to) = (h * dh, (h + 1) * dh);
                let qh = tape.slice_cols(q, from, to);
                let kh = tape.slice_cols(k, from, to);
                let vh = tape.slice_cols(v, from, to);
                let kt = tape.transpose(kh);
                let scores = tape.matmul(qh, kt);
                let scores = tape.scale(scores, scale);
                let probs = tape.causal_softmax_rows(scores);
                head_outs.push(tape.matmul(probs, vh));
            }
            let merged = tape.concat_cols(&head_outs);
            let attn = tape.matmul(merged, blk.wo);
            x = tape.add(x, attn);

            // FFN sublayer.
            let normed = tape.layer_norm_rows(x, LN_EPS);
            let normed = tape.mul_row_broadcast(normed, blk.ln2_gain);
            let normed = tape.add_row_broadcast(normed, blk.ln2_bias);
            let f = tape.matmul(normed, blk.w1);
            let f = tape.add_row_broadcast(f, blk.b1);
            let f = tape.silu(f);
            let f = tape.matmul(f, blk.w2);
            let f = tape.add_row_broadcast(f, blk.b2);
            x = tape.add(x, f);

            if capture_layers.contains(&layer) {
                captured.insert(layer, x);
            }
            if let Some((staged_iv, positions)) = interventions {
                if let Some(params) = staged_iv.get(&layer) {
                    let out = apply_on_tape(tape, x, params, positions);
                    x = out.output;
                    applied.insert(layer, out);
                }
            }
        }

        let normed = tape.layer_norm_rows(x, LN_EPS);
        let normed = tape.mul_row_broadcast(normed, staged.lnf_gain());
        let normed = tape.add_row_broadcast(normed, staged.lnf_bias());
        let logits = tape.matmul(normed, staged.head());

        Ok(ForwardRecord { logits, captured, applied })
    }

    /// Convenience forward on a fresh tape; returns plain tensors.
    pub fn forward(
        &self,
        ids: &[usize],
        interventions: Option<(&InterventionSet, &HookSpec, usize)>,
    ) -> Result<PlainForward> {
        let mut tape = Tape::new();
        let staged = self.stage(&mut tape, false);
        let mut capture: Vec<usize> = Vec::new();
        let staged_iv = match interventions {
            Some((set, hook, prompt_len)) => {
                hook.validate(self.config.layers)?;
                capture = set.layers();
                let positions = hook.positions(prompt_len, ids.len());
                Some((self.stage_interventions(&mut tape, set, false)?, positions))
            }
            None => None,
        };
        let record = self.forward_staged(
            &mut tape,
            &staged,
            ids,
            staged_iv.as_ref().map(|(m, p)| (m, p.as_slice())),
            &capture,
        )?;
        let logits = tape.value(record.logits).clone();
        let captured = record
            .captured
            .iter()
            .map(|(&l, &v)| (l, tape.value(v).clone()))
            .collect();
        let gates = record
            .applied
            .iter()
            .map(|(&l, a)| (l, tape.value(a.gates).clone()))
            .collect();
        Ok(PlainForward { logits, captured, gates })
    }

    /// Greedy argmax decoding; the lowest token id wins ties. Stops after
    /// emitting `end_token`, when `max_new` tokens were generated, or when
    /// the context fills up. The intervention position set is re-derived at
    /// every step from the prompt length and current sequence length.
    pub fn greedy_decode(
        &self,
        prompt: &[usize],
        max_new: usize,
        interventions: Option<(&InterventionSet, &HookSpec)>,
        end_token: Option<usize>,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt must not be empty".into()));
        }
        if prompt.len() > self.config.context {
            return Err(Error::InvalidArgument(format!(
                "prompt of {} tokens exceeds context length {}",
                prompt.len(),
                self.config.context
            )));
        }
        if let Some((_, hook)) = interventions {
            hook.validate(self.config.layers)?;
        }
        let mut seq = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if seq.len() >= self.config.context {
                break;
            }
            let mut tape = Tape::new();
            let staged = self.stage(&mut tape, false);
            let staged_iv = match interventions {
                Some((set, hook)) => {
                    let positions = hook.positions(prompt.len(), seq.len());
                    Some((self.stage_interventions(&mut tape, set, false)?, positions))
                }
                None => None,
            };
            let record = self.forward_staged(
                &mut tape,
                &staged,
                &seq,
                staged_iv.as_ref().map(|(m, p)| (m, p.as_slice())),
                &[],
            )?;
            let logits = tape.value(record.logits);
            let last = logits.row(logits.rows() - 1);
            let mut best = 0usize;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            out.push(best);
            seq.push(best);
            if Some(best) == end_token {
                break;
            }
        }
        Ok(out)
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("ones")
}

/// Tape handles for the staged model parameters, in `param_names` order.
pub struct StagedModel {
    leaf_ids: Vec<VarId>,
    layers: usize,
}

struct StagedBlockView {
    ln1_gain: VarId,
    ln1_bias: VarId,
    wq: VarId,
    wk: VarId,
    wv: VarId,
    wo: VarId,
    ln2_gain: VarId,
    ln2_bias: VarId,
    w1: VarId,
    b1: VarId,
    w2: VarId,
    b2: VarId,
}

const BLOCK_FIELDS: usize = 12;

impl StagedModel {
    pub fn leaf_ids(&self) -> &[VarId] {
        &self.leaf_ids
    }

    fn embed(&self) -> VarId {
        self.leaf_ids[0]
    }

    fn pos(&self) -> VarId {
        self.leaf_ids[1]
    }

    fn block(&self, i: usize) -> StagedBlockView {
        let base = 2 + i * BLOCK_FIELDS;
        StagedBlockView {
            ln1_gain: self.leaf_ids[base],
            ln1_bias: self.leaf_ids[base + 1],
            wq: self.leaf_ids[base + 2],
            wk: self.leaf_ids[base + 3],
            wv: self.leaf_ids[base + 4],
            wo: self.leaf_ids[base + 5],
            ln2_gain: self.leaf_ids[base + 6],
            ln2_bias: self.leaf_ids[base + 7],
            w1: self.leaf_ids[base + 8],
            b1: self.leaf_ids[base + 9],
            w2: self.leaf_ids[base + 10],
            b2: self.leaf_ids[base + 11],
        }
    }

    fn lnf_gain(&self) -> VarId {
        self.leaf_ids[2 + self.layers * BLOCK_FIELDS]
    }

    fn lnf_bias(&self) -> VarId {
        self.leaf_ids[2 + self.layers * BLOCK_FIELDS + 1]
    }

    fn head(&self) -> VarId {
        self.leaf_ids[2 + self.layers * BLOCK_FIELDS + 2]
    }
}

/// Result of one staged forward pass.
pub struct ForwardRecord {
    pub logits: VarId,
    /// Pre-intervention block outputs for the requested layers.
    pub captured: BTreeMap<usize, VarId>,
    /// Applied intervention records (rewritten output, gates, inputs).
    pub applied: BTreeMap<usize, AppliedIntervention>,
}

/// Plain-tensor forward result.
pub struct PlainForward {
    pub logits: Tensor,
    pub captured: BTreeMap<usize, Tensor>,
    /// Gate values at intervened positions, per layer.
    pub gates: BTreeMap<usize, Tensor>,
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Stop early once teacher-forced next-token accuracy over a corpus
    /// sample reaches this level (checked every `accuracy_interval` steps).
    pub target_accuracy: Option<f64>,
    pub accuracy_interval: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 6000,
            batch: 8,
            optimizer: AdamWConfig { lr: 2e-3, weight_decay: 0.01, ..Default::default() },
            seed: 0,
            target_accuracy: Some(0.999),
            accuracy_interval: 250,
        }
    }
}

/// Next-token language-model training over corpus lines. Returns the
/// per-step mean cross-entropy (nats per token).
pub fn pretrain(model: &mut TinyModel, corpus: &[String], config: &PretrainConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    let lines: Vec<Vec<usize>> = corpus
        .iter()
        .map(|l| model.vocab.tokenize(l))
        .collect::<Result<_>>()?;
    for line in &lines {
        if line.len() < 2 {
            return Err(Error::InvalidArgument("corpus lines must hold at least two tokens".into()));
        }
        if line.len() > model.config.context {
            return Err(Error::InvalidArgument(format!(
                "corpus line of {} tokens exceeds context {}",
                line.len(),
                model.config.context
            )));
        }
    }

    let mut rng = seeded_rng(config.seed);
    let mut order: Vec<usize> = (0..lines.len()).collect();
    let mut cursor = order.len(); // force an initial shuffle
    let mut opt_state = {
        let params = model.param_tensors();
        OptimizerState::new(config.optimizer, &params)
    };
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut tape = Tape::new();
        let staged = model.stage(&mut tape, true);
        let mut losses = Vec::with_capacity(config.batch);
        let mut token_count = 0usize;
        for _ in 0..config.batch {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let line = &lines[order[cursor]];
            cursor += 1;
            let inputs = &line[..line.len() - 1];
            let picks: Vec<(usize, usize)> =
                line[1..].iter().enumerate().map(|(i, &t)| (i, t)).collect();
            token_count += picks.len();
            let record = model.forward_staged(&mut tape, &staged, inputs, None, &[])?;
            losses.push(tape.cross_entropy_select(record.logits, picks));
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l);
        }
        let loss = tape.scale(total, 1.0 / token_count as f64);
        let loss_value = tape.value(loss).scalar_value();
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite pretraining loss at step {step}"
            )));
        }
        curve.push(loss_value);

        let grads = tape.backward(loss)?;
        let grad_tensors: Vec<&Tensor> = staged
            .leaf_ids()
            .iter()
            .map(|&id| grads.get(id).expect("gradient for model leaf"))
            .collect();
        let mut params = model.param_tensors_mut();
        adamw_step(&mut params, &grad_tensors, &mut opt_state)?;

        if let Some(target) = config.target_accuracy {
            let checked = step + 1;
            if checked % config.accuracy_interval == 0 {
                let acc = teacher_forced_accuracy(model, &lines, 64, checked as u64)?;
                if acc >= target {
                    break;
                }
            }
        }
    }
    Ok(curve)
}

/// Fraction of next-token argmax hits over a deterministic sample of corpus
/// lines.
pub fn teacher_forced_accuracy(
    model: &TinyModel,
    lines: &[Vec<usize>],
    sample: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut idx: Vec<usize> = (0..lines.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(sample.max(1));
    let mut hits = 0usize;
    let mut total = 0usize;
    for &i in &idx {
        let line = &lines[i];
        let inputs = &line[..line.len() - 1];
        let fwd = model.forward(inputs, None)?;
        for (pos, &target) in line[1..].iter().enumerate() {
            let row = fwd.logits.row(pos);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            hits += usize::from(best == target);
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}
