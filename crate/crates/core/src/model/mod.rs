//! Decoder-only transformer with a pluggable query/key rotation engine.
//!
//! Blocks are pre-norm (RMSNorm) with causal multi-head attention and a GELU
//! feed-forward at 4× width. Each layer owns one [`SpectralBasis`] shared by
//! all of its heads.

pub mod checkpoint;

pub use checkpoint::{read_checkpoint, read_tensors, write_checkpoint, write_tensors, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Result, SrplError};
use crate::rope::{geometric_init, BasisTrainable, BasisVars, PhaseInit, RotationEngineKind, Side, SpectralBasis, PHASE_NOISE_STD};
use crate::tensor::{AttnSegment, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const FFN_MULT: usize = 4;
/// Parameter slots per transformer block (10 dense + 4 basis vectors).
const SLOTS_PER_LAYER: usize = 14;
const BLOCK_SLOT_NAMES: [&str; SLOTS_PER_LAYER] = [
    "norm1",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "norm2",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "rope.omega",
    "rope.amplitude",
    "rope.phase_q",
    "rope.phase_k",
];

/// How a spectral basis is initialized at build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisInit {
    /// Zero phases: output identical to the standard engine.
    Surgical,
    /// Small Gaussian phase noise.
    Training,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub engine: RotationEngineKind,
    pub untied_phase: bool,
    pub basis_init: BasisInit,
    pub basis_trainable: BasisTrainable,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, engine: RotationEngineKind) -> Self {
        ModelConfig {
            vocab_size,
            hidden_dim: 128,
            num_heads: 4,
            num_layers: 2,
            max_seq_len: 512,
            rope_base: 10000.0,
            engine,
            untied_phase: false,
            basis_init: BasisInit::Training,
            basis_trainable: BasisTrainable::ALL,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SrplError::contract(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(SrplError::contract(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(SrplError::contract(format!("head_dim {} must be even", self.head_dim())));
        }
        if !(self.rope_base > 0.0 && self.rope_base.is_finite()) {
            return Err(SrplError::contract("rope_base must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Dense,
    Omega,
    Amplitude,
    Phase,
}

impl ParamGroup {
    pub fn is_basis(self) -> bool {
        self != ParamGroup::Dense
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub norm2: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub rope: SpectralBasis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches").with_grad(true)
}

fn const_tensor(shape: Vec<usize>, v: f64) -> Tensor {
    Tensor::filled(shape, v).expect("positive shape").with_grad(true)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic initialization. Dense weights come from one RNG stream and
/// basis phase noise from another, so Standard and Spectral builds with the
/// same seed share every dense weight bit for bit.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let (v, h, l) = (config.vocab_size, config.hidden_dim, config.num_layers);
    let f = FFN_MULT * h;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embed = normal_tensor(&mut rng, vec![v, h]);
    let mut blocks = Vec::with_capacity(l);
    for layer in 0..l {
        let phase = match (config.engine, config.basis_init) {
            (RotationEngineKind::Spectral, BasisInit::Training) => PhaseInit::Noise {
                std: PHASE_NOISE_STD,
                seed: splitmix(seed ^ 0x5350_4543_5452_414C ^ layer as u64),
            },
            _ => PhaseInit::Surgical,
        };
        let mut rope = geometric_init(config.head_dim(), config.rope_base, phase)?.with_trainable(config.basis_trainable);
        if config.untied_phase {
            rope = rope.untied();
        }
        blocks.push(Block {
            norm1: const_tensor(vec![h], 1.0),
            wq: normal_tensor(&mut rng, vec![h, h]),
            wk: normal_tensor(&mut rng, vec![h, h]),
            wv: normal_tensor(&mut rng, vec![h, h]),
            wo: normal_tensor(&mut rng, vec![h, h]),
            norm2: const_tensor(vec![h], 1.0),
            w1: normal_tensor(&mut rng, vec![h, f]),
            b1: const_tensor(vec![f], 0.0),
            w2: normal_tensor(&mut rng, vec![f, h]),
            b2: const_tensor(vec![h], 0.0),
            rope,
        });
    }
    let final_norm = const_tensor(vec![h], 1.0);
    let out_w = normal_tensor(&mut rng, vec![h, v]);
    let out_b = const_tensor(vec![v], 0.0);
    Ok(Model {
        config,
        embed,
        blocks,
        final_norm,
        out_w,
        out_b,
    })
}

/// Sequences packed row-wise for one forward pass.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    ids: Vec<usize>,
    positions: Vec<usize>,
    spans: Vec<(usize, usize)>,
    /// Per-sequence positions whose logits are needed; `None` means all.
    outputs: Option<Vec<Vec<usize>>>,
}

impl PackedBatch {
    pub fn new(seqs: &[&[usize]]) -> Self {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            spans.push((ids.len(), s.len()));
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        PackedBatch {
            ids,
            positions,
            spans,
            outputs: None,
        }
    }

    /// Restricts the final layer to the given positions of each sequence.
    /// Output rows follow sequence order, then the order given here.
    pub fn with_outputs(mut self, outputs: Vec<Vec<usize>>) -> Result<Self> {
        if outputs.len() != self.spans.len() {
            return Err(SrplError::contract("one output list per sequence required"));
        }
        for (o, &(_, len)) in outputs.iter().zip(&self.spans) {
            if o.iter().any(|&p| p >= len) || o.windows(2).any(|w| w[0] >= w[1]) {
                return Err(SrplError::contract("output positions must be increasing and in range"));
            }
        }
        self.outputs = Some(outputs);
        Ok(self)
    }

    pub fn num_rows(&self) -> usize {
        self.ids.len()
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn output_rows(&self) -> usize {
        match &self.outputs {
            None => self.ids.len(),
            Some(o) => o.iter().map(Vec::len).sum(),
        }
    }
}

/// Tape handles for every model parameter, in canonical slot order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    slots: Vec<Var>,
    tied: Vec<bool>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, model: &Model) -> ParamVars {
        let mut slots = Vec::with_capacity(model.num_slots());
        let mut tied = Vec::with_capacity(model.blocks.len());
        slots.push(tape.leaf(&model.embed));
        for b in &model.blocks {
            for t in [&b.norm1, &b.wq, &b.wk, &b.wv, &b.wo, &b.norm2, &b.w1, &b.b1, &b.w2, &b.b2] {
                slots.push(tape.leaf(t));
            }
            let bv = BasisVars::register(tape, &b.rope, model.config.engine);
            slots.extend([bv.omega, bv.amplitude, bv.phase_q, bv.phase_k]);
            tied.push(b.rope.tied);
        }
        slots.push(tape.leaf(&model.final_norm));
        slots.push(tape.leaf(&model.out_w));
        slots.push(tape.leaf(&model.out_b));
        ParamVars { slots, tied }
    }

    pub fn slot(&self, i: usize) -> Var {
        self.slots[i]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// True for the `phase_k` slot of a tied basis, which aliases `phase_q`.
    pub fn is_alias(&self, i: usize) -> bool {
        if i == 0 || i > self.tied.len() * SLOTS_PER_LAYER {
            return false;
        }
        let (layer, within) = ((i - 1) / SLOTS_PER_LAYER, (i - 1) % SLOTS_PER_LAYER);
        within == SLOTS_PER_LAYER - 1 && self.tied[layer]
    }

    fn block(&self, layer: usize) -> &[Var] {
        let start = 1 + layer * SLOTS_PER_LAYER;
        &self.slots[start..start + SLOTS_PER_LAYER]
    }

    fn basis(&self, layer: usize) -> BasisVars {
        let b = self.block(layer);
        BasisVars {
            omega: b[10],
            amplitude: b[11],
            phase_q: b[12],
            phase_k: b[13],
        }
    }

    fn tail(&self) -> (Var, Var, Var) {
        let n = self.slots.len();
        (self.slots[n - 3], self.slots[n - 2], self.slots[n - 1])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Residual stream after the last block, one row per output row.
    pub hidden: Var,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn engine(&self) -> RotationEngineKind {
        self.config.engine
    }

    pub fn bases(&self) -> Vec<SpectralBasis> {
        self.blocks.iter().map(|b| b.rope.clone()).collect()
    }

    pub fn num_slots(&self) -> usize {
        1 + self.blocks.len() * SLOTS_PER_LAYER + 3
    }

    fn locate(&self, i: usize) -> (Option<usize>, usize) {
        let body = self.blocks.len() * SLOTS_PER_LAYER;
        if i == 0 {
            (None, 0)
        } else if i <= body {
            (Some((i - 1) / SLOTS_PER_LAYER), (i - 1) % SLOTS_PER_LAYER)
        } else {
            (None, i - body)
        }
    }

    pub fn slot_name(&self, i: usize) -> String {
        match self.locate(i) {
            (None, 0) => "embed".into(),
            (Some(l), w) => format!("layer{l}.{}", BLOCK_SLOT_NAMES[w]),
            (None, 1) => "final_norm".into(),
            (None, 2) => "out.w".into(),
            _ => "out.b".into(),
        }
    }

    pub fn slot_group(&self, i: usize) -> ParamGroup {
        match self.locate(i) {
            (Some(_), 10) => ParamGroup::Omega,
            (Some(_), 11) => ParamGroup::Amplitude,
            (Some(_), 12 | 13) => ParamGroup::Phase,
            _ => ParamGroup::Dense,
        }
    }

    pub fn slot_data(&self, i: usize) -> &[f64] {
        match self.locate(i) {
            (None, 0) => self.embed.data(),
            (Some(l), w) => {
                let b = &self.blocks[l];
                match w {
                    0 => b.norm1.data(),
                    1 => b.wq.data(),
                    2 => b.wk.data(),
                    3 => b.wv.data(),
                    4 => b.wo.data(),
                    5 => b.norm2.data(),
                    6 => b.w1.data(),
                    7 => b.b1.data(),
                    8 => b.w2.data(),
                    9 => b.b2.data(),
                    10 => &b.rope.omega,
                    11 => &b.rope.amplitude,
                    12 => &b.rope.phase_q,
                    _ => &b.rope.phase_k,
                }
            }
            (None, 1) => self.final_norm.data(),
            (None, 2) => self.out_w.data(),
            _ => self.out_b.data(),
        }
    }

    pub fn slot_data_mut(&mut self, i: usize) -> &mut [f64] {
        match self.locate(i) {
            (None, 0) => self.embed.data_mut(),
            (Some(l), w) => {
                let b = &mut self.blocks[l];
                match w {
                    0 => b.norm1.data_mut(),
                    1 => b.wq.data_mut(),
                    2 => b.wk.data_mut(),
                    3 => b.wv.data_mut(),
                    4 => b.wo.data_mut(),
                    5 => b.norm2.data_mut(),
                    6 => b.w1.data_mut(),
                    7 => b.b1.data_mut(),
                    8 => b.w2.data_mut(),
                    9 => b.b2.data_mut(),
                    10 => &mut b.rope.omega,
                    11 => &mut b.rope.amplitude,
                    12 => &mut b.rope.phase_q,
                    _ => &mut b.rope.phase_k,
                }
            }
            (None, 1) => self.final_norm.data_mut(),
            (None, 2) => self.out_w.data_mut(),
            _ => self.out_b.data_mut(),
        }
    }

    /// Re-establishes `phase_k == phase_q` on tied bases after an update.
    pub fn sync_tied_phases(&mut self) {
        for b in &mut self.blocks {
            if b.rope.tied {
                b.rope.phase_k.clone_from(&b.rope.phase_q);
            }
        }
    }

    pub fn dense_parameter_count(&self) -> usize {
        (0..self.num_slots())
            .filter(|&i| self.slot_group(i) == ParamGroup::Dense)
            .map(|i| self.slot_data(i).len())
            .sum()
    }

    /// Trainable basis scalars: zero under the standard engine.
    pub fn basis_parameter_count(&self) -> usize {
        if self.config.engine == RotationEngineKind::Standard {
            return 0;
        }
        self.blocks
            .iter()
            .map(|b| {
                let t = b.rope.trainable;
                let h = b.rope.half_dim();
                let phases = if b.rope.tied { 1 } else { 2 };
                h * (t.omega as usize + t.amplitude as usize + phases * t.phase as usize)
            })
            .sum()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(SrplError::input("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(SrplError::input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(SrplError::input(format!(
                "token {t} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Runs the network over a packed batch on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &ParamVars, batch: &PackedBatch) -> Result<ForwardOutput> {
        for &(start, len) in &batch.spans {
            self.check_tokens(&batch.ids[start..start + len])?;
        }
        let heads = self.config.num_heads;
        let full: Vec<AttnSegment> = batch.spans.iter().map(|&(s, l)| AttnSegment::full(s, l)).collect();
        let mut x = tape.embedding(vars.slots[0], &batch.ids)?;
        let last = self.blocks.len() - 1;
        for layer in 0..self.blocks.len() {
            let p = vars.block(layer);
            let basis = vars.basis(layer);
            let h = tape.rms_norm(x, p[0], NORM_EPS)?;
            let k = tape.matmul(h, p[2])?;
            let v = tape.matmul(h, p[3])?;
            let k = basis.rotate(tape, k, &batch.positions, Side::Key)?;

            let (hq, xq, q_positions, segments) = match (&batch.outputs, layer == last) {
                (Some(outputs), true) => {
                    let mut rows = Vec::new();
                    let mut q_pos = Vec::new();
                    let mut segs = Vec::with_capacity(outputs.len());
                    for (o, &(start, len)) in outputs.iter().zip(&batch.spans) {
                        segs.push(AttnSegment {
                            key_start: start,
                            key_len: len,
                            query_start: rows.len(),
                            query_pos: o.clone(),
                        });
                        rows.extend(o.iter().map(|&p| start + p));
                        q_pos.extend_from_slice(o);
                    }
                    (tape.gather_rows(h, &rows)?, tape.gather_rows(x, &rows)?, q_pos, segs)
                }
                _ => (h, x, batch.positions.clone(), full.clone()),
            };
            let q = tape.matmul(hq, p[1])?;
            let q = basis.rotate(tape, q, &q_positions, Side::Query)?;
            let attn = tape.causal_attention(q, k, v, heads, &segments)?;
            let proj = tape.matmul(attn, p[4])?;
            let x1 = tape.add(xq, proj)?;

            let h2 = tape.rms_norm(x1, p[5], NORM_EPS)?;
            let f = tape.matmul(h2, p[6])?;
            let f = tape.add_bias(f, p[7])?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, p[8])?;
            let f = tape.add_bias(f, p[9])?;
            x = tape.add(x1, f)?;
        }
        let (norm, out_w, out_b) = vars.tail();
        let h = tape.rms_norm(x, norm, NORM_EPS)?;
        let logits = tape.matmul(h, out_w)?;
        let logits = tape.add_bias(logits, out_b)?;
        Ok(ForwardOutput { logits, hidden: x })
    }

    /// Causal logits `[seq × vocab]` for one sequence.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, self);
        let out = self.forward_on_tape(&mut tape, &vars, &PackedBatch::new(&[tokens]))?;
        Ok(tape.to_tensor(out.logits))
    }

    /// Residual stream after the final block, `[seq × hidden]`.
    pub fn forward_hidden(&self, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, self);
        let out = self.forward_on_tape(&mut tape, &vars, &PackedBatch::new(&[tokens]))?;
        Ok(tape.to_tensor(out.hidden))
    }

    /// Replaces every layer's fixed rotation with a spectral basis built from
    /// the exact frequency vector already in use: unit amplitude, zero
    /// phases, all components trainable. Dense weights are carried over
    /// unchanged, so every logit is preserved exactly.
    pub fn surgical_swap(&self) -> Result<Model> {
        if self.config.engine != RotationEngineKind::Standard {
            return Err(SrplError::State("surgical swap requires a standard-engine model".into()));
        }
        let mut swapped = self.clone();
        swapped.config.engine = RotationEngineKind::Spectral;
        swapped.config.basis_init = BasisInit::Surgical;
        swapped.config.basis_trainable = BasisTrainable::ALL;
        for b in &mut swapped.blocks {
            let omega = b.rope.omega.clone();
            let h = omega.len();
            b.rope = SpectralBasis {
                omega,
                amplitude: vec![1.0; h],
                phase_q: vec![0.0; h],
                phase_k: vec![0.0; h],
                tied: !swapped.config.untied_phase,
                trainable: BasisTrainable::ALL,
            };
        }
        Ok(swapped)
    }

    pub fn set_basis_trainable(&mut self, trainable: BasisTrainable) {
        self.config.basis_trainable = trainable;
        for b in &mut self.blocks {
            b.rope.trainable = trainable;
        }
    }

    /// Serializes parameters and configuration as named tensors.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let c = &self.config;
        let t = c.basis_trainable;
        let cfg = vec![
            c.vocab_size as f64,
            c.hidden_dim as f64,
            c.num_heads as f64,
            c.num_layers as f64,
            c.max_seq_len as f64,
            c.rope_base,
            (c.engine == RotationEngineKind::Spectral) as u8 as f64,
            c.untied_phase as u8 as f64,
            t.omega as u8 as f64,
            t.amplitude as u8 as f64,
            t.phase as u8 as f64,
        ];
        let mut out = vec![("config".to_string(), Tensor::vector(cfg).expect("non-empty"))];
        for i in 0..self.num_slots() {
            let data = self.slot_data(i).to_vec();
            let shape = self.slot_shape(i);
            out.push((self.slot_name(i), Tensor::new(shape, data).expect("slot shape")));
        }
        out
    }

    fn slot_shape(&self, i: usize) -> Vec<usize> {
        let (h, v) = (self.config.hidden_dim, self.config.vocab_size);
        let f = FFN_MULT * h;
        match self.locate(i) {
            (None, 0) => vec![v, h],
            (Some(_), w) => match w {
                0 | 5 | 9 => vec![h],
                1..=4 => vec![h, h],
                6 => vec![h, f],
                7 => vec![f],
                8 => vec![f, h],
                _ => vec![self.config.head_dim() / 2],
            },
            (None, 1) => vec![h],
            (None, 2) => vec![h, v],
            _ => vec![v],
        }
    }

    pub fn from_named_tensors(tensors: &[(String, Tensor)]) -> Result<Model> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| SrplError::format(format!("checkpoint missing tensor `{name}`")))
        };
        let cfg = find("config")?.data();
        if cfg.len() != 11 {
            return Err(SrplError::format("config tensor has wrong length"));
        }
        let as_usize = |x: f64| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                Err(SrplError::format(format!("config field {x} is not a count")))
            }
        };
        let config = ModelConfig {
            vocab_size: as_usize(cfg[0])?,
            hidden_dim: as_usize(cfg[1])?,
            num_heads: as_usize(cfg[2])?,
            num_layers: as_usize(cfg[3])?,
            max_seq_len: as_usize(cfg[4])?,
            rope_base: cfg[5],
            engine: if cfg[6] != 0.0 {
                RotationEngineKind::Spectral
            } else {
                RotationEngineKind::Standard
            },
            untied_phase: cfg[7] != 0.0,
            basis_init: BasisInit::Surgical,
            basis_trainable: BasisTrainable {
                omega: cfg[8] != 0.0,
                amplitude: cfg[9] != 0.0,
                phase: cfg[10] != 0.0,
            },
        };
        config.validate().map_err(|e| SrplError::format(e.to_string()))?;
        let mut model = build_model(config, 0)?;
        for i in 0..model.num_slots() {
            let name = model.slot_name(i);
            let t = find(&name)?;
            if t.shape() != model.slot_shape(i).as_slice() {
                return Err(SrplError::format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.slot_shape(i)
                )));
            }
            model.slot_data_mut(i).copy_from_slice(t.data());
        }
        for b in &mut model.blocks {
            b.rope.tied = !model.config.untied_phase;
            b.rope.validate().map_err(|e| SrplError::format(e.to_string()))?;
        }
        Ok(model)
    }
}

/// Rearranges `[heads × seq × hd]` into row layout `[seq × heads·hd]`.
fn heads_to_rows(t: &Tensor) -> Result<(Tensor, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(SrplError::Dimension {
            op: "attention_layer",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0],
        });
    }
    let (heads, seq, hd) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; t.numel()];
    for h in 0..heads {
        for i in 0..seq {
            let src = (h * seq + i) * hd;
            let dst = i * heads * hd + h * hd;
            out[dst..dst + hd].copy_from_slice(&t.data()[src..src + hd]);
        }
    }
    Ok((Tensor::new(vec![seq, heads * hd], out)?, heads, seq, hd))
}

fn rows_to_heads(data: &[f64], heads: usize, seq: usize, hd: usize) -> Result<Tensor> {
    let mut out = vec![0.0; data.len()];
    for h in 0..heads {
        for i in 0..seq {
            let src = i * heads * hd + h * hd;
            let dst = (h * seq + i) * hd;
            out[dst..dst + hd].copy_from_slice(&data[src..src + hd]);
        }
    }
    Tensor::new(vec![heads, seq, hd], out)
}

/// Result of [`attention_layer`]: output plus the attention probabilities.
#[derive(Debug, Clone)]
pub struct AttentionResult {
    /// `[heads × seq × head_dim]`
    pub output: Tensor,
    /// `[heads × seq × seq]`, rows sum to one over the causal prefix.
    pub weights: Tensor,
}

/// Causal attention of `[heads × seq × head_dim]` inputs at positions
/// `0..seq`, with queries and keys rotated by `basis`.
pub fn attention_layer(q: &Tensor, k: &Tensor, v: &Tensor, basis: &SpectralBasis) -> Result<AttentionResult> {
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(SrplError::Dimension {
            op: "attention_layer",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let (qr, heads, seq, hd) = heads_to_rows(q)?;
    if hd != basis.dim() {
        return Err(SrplError::Dimension {
            op: "attention_layer",
            lhs: vec![hd],
            rhs: vec![basis.dim()],
        });
    }
    let (kr, ..) = heads_to_rows(k)?;
    let (vr, ..) = heads_to_rows(v)?;
    let positions: Vec<usize> = (0..seq).collect();
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(&qr), tape.constant(&kr), tape.constant(&vr));
    let bv = BasisVars::register(&mut tape, basis, RotationEngineKind::Standard);
    let qv = bv.rotate(&mut tape, qv, &positions, Side::Query)?;
    let kv = bv.rotate(&mut tape, kv, &positions, Side::Key)?;
    let out = tape.causal_attention(qv, kv, vv, heads, &[AttnSegment::full(0, seq)])?;
    let probs = tape.attention_probs(out).expect("attention node").to_vec();
    Ok(AttentionResult {
        output: rows_to_heads(tape.value(out), heads, seq, hd)?,
        weights: Tensor::new(vec![heads, seq, seq], probs)?,
    })
}

/// Scaled pre-mask scores `[heads × seq × seq]` between rotated queries and keys.
pub fn attention_scores(q: &Tensor, k: &Tensor, basis: &SpectralBasis) -> Result<Tensor> {
    let (qr, heads, seq, hd) = heads_to_rows(q)?;
    let (kr, ..) = heads_to_rows(k)?;
    if qr.shape() != kr.shape() || hd != basis.dim() {
        return Err(SrplError::Dimension {
            op: "attention_scores",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let positions: Vec<usize> = (0..seq).collect();
    let qrot = crate::rope::spectral_rotate(&reshape_rows(&qr, seq * heads, hd)?, &repeat_positions(&positions, heads), basis, Side::Query)?;
    let krot = crate::rope::spectral_rotate(&reshape_rows(&kr, seq * heads, hd)?, &repeat_positions(&positions, heads), basis, Side::Key)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = vec![0.0; heads * seq * seq];
    for h in 0..heads {
        for i in 0..seq {
            for j in 0..seq {
                let qi = qrot.row(i * heads + h);
                let kj = krot.row(j * heads + h);
                out[(h * seq + i) * seq + j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Tensor::new(vec![heads, seq, seq], out)
}

fn reshape_rows(t: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::new(vec![rows, cols], t.data().to_vec())
}

fn repeat_positions(positions: &[usize], heads: usize) -> Vec<usize> {
    positions.iter().flat_map(|&p| std::iter::repeat_n(p, heads)).collect()
}
