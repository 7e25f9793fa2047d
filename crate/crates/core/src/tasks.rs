//! Formal-language task generators and their ground-truth oracles.
//!
//! * Dyck-3: balanced strings over `()`, `[]`, `{}`; next-token loss everywhere.
//! * Bio-Rotation: DNA motif, 100-200 noise bases, `<sep>`, then the motif's
//!   reverse complement; loss on the reverse complement only.
//! * Modulo-7: `( a + b + c ) % 7 = r`; loss on `r` only.
//!
//! Every generator is a pure function of its parameters and seed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Result, SrplError};
use crate::tensor::IGNORE_INDEX;

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const PAD_SYMBOL: &str = "<pad>";
pub const SEP_SYMBOL: &str = "<sep>";

pub const BIO_NOISE_MIN: usize = 100;
pub const BIO_NOISE_MAX: usize = 200;
pub const MODULUS: u32 = 7;

const DYCK_SYMBOLS: [&str; 8] = [PAD_SYMBOL, SEP_SYMBOL, "(", ")", "[", "]", "{", "}"];
const BIO_SYMBOLS: [&str; 6] = [PAD_SYMBOL, SEP_SYMBOL, "A", "C", "G", "T"];
const MODULO_SYMBOLS: [&str; 17] = [
    PAD_SYMBOL, SEP_SYMBOL, "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "(", ")", "+", "%", "=",
];

const OPENERS: [char; 3] = ['(', '[', '{'];
const DNA: [char; 4] = ['A', 'C', 'G', 'T'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TaskKind {
    Dyck3,
    BioRotation,
    Modulo7,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Dyck3, TaskKind::BioRotation, TaskKind::Modulo7];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Dyck3 => "dyck3",
            TaskKind::BioRotation => "bio",
            TaskKind::Modulo7 => "modulo",
        }
    }

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<TaskKind> {
        TaskKind::ALL.get(code).copied()
    }

    fn symbols(self) -> &'static [&'static str] {
        match self {
            TaskKind::Dyck3 => &DYCK_SYMBOLS,
            TaskKind::BioRotation => &BIO_SYMBOLS,
            TaskKind::Modulo7 => &MODULO_SYMBOLS,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = SrplError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dyck3" | "dyck" | "dyck-3" => Ok(TaskKind::Dyck3),
            "bio" | "bio-rotation" | "biorotation" => Ok(TaskKind::BioRotation),
            "modulo" | "modulo7" | "mod7" => Ok(TaskKind::Modulo7),
            other => Err(SrplError::input(format!("unknown task `{other}` (expected dyck3, bio, modulo)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskParams {
    pub dyck_max_depth: usize,
    pub dyck_len: usize,
    pub motif_len: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            dyck_max_depth: 12,
            dyck_len: 64,
            motif_len: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SampleMeta {
    Dyck { max_depth: usize, len: usize },
    Bio { motif: String, noise_len: usize, distance: usize },
    Modulo { a: u32, b: u32, c: u32, answer: u32 },
}

impl SampleMeta {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        match self {
            SampleMeta::Dyck { max_depth, len } => vec![("depth", max_depth.to_string()), ("len", len.to_string())],
            SampleMeta::Bio {
                motif,
                noise_len,
                distance,
            } => vec![
                ("motif", motif.clone()),
                ("noise", noise_len.to_string()),
                ("distance", distance.to_string()),
            ],
            SampleMeta::Modulo { a, b, c, answer } => vec![
                ("a", a.to_string()),
                ("b", b.to_string()),
                ("c", c.to_string()),
                ("answer", answer.to_string()),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub input_tokens: Vec<usize>,
    /// Same length as the input; [`PAD`] outside the target region.
    pub target_tokens: Vec<usize>,
    pub seed: u64,
    pub metadata: SampleMeta,
}

impl TaskSample {
    /// Targets with masked positions replaced by [`IGNORE_INDEX`].
    pub fn loss_targets(&self) -> Vec<usize> {
        self.target_tokens
            .iter()
            .map(|&t| if t == PAD { IGNORE_INDEX } else { t })
            .collect()
    }

    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.target_tokens.len()).filter(|&i| self.target_tokens[i] != PAD).collect()
    }

    /// The underlying full sequence: input plus the final target token.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut full = self.input_tokens.clone();
        if let Some(&last) = self.target_tokens.last() {
            full.push(last);
        }
        full
    }
}

/// Result of the pushdown acceptance check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DyckVerdict {
    pub valid: bool,
    pub max_depth: usize,
}

fn closer_for(open: char) -> char {
    match open {
        '(' => ')',
        '[' => ']',
        _ => '}',
    }
}

/// Pushdown acceptance over the six bracket symbols.
pub fn dyck_validate(s: &str) -> Result<DyckVerdict> {
    let mut stack = Vec::new();
    let mut max_depth = 0;
    let mut valid = true;
    for ch in s.chars() {
        match ch {
            '(' | '[' | '{' => {
                stack.push(ch);
                max_depth = max_depth.max(stack.len());
            }
            ')' | ']' | '}' => {
                if valid {
                    match stack.pop() {
                        Some(open) if closer_for(open) == ch => {}
                        _ => valid = false,
                    }
                }
            }
            other => return Err(SrplError::input(format!("foreign symbol {other:?} in Dyck string"))),
        }
    }
    Ok(DyckVerdict {
        valid: valid && stack.is_empty(),
        max_depth,
    })
}

/// Nesting depth of each bracket: an opener reports the depth after the
/// push, a closer the depth before the pop. `"((()))"` → `[1,2,3,3,2,1]`.
pub fn dyck_depths(s: &str) -> Result<Vec<usize>> {
    let mut depth = 0usize;
    let mut out = Vec::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '(' | '[' | '{' => {
                depth += 1;
                out.push(depth);
            }
            ')' | ']' | '}' => {
                out.push(depth);
                depth = depth.saturating_sub(1);
            }
            other => return Err(SrplError::input(format!("foreign symbol {other:?} in Dyck string"))),
        }
    }
    Ok(out)
}

/// Balanced bracket string of exactly `target_len` symbols with nesting at
/// most `max_depth`, reaching `max_depth` at least once.
pub fn dyck_string(max_depth: usize, target_len: usize, rng: &mut impl Rng) -> Result<String> {
    if max_depth == 0 || target_len < 2 || !target_len.is_multiple_of(2) {
        return Err(SrplError::contract(format!(
            "Dyck generation needs max_depth >= 1 and an even length >= 2 (got depth {max_depth}, len {target_len})"
        )));
    }
    if target_len < 2 * max_depth {
        return Err(SrplError::contract(format!(
            "length {target_len} cannot reach depth {max_depth}"
        )));
    }
    let d = max_depth as f64;
    let mut stack: Vec<char> = Vec::with_capacity(max_depth);
    let mut reached = false;
    let mut out = String::with_capacity(target_len);
    for i in 0..target_len {
        let remaining = target_len - i;
        let h = stack.len();
        let can_open = h < max_depth && h + 1 < remaining;
        let can_close = h > 0;
        // Closing now must still leave room to climb to max_depth and return.
        let must_open = !reached && can_open && (max_depth - h + 1) + max_depth > remaining - 1;
        let open = if !can_close || must_open {
            true
        } else if !can_open {
            false
        } else {
            // Mean-reverting walk centred on max_depth / 2.
            let p = (0.5 + 0.3 * (d / 2.0 - h as f64) / (d / 2.0).max(1.0)).clamp(0.1, 0.9);
            rng.random::<f64>() < p
        };
        if open {
            let c = OPENERS[rng.random_range(0..3)];
            stack.push(c);
            out.push(c);
            reached |= stack.len() == max_depth;
        } else {
            out.push(closer_for(stack.pop().expect("can_close")));
        }
    }
    debug_assert!(stack.is_empty() && reached);
    Ok(out)
}

/// Complement (A↔T, C↔G) followed by reversal.
pub fn reverse_complement(m: &str) -> Result<String> {
    m.chars()
        .rev()
        .map(|c| match c {
            'A' => Ok('T'),
            'T' => Ok('A'),
            'C' => Ok('G'),
            'G' => Ok('C'),
            other => Err(SrplError::input(format!("foreign symbol {other:?} in DNA string"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub params: TaskParams,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, params: TaskParams) -> Result<Self> {
        match kind {
            TaskKind::Dyck3 => {
                let (d, l) = (params.dyck_max_depth, params.dyck_len);
                if d == 0 || l < 2 || l % 2 != 0 || l < 2 * d {
                    return Err(SrplError::contract(format!("infeasible Dyck parameters depth={d} len={l}")));
                }
            }
            TaskKind::BioRotation => {
                if params.motif_len == 0 {
                    return Err(SrplError::contract("motif_len must be >= 1"));
                }
            }
            TaskKind::Modulo7 => {}
        }
        Ok(TaskSpec { kind, params })
    }

    pub fn with_defaults(kind: TaskKind) -> Self {
        TaskSpec::new(kind, TaskParams::default()).expect("defaults are valid")
    }

    pub fn vocab(&self) -> &'static [&'static str] {
        self.kind.symbols()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().len()
    }

    pub fn seq_format(&self) -> &'static str {
        match self.kind {
            TaskKind::Dyck3 => "balanced bracket string; input = s[..n-1], target = s[1..]",
            TaskKind::BioRotation => "motif + noise + <sep> + reverse_complement(motif), shifted by one",
            TaskKind::Modulo7 => "( a + b + c ) % 7 = r, shifted by one",
        }
    }

    pub fn loss_mask_rule(&self) -> &'static str {
        match self.kind {
            TaskKind::Dyck3 => "every position after the first symbol",
            TaskKind::BioRotation => "reverse-complement region only",
            TaskKind::Modulo7 => "answer token only",
        }
    }

    /// Longest sequence the task can produce.
    pub fn max_len(&self) -> usize {
        match self.kind {
            TaskKind::Dyck3 => self.params.dyck_len - 1,
            TaskKind::BioRotation => 2 * self.params.motif_len + BIO_NOISE_MAX,
            TaskKind::Modulo7 => 10,
        }
    }

    pub fn token(&self, symbol: &str) -> Result<usize> {
        self.vocab()
            .iter()
            .position(|s| *s == symbol)
            .ok_or_else(|| SrplError::input(format!("symbol `{symbol}` not in {} vocabulary", self.kind)))
    }

    pub fn symbol(&self, id: usize) -> Result<&'static str> {
        self.vocab().get(id).copied().ok_or(SrplError::Index {
            what: "task vocabulary",
            index: id,
            bound: self.vocab_size(),
        })
    }

    /// Whitespace-separated symbols to token ids.
    pub fn tokenize(&self, s: &str) -> Result<Vec<usize>> {
        s.split_whitespace().map(|sym| self.token(sym)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        Ok(ids.iter().map(|&i| self.symbol(i)).collect::<Result<Vec<_>>>()?.join(" "))
    }

    fn char_tokens(&self, s: &str) -> Result<Vec<usize>> {
        s.chars().map(|c| self.token(c.encode_utf8(&mut [0; 4]))).collect()
    }

    /// Draws one sample; Bio-Rotation noise length is uniform in [100, 200].
    pub fn sample(&self, seed: u64) -> Result<TaskSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.kind {
            TaskKind::Dyck3 => {
                let s = dyck_string(self.params.dyck_max_depth, self.params.dyck_len, &mut rng)?;
                let full = self.char_tokens(&s)?;
                let depth = dyck_validate(&s)?.max_depth;
                Ok(shifted(full, None, seed, SampleMeta::Dyck {
                    max_depth: depth,
                    len: s.len(),
                }))
            }
            TaskKind::BioRotation => {
                let noise = rng.random_range(BIO_NOISE_MIN..=BIO_NOISE_MAX);
                self.bio_with_rng(self.params.motif_len, noise, seed, &mut rng)
            }
            TaskKind::Modulo7 => self.modulo_with_rng(seed, &mut rng),
        }
    }

    fn bio_with_rng(&self, motif_len: usize, noise_len: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
        if motif_len == 0 {
            return Err(SrplError::contract("motif_len must be >= 1"));
        }
        if !(BIO_NOISE_MIN..=BIO_NOISE_MAX).contains(&noise_len) {
            return Err(SrplError::contract(format!(
                "noise length {noise_len} outside [{BIO_NOISE_MIN}, {BIO_NOISE_MAX}]"
            )));
        }
        let motif: String = (0..motif_len).map(|_| DNA[rng.random_range(0..4)]).collect();
        let noise: String = (0..noise_len).map(|_| DNA[rng.random_range(0..4)]).collect();
        let rc = reverse_complement(&motif)?;
        let mut full = self.char_tokens(&motif)?;
        full.extend(self.char_tokens(&noise)?);
        full.push(SEP);
        full.extend(self.char_tokens(&rc)?);
        let first_target = motif_len + noise_len;
        Ok(shifted(full, Some(first_target), seed, SampleMeta::Bio {
            motif,
            noise_len,
            distance: noise_len + motif_len,
        }))
    }

    fn modulo_with_rng(&self, seed: u64, rng: &mut ChaCha8Rng) -> Result<TaskSample> {
        let (a, b, c) = (rng.random_range(0..10u32), rng.random_range(0..10u32), rng.random_range(0..10u32));
        Ok(self.modulo_sample(a, b, c, seed))
    }

    fn modulo_sample(&self, a: u32, b: u32, c: u32, seed: u64) -> TaskSample {
        let answer = (a + b + c) % MODULUS;
        let text = format!("( {a} + {b} + {c} ) % {MODULUS} = {answer}");
        let full = self.tokenize(&text).expect("modulo symbols are in vocabulary");
        let answer_pos = full.len() - 2;
        shifted(full, Some(answer_pos), seed, SampleMeta::Modulo { a, b, c, answer })
    }

    /// Ground-truth check of a sample against this task's oracle.
    pub fn validate(&self, sample: &TaskSample) -> Result<bool> {
        let n = sample.input_tokens.len();
        if n == 0 || sample.target_tokens.len() != n {
            return Ok(false);
        }
        let full = sample.full_sequence();
        // Unmasked targets must be the next input symbol.
        for t in 0..n - 1 {
            let tgt = sample.target_tokens[t];
            if tgt != PAD && tgt != full[t + 1] {
                return Ok(false);
            }
        }
        let syms = full.iter().map(|&i| self.symbol(i)).collect::<Result<Vec<_>>>()?;
        match (&sample.metadata, self.kind) {
            (SampleMeta::Dyck { max_depth, len }, TaskKind::Dyck3) => {
                if sample.target_tokens.contains(&PAD) {
                    return Ok(false);
                }
                let s: String = syms.concat();
                let Ok(v) = dyck_validate(&s) else {
                    return Ok(false);
                };
                Ok(v.valid && v.max_depth == *max_depth && v.max_depth <= self.params.dyck_max_depth && s.len() == *len)
            }
            (SampleMeta::Bio { motif, noise_len, .. }, TaskKind::BioRotation) => {
                let l = motif.len();
                if full.len() != 2 * l + noise_len + 1 || full[l + noise_len] != SEP {
                    return Ok(false);
                }
                if !(BIO_NOISE_MIN..=BIO_NOISE_MAX).contains(noise_len) {
                    return Ok(false);
                }
                let head: String = syms[..l].concat();
                let tail: String = syms[l + noise_len + 1..].concat();
                let Ok(rc) = reverse_complement(&head) else {
                    return Ok(false);
                };
                let masked_ok = (0..n).all(|t| (sample.target_tokens[t] != PAD) == (t >= l + noise_len));
                let noise_ok = syms[l..l + noise_len].iter().all(|s| DNA.iter().any(|d| d.to_string() == *s));
                Ok(head == *motif && tail == rc && masked_ok && noise_ok)
            }
            (SampleMeta::Modulo { a, b, c, answer }, TaskKind::Modulo7) => {
                let expect = format!("( {a} + {b} + {c} ) % {MODULUS} = {}", (a + b + c) % MODULUS);
                let masked_ok = (0..n).all(|t| (sample.target_tokens[t] != PAD) == (t == n - 1));
                Ok(syms.join(" ") == expect && *answer == (a + b + c) % MODULUS && masked_ok)
            }
            _ => Ok(false),
        }
    }

    /// `input<TAB>target<TAB>key=value ...`, symbols space-separated.
    pub fn dump_line(&self, sample: &TaskSample) -> Result<String> {
        let meta: Vec<String> = std::iter::once(format!("seed={}", sample.seed))
            .chain(sample.metadata.pairs().into_iter().map(|(k, v)| format!("{k}={v}")))
            .collect();
        Ok(format!(
            "{}\t{}\t{}",
            self.detokenize(&sample.input_tokens)?,
            self.detokenize(&sample.target_tokens)?,
            meta.join(" ")
        ))
    }

    pub fn parse_line(&self, line: &str) -> Result<TaskSample> {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(SrplError::format(format!("expected 3 tab-separated columns, got {}", cols.len())));
        }
        let input_tokens = self.tokenize(cols[0])?;
        let target_tokens = self.tokenize(cols[1])?;
        let kv: BTreeMap<&str, &str> = cols[2].split_whitespace().filter_map(|p| p.split_once('=')).collect();
        let get = |k: &str| -> Result<&str> { kv.get(k).copied().ok_or_else(|| SrplError::format(format!("missing metadata `{k}`"))) };
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| SrplError::format(format!("bad metadata `{k}`"))) };
        let metadata = match self.kind {
            TaskKind::Dyck3 => SampleMeta::Dyck {
                max_depth: num("depth")? as usize,
                len: num("len")? as usize,
            },
            TaskKind::BioRotation => SampleMeta::Bio {
                motif: get("motif")?.to_string(),
                noise_len: num("noise")? as usize,
                distance: num("distance")? as usize,
            },
            TaskKind::Modulo7 => SampleMeta::Modulo {
                a: num("a")? as u32,
                b: num("b")? as u32,
                c: num("c")? as u32,
                answer: num("answer")? as u32,
            },
        };
        Ok(TaskSample {
            input_tokens,
            target_tokens,
            seed: num("seed")?,
            metadata,
        })
    }
}

/// Next-token framing of `full`: targets from `first_target` onward (or all).
fn shifted(full: Vec<usize>, first_target: Option<usize>, seed: u64, metadata: SampleMeta) -> TaskSample {
    let n = full.len() - 1;
    let input_tokens = full[..n].to_vec();
    let start = first_target.unwrap_or(0);
    let target_tokens = (0..n).map(|t| if t >= start { full[t + 1] } else { PAD }).collect();
    TaskSample {
        input_tokens,
        target_tokens,
        seed,
        metadata,
    }
}

pub fn gen_dyck3(max_depth: usize, target_len: usize, seed: u64) -> Result<TaskSample> {
    let spec = TaskSpec::new(
        TaskKind::Dyck3,
        TaskParams {
            dyck_max_depth: max_depth,
            dyck_len: target_len,
            ..TaskParams::default()
        },
    )?;
    spec.sample(seed)
}

pub fn gen_bio_rotation(motif_len: usize, noise_len: usize, seed: u64) -> Result<TaskSample> {
    let spec = TaskSpec::new(
        TaskKind::BioRotation,
        TaskParams {
            motif_len,
            ..TaskParams::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    spec.bio_with_rng(motif_len, noise_len, seed, &mut rng)
}

pub fn gen_modulo(seed: u64) -> Result<TaskSample> {
    TaskSpec::with_defaults(TaskKind::Modulo7).sample(seed)
}

/// A fixed-operand modulo sample, for exhaustive checks.
pub fn modulo_sample(a: u32, b: u32, c: u32) -> Result<TaskSample> {
    if a > 9 || b > 9 || c > 9 {
        return Err(SrplError::contract("modulo operands must be single digits"));
    }
    Ok(TaskSpec::with_defaults(TaskKind::Modulo7).modulo_sample(a, b, c, 0))
}
