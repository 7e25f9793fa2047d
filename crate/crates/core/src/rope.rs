//! Geometric rotary embeddings and the learnable spectral basis.
//!
//! A [`SpectralBasis`] holds one frequency, amplitude and phase per
//! dimension pair. Dimension pairs are interleaved: pair `j` is
//! `(x[2j], x[2j+1])`. With unit amplitude and zero phase the spectral
//! rotation reduces exactly to standard RoPE.

use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrplError};
use crate::tensor::{Tape, Tensor, Var};

/// Standard deviation of the phase perturbation applied in training mode.
pub const PHASE_NOISE_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationEngineKind {
    Standard,
    Spectral,
}

impl RotationEngineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RotationEngineKind::Standard => "standard",
            RotationEngineKind::Spectral => "spectral",
        }
    }
}

/// How phases are initialized next to the geometric frequencies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseInit {
    /// Phases exactly zero; the basis reproduces standard RoPE bit for bit.
    Surgical,
    /// Phases drawn i.i.d. from N(0, std²) with a dedicated RNG stream.
    Noise { std: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisTrainable {
    pub omega: bool,
    pub amplitude: bool,
    pub phase: bool,
}

impl BasisTrainable {
    pub const ALL: BasisTrainable = BasisTrainable {
        omega: true,
        amplitude: true,
        phase: true,
    };
    pub const NONE: BasisTrainable = BasisTrainable {
        omega: false,
        amplitude: false,
        phase: false,
    };

    pub fn any(&self) -> bool {
        self.omega || self.amplitude || self.phase
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Query,
    Key,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    pub omega: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub phase_q: Vec<f64>,
    pub phase_k: Vec<f64>,
    /// When set, `phase_k` mirrors `phase_q` and only one phase vector trains.
    pub tied: bool,
    pub trainable: BasisTrainable,
}

/// `base^(-2i/d)` for `i = 0..d/2`.
pub fn geometric_frequencies(d: usize, base: f64) -> Result<Vec<f64>> {
    if d < 2 || !d.is_multiple_of(2) {
        return Err(SrplError::contract(format!("rotary dimension must be even and >= 2, got {d}")));
    }
    if !(base > 0.0 && base.is_finite()) {
        return Err(SrplError::contract(format!("rotary base must be positive, got {base}")));
    }
    Ok((0..d / 2).map(|i| base.powf(-(2.0 * i as f64) / d as f64)).collect())
}

/// Geometric frequencies, unit amplitude, tied phases.
pub fn geometric_init(d: usize, base: f64, phase: PhaseInit) -> Result<SpectralBasis> {
    let omega = geometric_frequencies(d, base)?;
    let half = omega.len();
    let phase_q = match phase {
        PhaseInit::Surgical => vec![0.0; half],
        PhaseInit::Noise { std, seed } => {
            let normal = Normal::new(0.0, std).map_err(|e| SrplError::contract(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..half).map(|_| normal.sample(&mut rng)).collect()
        }
    };
    Ok(SpectralBasis {
        omega,
        amplitude: vec![1.0; half],
        phase_k: phase_q.clone(),
        phase_q,
        tied: true,
        trainable: BasisTrainable::ALL,
    })
}

impl SpectralBasis {
    pub fn half_dim(&self) -> usize {
        self.omega.len()
    }

    pub fn dim(&self) -> usize {
        2 * self.omega.len()
    }

    pub fn untied(mut self) -> Self {
        self.tied = false;
        self
    }

    pub fn with_trainable(mut self, trainable: BasisTrainable) -> Self {
        self.trainable = trainable;
        self
    }

    pub fn phase(&self, side: Side) -> &[f64] {
        match side {
            Side::Query => &self.phase_q,
            Side::Key => &self.phase_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.omega.len();
        if h == 0 || self.amplitude.len() != h || self.phase_q.len() != h || self.phase_k.len() != h {
            return Err(SrplError::Dimension {
                op: "spectral basis",
                lhs: vec![self.omega.len(), self.amplitude.len()],
                rhs: vec![self.phase_q.len(), self.phase_k.len()],
            });
        }
        if self.tied && self.phase_q != self.phase_k {
            return Err(SrplError::State("tied basis with differing phase vectors".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !(finite(&self.omega) && finite(&self.amplitude) && finite(&self.phase_q) && finite(&self.phase_k)) {
            return Err(SrplError::NonFinite { op: "spectral basis" });
        }
        Ok(())
    }

    fn check_dim(&self, d: usize, op: &'static str) -> Result<()> {
        if d != self.dim() {
            return Err(SrplError::Dimension {
                op,
                lhs: vec![d],
                rhs: vec![self.dim()],
            });
        }
        Ok(())
    }

    /// Writes the basis as CSV rows `index,omega,amplitude,phase_q,phase_k`,
    /// optionally prefixed with a `step` column.
    pub fn write_csv_rows<W: Write + ?Sized>(&self, w: &mut W, step: Option<usize>) -> std::io::Result<()> {
        for i in 0..self.half_dim() {
            if let Some(s) = step {
                write!(w, "{s},")?;
            }
            writeln!(
                w,
                "{i},{:e},{:e},{:e},{:e}",
                self.omega[i], self.amplitude[i], self.phase_q[i], self.phase_k[i]
            )?;
        }
        Ok(())
    }

    pub fn write_csv<W: Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "index,omega,amplitude,phase_q,phase_k")?;
        self.write_csv_rows(w, None)
    }

    /// Parses the CSV emitted by [`SpectralBasis::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<SpectralBasis> {
        let mut b = SpectralBasis {
            omega: vec![],
            amplitude: vec![],
            phase_q: vec![],
            phase_k: vec![],
            tied: true,
            trainable: BasisTrainable::ALL,
        };
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| SrplError::format(format!("basis csv line {}: {e}", n + 1)))?;
            if f.len() != 5 || f[0] as usize != b.omega.len() {
                return Err(SrplError::format(format!("basis csv line {}: malformed row", n + 1)));
            }
            b.omega.push(f[1]);
            b.amplitude.push(f[2]);
            b.phase_q.push(f[3]);
            b.phase_k.push(f[4]);
        }
        b.tied = b.phase_q == b.phase_k;
        b.validate()?;
        Ok(b)
    }
}

/// Tape handles for one basis. `phase_k` equals `phase_q` when tied.
#[derive(Debug, Clone, Copy)]
pub struct BasisVars {
    pub omega: Var,
    pub amplitude: Var,
    pub phase_q: Var,
    pub phase_k: Var,
}

impl BasisVars {
    /// Places the basis on `tape`. Under the standard engine every component
    /// is a constant; otherwise each follows its trainable flag.
    pub fn register(tape: &mut Tape, basis: &SpectralBasis, engine: RotationEngineKind) -> BasisVars {
        let spectral = engine == RotationEngineKind::Spectral;
        let t = basis.trainable;
        let leaf = |tape: &mut Tape, v: &[f64], grad: bool| {
            tape.leaf(&Tensor::vector(v.to_vec()).expect("non-empty basis").with_grad(grad))
        };
        let omega = leaf(tape, &basis.omega, spectral && t.omega);
        let amplitude = leaf(tape, &basis.amplitude, spectral && t.amplitude);
        let phase_q = leaf(tape, &basis.phase_q, spectral && t.phase);
        let phase_k = if basis.tied {
            phase_q
        } else {
            leaf(tape, &basis.phase_k, spectral && t.phase)
        };
        BasisVars {
            omega,
            amplitude,
            phase_q,
            phase_k,
        }
    }

    pub fn phase(&self, side: Side) -> Var {
        match side {
            Side::Query => self.phase_q,
            Side::Key => self.phase_k,
        }
    }

    /// Rotates `x` (`[rows × heads·d]`) on the tape.
    pub fn rotate(&self, tape: &mut Tape, x: Var, positions: &[usize], side: Side) -> Result<Var> {
        tape.rotate(x, positions, self.omega, self.amplitude, self.phase(side))
    }
}

/// Applies the spectral rotation to a `[seq × d]` tensor.
pub fn spectral_rotate(x: &Tensor, positions: &[usize], basis: &SpectralBasis, side: Side) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(SrplError::Dimension {
            op: "spectral_rotate",
            lhs: shape.to_vec(),
            rhs: vec![positions.len(), basis.dim()],
        });
    }
    basis.check_dim(shape[1], "spectral_rotate")?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let vars = BasisVars::register(&mut tape, basis, RotationEngineKind::Standard);
    let out = vars.rotate(&mut tape, xv, positions, side)?;
    Ok(tape.to_tensor(out))
}

/// Inner product of the query rotated at position `m` with the key rotated at `n`.
pub fn pairwise_score(q: &[f64], k: &[f64], m: usize, n: usize, basis: &SpectralBasis) -> Result<f64> {
    basis.check_dim(q.len(), "pairwise_score")?;
    basis.check_dim(k.len(), "pairwise_score")?;
    let qt = Tensor::new(vec![1, q.len()], q.to_vec())?;
    let kt = Tensor::new(vec![1, k.len()], k.to_vec())?;
    let qr = spectral_rotate(&qt, &[m], basis, Side::Query)?;
    let kr = spectral_rotate(&kt, &[n], basis, Side::Key)?;
    Ok(qr.data().iter().zip(kr.data()).map(|(a, b)| a * b).sum())
}

/// Frequencies `2πk/N` for `k = 1..=k_max`; each satisfies `cos(ωN) = 1`.
pub fn resonance_frequencies(n: usize, k_max: usize) -> Vec<f64> {
    let n = n as f64;
    (1..=k_max).map(|k| TAU * k as f64 / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MismatchReport {
    pub distance: usize,
    pub cosines: Vec<f64>,
    pub best: f64,
    pub best_index: usize,
}

/// `cos(omega[i] · N)` for every frequency, plus the best alignment.
pub fn mismatch_report(basis: &SpectralBasis, distance: usize) -> MismatchReport {
    let n = distance as f64;
    let cosines: Vec<f64> = basis.omega.iter().map(|w| (w * n).cos()).collect();
    let (best_index, best) = cosines
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, c)| if c > acc.1 { (i, c) } else { acc });
    MismatchReport {
        distance,
        cosines,
        best,
        best_index,
    }
}
