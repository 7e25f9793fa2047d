//! Post-hoc reports over trained bases, hidden states and run histories.
//!
//! Nothing here passes or fails a run: the reports describe what happened.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Result, SrplError};
use crate::model::Model;
use crate::rope::{mismatch_report, RotationEngineKind, SpectralBasis};
use crate::tasks::{dyck_depths, SampleMeta, TaskKind, TaskSample, TaskSpec};
use crate::train::{BasisSnapshot, RunHistory};

/// Mean absolute phase shift reported in the literature for a trained
/// spectral basis. Recorded next to measurements for comparison only.
pub const REFERENCE_MEAN_PHASE_SHIFT: f64 = 7.6e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    /// Learned minus initial query-side phase per pair index.
    pub delta_q: Vec<f64>,
    /// Key-side shifts; only present for untied bases.
    pub delta_k: Option<Vec<f64>>,
    /// Mean |Δφ| over every reported shift.
    pub mean_abs_shift: f64,
    /// Fraction of adjacent index pairs whose shifts have opposite signs.
    pub alternation_rate: f64,
    pub reference_mean_shift: f64,
}

pub fn zigzag_report(initial: &SpectralBasis, trained: &SpectralBasis) -> Result<PhaseReport> {
    if initial.half_dim() != trained.half_dim() {
        return Err(SrplError::contract(format!(
            "zigzag_report: bases have {} and {} pairs",
            initial.half_dim(),
            trained.half_dim()
        )));
    }
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { b.iter().zip(a).map(|(t, i)| t - i).collect() };
    let delta_q = diff(&initial.phase_q, &trained.phase_q);
    let delta_k = (!trained.tied || !initial.tied).then(|| diff(&initial.phase_k, &trained.phase_k));
    let sides: Vec<&[f64]> = std::iter::once(delta_q.as_slice()).chain(delta_k.as_deref()).collect();
    let (mut abs_sum, mut count, mut flips, mut adjacent) = (0.0, 0usize, 0usize, 0usize);
    for side in &sides {
        abs_sum += side.iter().map(|d| d.abs()).sum::<f64>();
        count += side.len();
        for w in side.windows(2) {
            adjacent += 1;
            flips += (w[0] * w[1] < 0.0) as usize;
        }
    }
    Ok(PhaseReport {
        mean_abs_shift: if count == 0 { 0.0 } else { abs_sum / count as f64 },
        alternation_rate: if adjacent == 0 { 0.0 } else { flips as f64 / adjacent as f64 },
        delta_q,
        delta_k,
        reference_mean_shift: REFERENCE_MEAN_PHASE_SHIFT,
    })
}

impl PhaseReport {
    pub fn write_csv<W: Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "index,delta_phase_q,delta_phase_k")?;
        for (i, dq) in self.delta_q.iter().enumerate() {
            match &self.delta_k {
                Some(dk) => writeln!(w, "{i},{dq:e},{:e}", dk[i])?,
                None => writeln!(w, "{i},{dq:e},")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthProbeReport {
    pub max_depth: usize,
    /// Occupancy of each depth bucket `0..=max_depth`.
    pub counts: Vec<usize>,
    /// Mean final-layer hidden vector per bucket; `None` when absent.
    pub means: Vec<Option<Vec<f64>>>,
    /// Cosine similarity between bucket means; `None` rows/columns are absent.
    pub gram: Vec<Vec<Option<f64>>>,
    /// `gram[d][d+1]` for `d = 0..max_depth`.
    pub adjacent: Vec<Option<f64>>,
    /// Coordinates of each bucket mean on the top two principal directions.
    pub projection: Vec<Option<[f64; 2]>>,
    /// Variance captured by the two principal directions.
    pub explained_variance: [f64; 2],
}

/// Stack depth after each symbol of a Dyck sample's input.
pub fn sample_depths(task: &TaskSpec, sample: &TaskSample) -> Result<Vec<usize>> {
    if task.kind != TaskKind::Dyck3 {
        return Err(SrplError::contract("depth probing needs Dyck samples"));
    }
    let s: String = sample
        .input_tokens
        .iter()
        .map(|&t| task.symbol(t))
        .collect::<Result<Vec<_>>>()?
        .concat();
    dyck_depths(&s)
}

pub fn depth_probe(model: &Model, task: &TaskSpec, samples: &[TaskSample], max_depth: usize) -> Result<DepthProbeReport> {
    let hidden = model.config().hidden_dim;
    let buckets = max_depth + 1;
    let mut sums = vec![vec![0.0; hidden]; buckets];
    let mut counts = vec![0usize; buckets];
    for sample in samples {
        if !task.validate(sample)? {
            return Err(SrplError::input(format!("sample with seed {} fails the Dyck oracle", sample.seed)));
        }
        let depths = sample_depths(task, sample)?;
        let h = model.forward_hidden(&sample.input_tokens)?;
        for (t, &d) in depths.iter().enumerate() {
            if d > max_depth {
                continue;
            }
            counts[d] += 1;
            for (acc, v) in sums[d].iter_mut().zip(h.row(t)) {
                *acc += v;
            }
        }
    }
    let means: Vec<Option<Vec<f64>>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect()))
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let gram: Vec<Vec<Option<f64>>> = (0..buckets)
        .map(|a| {
            (0..buckets)
                .map(|b| match (&means[a], &means[b]) {
                    (Some(va), Some(vb)) => {
                        let (na, nb) = (norm(va), norm(vb));
                        if a == b {
                            Some(1.0)
                        } else if na == 0.0 || nb == 0.0 {
                            None
                        } else {
                            Some(va.iter().zip(vb).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
                        }
                    }
                    _ => None,
                })
                .collect()
        })
        .collect();
    let adjacent = (0..max_depth).map(|d| gram[d][d + 1]).collect();
    let (projection, explained_variance) = principal_projection(&means, hidden);
    Ok(DepthProbeReport {
        max_depth,
        counts,
        means,
        gram,
        adjacent,
        projection,
        explained_variance,
    })
}

fn principal_projection(means: &[Option<Vec<f64>>], dim: usize) -> (Vec<Option<[f64; 2]>>, [f64; 2]) {
    let present: Vec<&Vec<f64>> = means.iter().flatten().collect();
    if present.is_empty() {
        return (vec![None; means.len()], [0.0; 2]);
    }
    let n = present.len() as f64;
    let center: Vec<f64> = (0..dim).map(|c| present.iter().map(|v| v[c]).sum::<f64>() / n).collect();
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for v in &present {
        let x = DMatrix::from_iterator(dim, 1, v.iter().zip(&center).map(|(a, c)| a - c));
        cov += &x * x.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&i| {
            let col: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // Sign convention: the largest-magnitude component is positive.
            let pivot = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            let s = if pivot < 0.0 { -1.0 } else { 1.0 };
            col.into_iter().map(|x| x * s).collect()
        })
        .collect();
    let project = |v: &Vec<f64>, axis: usize| -> f64 {
        axes.get(axis)
            .map_or(0.0, |a| a.iter().zip(v.iter().zip(&center)).map(|(e, (x, c))| e * (x - c)).sum())
    };
    let coords = means.iter().map(|m| m.as_ref().map(|v| [project(v, 0), project(v, 1)])).collect();
    let ev = |k: usize| order.get(k).map_or(0.0, |&i| eig.eigenvalues[i].max(0.0));
    (coords, [ev(0), ev(1)])
}

impl DepthProbeReport {
    pub fn write_gram_csv<W: Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        let header: Vec<String> = (0..=self.max_depth).map(|d| format!("d{d}")).collect();
        writeln!(w, "depth,count,{}", header.join(","))?;
        for (d, row) in self.gram.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.map_or_else(|| "absent".into(), |v| format!("{v:e}"))).collect();
            writeln!(w, "{d},{},{}", self.counts[d], cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_projection_csv<W: Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "depth,count,pc1,pc2")?;
        for (d, p) in self.projection.iter().enumerate() {
            match p {
                Some([x, y]) => writeln!(w, "{d},{},{x:e},{y:e}", self.counts[d])?,
                None => writeln!(w, "{d},0,absent,absent")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResonancePoint {
    pub step: usize,
    /// Best `cos(ω·N)` per layer.
    pub layer_best: Vec<f64>,
    /// Best over all layers.
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResonanceTrajectory {
    pub distance: usize,
    pub points: Vec<ResonancePoint>,
}

impl ResonanceTrajectory {
    pub fn initial(&self) -> f64 {
        self.points.first().map_or(f64::NAN, |p| p.best)
    }

    pub fn final_value(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.best)
    }

    pub fn write_csv<W: Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        let layers = self.points.first().map_or(0, |p| p.layer_best.len());
        let cols: Vec<String> = (0..layers).map(|l| format!("layer{l}")).collect();
        writeln!(w, "step,best,{}", cols.join(","))?;
        for p in &self.points {
            let cells: Vec<String> = p.layer_best.iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{},{:e},{}", p.step, p.best, cells.join(","))?;
        }
        Ok(())
    }
}

pub fn resonance_audit(snapshots: &[BasisSnapshot], distance: usize) -> Result<ResonanceTrajectory> {
    if distance == 0 {
        return Err(SrplError::contract("task distance must be >= 1"));
    }
    if snapshots.is_empty() {
        return Err(SrplError::Missing("resonance audit needs basis snapshots".into()));
    }
    let points = snapshots
        .iter()
        .map(|s| {
            let layer_best: Vec<f64> = s.bases.iter().map(|b| mismatch_report(b, distance).best).collect();
            let best = layer_best.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ResonancePoint {
                step: s.step,
                layer_best,
                best,
            }
        })
        .collect();
    Ok(ResonanceTrajectory { distance, points })
}

/// Mean motif-to-target distance over Bio samples, rounded.
pub fn task_distance(samples: &[TaskSample]) -> Result<usize> {
    let ds: Vec<usize> = samples
        .iter()
        .filter_map(|s| match s.metadata {
            SampleMeta::Bio { distance, .. } => Some(distance),
            _ => None,
        })
        .collect();
    if ds.is_empty() {
        return Err(SrplError::Missing("no Bio-Rotation samples to read a distance from".into()));
    }
    Ok((ds.iter().sum::<usize>() as f64 / ds.len() as f64).round() as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub task: TaskKind,
    pub standard: f64,
    pub spectral: f64,
    pub standard_range: (f64, f64),
    pub spectral_range: (f64, f64),
    /// `(standard − spectral) / standard`.
    pub gain: f64,
    pub winner: &'static str,
    pub seeds: usize,
}

impl CompareRow {
    pub fn from_losses(task: TaskKind, standard: f64, spectral: f64) -> CompareRow {
        let gain = if standard == spectral {
            0.0
        } else {
            (standard - spectral) / standard
        };
        let winner = if spectral < standard {
            "spectral"
        } else if standard < spectral {
            "standard"
        } else {
            "tie"
        };
        CompareRow {
            task,
            standard,
            spectral,
            standard_range: (standard, standard),
            spectral_range: (spectral, spectral),
            gain,
            winner,
            seeds: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

/// Aggregates final losses by task and engine (mean over seeds).
pub fn loss_compare(runs: &[RunHistory]) -> Result<CompareTable> {
    if runs.len() < 2 {
        return Err(SrplError::contract("loss_compare needs at least two runs"));
    }
    let mut rows = Vec::new();
    for task in TaskKind::ALL {
        let pick = |engine| -> Vec<f64> {
            runs.iter()
                .filter(|r| r.task == task && r.engine == engine)
                .map(RunHistory::final_loss)
                .collect()
        };
        let (std_losses, spec_losses) = (pick(RotationEngineKind::Standard), pick(RotationEngineKind::Spectral));
        match (std_losses.is_empty(), spec_losses.is_empty()) {
            (true, true) => continue,
            (false, false) => {}
            _ => {
                return Err(SrplError::contract(format!(
                    "task {} has runs for only one engine",
                    task.name()
                )))
            }
        }
        if std_losses.len() != spec_losses.len() {
            return Err(SrplError::contract(format!(
                "task {}: {} standard runs vs {} spectral runs",
                task.name(),
                std_losses.len(),
                spec_losses.len()
            )));
        }
        let stats = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (mean, (lo, hi))
        };
        let (s_mean, s_range) = stats(&std_losses);
        let (p_mean, p_range) = stats(&spec_losses);
        let mut row = CompareRow::from_losses(task, s_mean, p_mean);
        row.standard_range = s_range;
        row.spectral_range = p_range;
        row.seeds = std_losses.len();
        rows.push(row);
    }
    Ok(CompareTable { rows })
}

impl CompareTable {
    pub fn write_csv<W: Write + ?Sized>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "task,standard,spectral,gain,winner,seeds,standard_min,standard_max,spectral_min,spectral_max")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.task.name(),
                r.standard,
                r.spectral,
                r.gain,
                r.winner,
                r.seeds,
                r.standard_range.0,
                r.standard_range.1,
                r.spectral_range.0,
                r.spectral_range.1
            )?;
        }
        Ok(())
    }

    /// Plain-text table: task, both losses, gain in percent, winner.
    pub fn render(&self) -> String {
        let mut s = format!("{:<10} {:>12} {:>12} {:>9}  {}\n", "task", "standard", "spectral", "gain", "winner");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>12.4} {:>12.4} {:>8.1}%  {}\n",
                r.task.name(),
                r.standard,
                r.spectral,
                100.0 * r.gain,
                r.winner
            ));
        }
        s
    }
}

/// Long-format per-step curves for every run.
pub fn write_curves_csv<W: Write + ?Sized>(runs: &[RunHistory], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "task,engine,seed,step,loss")?;
    for r in runs {
        for (i, l) in r.losses.iter().enumerate() {
            writeln!(w, "{},{},{},{i},{l:e}", r.task.name(), r.engine.as_str(), r.seed)?;
        }
    }
    Ok(())
}

/// Share of the total descent that must fall inside one window for a drop
/// to count as abrupt.
pub const ABRUPT_DROP_SHARE: f64 = 0.25;

/// Steepest fall of the windowed mean loss over one training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossDrop {
    /// First step after the steepest window.
    pub step: usize,
    pub window: usize,
    /// Mean loss of the window before `step` minus the window from `step`.
    pub drop: f64,
    /// `drop` as a fraction of first-window mean minus last-window mean.
    pub share: f64,
    /// `share >= ABRUPT_DROP_SHARE`.
    pub abrupt: bool,
}

/// Locates the steepest descent of a loss curve, using non-overlapping
/// windows of `losses.len() / 40` steps (at least one). `None` when the
/// curve is shorter than two windows or does not descend overall.
pub fn loss_drop(losses: &[f64]) -> Option<LossDrop> {
    let window = (losses.len() / 40).max(1);
    if losses.len() < 2 * window {
        return None;
    }
    let mean = |from: usize| losses[from..from + window].iter().sum::<f64>() / window as f64;
    let total = mean(0) - mean(losses.len() - window);
    if total <= 0.0 || !total.is_finite() {
        return None;
    }
    let (step, drop) = (window..=losses.len() - window)
        .map(|t| (t, mean(t - window) - mean(t)))
        .fold((window, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    let share = drop / total;
    Some(LossDrop {
        step,
        window,
        drop,
        share,
        abrupt: share >= ABRUPT_DROP_SHARE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub task: String,
    pub engine: String,
    pub final_loss: f64,
    pub gain: Option<f64>,
    pub mean_abs_phase_shift: Option<f64>,
    pub alternation_rate: Option<f64>,
    pub best_resonance_initial: Option<f64>,
    pub best_resonance_final: Option<f64>,
    pub loss_drop: Option<LossDrop>,
}

/// Summary of one run. Phase statistics pool all layers; resonance needs a
/// task distance (Bio-Rotation only).
pub fn summarize(history: &RunHistory, distance: Option<usize>, gain: Option<f64>) -> Result<RunSummary> {
    let (mut shift, mut rate) = (None, None);
    if let (Some(first), Some(last)) = (history.snapshots.first(), history.snapshots.last()) {
        let reports = first
            .bases
            .iter()
            .zip(&last.bases)
            .map(|(a, b)| zigzag_report(a, b))
            .collect::<Result<Vec<_>>>()?;
        if !reports.is_empty() {
            let n = reports.len() as f64;
            shift = Some(reports.iter().map(|r| r.mean_abs_shift).sum::<f64>() / n);
            rate = Some(reports.iter().map(|r| r.alternation_rate).sum::<f64>() / n);
        }
    }
    let (mut r0, mut r1) = (None, None);
    if let Some(n) = distance {
        let traj = resonance_audit(&history.snapshots, n)?;
        r0 = Some(traj.initial());
        r1 = Some(traj.final_value());
    }
    Ok(RunSummary {
        task: history.task.name().into(),
        engine: history.engine.as_str().into(),
        final_loss: history.final_loss(),
        gain,
        mean_abs_phase_shift: shift,
        alternation_rate: rate,
        best_resonance_initial: r0,
        best_resonance_final: r1,
        loss_drop: loss_drop(&history.losses),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{geometric_init, PhaseInit};
    use std::f64::consts::TAU;

    fn basis(phases: &[f64]) -> SpectralBasis {
        let mut b = geometric_init(2 * phases.len(), 10000.0, PhaseInit::Surgical).unwrap();
        b.phase_q = phases.to_vec();
        b.phase_k = phases.to_vec();
        b
    }

    #[test]
    fn loss_drop_finds_the_step() {
        let mut curve = vec![2.0; 200];
        curve.extend(vec![0.5; 200]);
        let d = loss_drop(&curve).unwrap();
        assert_eq!((d.step, d.window), (200, 10));
        assert_eq!(d.drop, 1.5);
        assert_eq!(d.share, 1.0);
        assert!(d.abrupt);

        let linear: Vec<f64> = (0..400).map(|i| 2.0 - i as f64 / 400.0).collect();
        let d = loss_drop(&linear).unwrap();
        assert!(!d.abrupt, "{d:?}");
        assert!(loss_drop(&[1.0, 2.0, 3.0]).is_none());
        assert!(loss_drop(&[]).is_none());
    }

    #[test]
    fn zigzag_examples() {
        let b = basis(&[0.1, 0.2, 0.3, 0.4]);
        let same = zigzag_report(&b, &b).unwrap();
        assert_eq!(same.mean_abs_shift, 0.0);
        assert_eq!(same.alternation_rate, 0.0);
        let z = basis(&[0.0; 4]);
        let t = basis(&[1e-3, -1e-3, 1e-3, -1e-3]);
        let r = zigzag_report(&z, &t).unwrap();
        assert_eq!(r.alternation_rate, 1.0);
        assert!((r.mean_abs_shift - 1e-3).abs() < 1e-18);
        assert!(r.delta_k.is_none());
        assert!(zigzag_report(&z, &basis(&[0.0; 2])).is_err());
    }

    #[test]
    fn resonance_hits_one_at_harmonic() {
        let mut b = basis(&[0.0, 0.0]);
        b.omega = vec![TAU / 60.0, 0.5];
        let snaps = vec![BasisSnapshot { step: 0, bases: vec![b] }];
        let r = resonance_audit(&snaps, 60).unwrap();
        assert!((r.points[0].best - 1.0).abs() < 1e-12);
        assert!(matches!(resonance_audit(&[], 60), Err(SrplError::Missing(_))));
    }

    #[test]
    fn compare_gain_and_tie() {
        let r = CompareRow::from_losses(TaskKind::Dyck3, 0.4293, 0.0008);
        assert!((r.gain - 0.998).abs() < 5e-4);
        assert_eq!(r.winner, "spectral");
        let t = CompareRow::from_losses(TaskKind::Dyck3, 0.5, 0.5);
        assert_eq!((t.gain, t.winner), (0.0, "tie"));
    }
}
