//! Eight-Gaussian ring benchmark: sampling, training, density estimation and
//! mode-collapse accounting.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::time::Duration;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::nn::NnError;
use crate::objectives::LossScheme;
use crate::rng::{stream, substream, Rng};
use crate::tensor::Tensor;
use crate::train::{adversarial_train, LossRow, Networks, TrialConfig, TrialStatus};

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("invalid ring: {0}")]
    InvalidRing(String),
    #[error("invalid trial config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("invalid coverage criterion: {0}")]
    InvalidCriterion(String),
    #[error("kde: {0}")]
    Kde(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("worker pool: {0}")]
    Pool(String),
}

/// Mixture of equal-weight isotropic Gaussians centered on a circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingMixtureSpec {
    pub n_modes: usize,
    pub radius: f64,
    pub component_std: f64,
    pub seed: u64,
}

impl Default for RingMixtureSpec {
    fn default() -> Self {
        RingMixtureSpec {
            n_modes: 8,
            radius: 2.0,
            component_std: 0.02,
            seed: 0,
        }
    }
}

impl RingMixtureSpec {
    pub fn validate(&self) -> Result<(), GmmError> {
        if self.n_modes == 0 {
            return Err(GmmError::InvalidRing("n_modes must be at least 1".into()));
        }
        if !(self.radius > 0.0) {
            return Err(GmmError::InvalidRing(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.component_std >= 0.0) {
            return Err(GmmError::InvalidRing(format!(
                "component_std must be non-negative, got {}",
                self.component_std
            )));
        }
        Ok(())
    }

    /// Mode `k` sits at angle `2πk / n_modes`.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.n_modes)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / self.n_modes as f64;
                [self.radius * t.cos(), self.radius * t.sin()]
            })
            .collect()
    }

    /// `n` draws as a `[n, 2]` tensor: uniform mode, then Gaussian offset.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Tensor {
        let centers = self.centers();
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = centers[rng.random_range(0..centers.len())];
            let dx: f64 = StandardNormal.sample(rng);
            let dy: f64 = StandardNormal.sample(rng);
            data.push(c[0] + self.component_std * dx);
            data.push(c[1] + self.component_std * dy);
        }
        Tensor::new(&[n, 2], data).expect("n * 2 entries")
    }
}

/// `n` samples from the ring using the spec's own seed.
pub fn sample_ring8(spec: &RingMixtureSpec, n: usize) -> Tensor {
    spec.sample(&mut substream(spec.seed, stream::DATA), n)
}

/// Thresholds deciding when a mode counts as captured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageCriterion {
    /// Absolute distance from a center within which a sample counts.
    pub capture_radius: f64,
    /// Fraction of all samples a mode needs to be captured.
    pub min_frac: f64,
}

impl Default for CoverageCriterion {
    fn default() -> Self {
        CoverageCriterion {
            capture_radius: 0.2,
            min_frac: 0.02,
        }
    }
}

impl CoverageCriterion {
    pub fn validate(&self) -> Result<(), GmmError> {
        if !(self.capture_radius > 0.0) {
            return Err(GmmError::InvalidCriterion(format!(
                "capture_radius must be positive, got {}",
                self.capture_radius
            )));
        }
        if !(self.min_frac > 0.0 && self.min_frac < 1.0) {
            return Err(GmmError::InvalidCriterion(format!(
                "min_frac must lie in (0, 1), got {}",
                self.min_frac
            )));
        }
        Ok(())
    }
}

/// Mode coverage of one batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeCoverage {
    pub counts: Vec<usize>,
    pub captured: Vec<bool>,
    pub n_captured: usize,
    /// Samples sit around at most two modes.
    pub collapse: bool,
}

/// Collapse threshold: one or two captured modes (or none).
pub const COLLAPSE_MAX_MODES: usize = 2;

pub fn mode_coverage(samples: &Tensor, spec: &RingMixtureSpec, criterion: &CoverageCriterion) -> ModeCoverage {
    let centers = spec.centers();
    let mut counts = vec![0usize; centers.len()];
    let r2 = criterion.capture_radius * criterion.capture_radius;
    let n = samples.rows();
    for i in 0..n {
        let p = samples.row(i);
        for (k, c) in centers.iter().enumerate() {
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            if d2 <= r2 {
                counts[k] += 1;
            }
        }
    }
    let needed = criterion.min_frac * n as f64;
    let captured: Vec<bool> = counts.iter().map(|&c| c > 0 && c as f64 >= needed).collect();
    let n_captured = captured.iter().filter(|&&c| c).count();
    ModeCoverage {
        counts,
        captured,
        n_captured,
        collapse: n_captured <= COLLAPSE_MAX_MODES,
    }
}

/// Coverage at every checkpoint of a trial.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModeCoverageReport {
    pub history: Vec<(usize, ModeCoverage)>,
}

impl ModeCoverageReport {
    pub fn last(&self) -> Option<&ModeCoverage> {
        self.history.last().map(|(_, c)| c)
    }

    pub fn n_captured(&self) -> usize {
        self.last().map_or(0, |c| c.n_captured)
    }

    /// Collapse observed at any checkpoint.
    pub fn ever_collapsed(&self) -> bool {
        self.history.iter().any(|(_, c)| c.collapse)
    }
}

#[derive(Debug, Clone)]
pub struct TrialReport {
    pub config: TrialConfig,
    pub ring: RingMixtureSpec,
    pub status: TrialStatus,
    pub coverage: ModeCoverageReport,
    pub losses: Vec<LossRow>,
    /// Generated samples per checkpoint iteration.
    pub checkpoints: Vec<(usize, Tensor)>,
    pub wall_time: Duration,
}

impl TrialReport {
    pub fn final_losses(&self) -> Option<LossRow> {
        self.losses.last().copied()
    }

    /// Deterministic text encoding of everything except wall time.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = String::new();
        let _ = writeln!(s, "config {:?}", self.config);
        let _ = writeln!(s, "ring {:?}", self.ring);
        let _ = writeln!(s, "status {:?}", self.status);
        for (iter, c) in &self.coverage.history {
            let _ = writeln!(s, "coverage {iter} {:?}", c.counts);
        }
        for l in &self.losses {
            let _ = writeln!(s, "loss {} {} {} {}", l.iter, l.d_loss, l.g_loss, l.penalty);
        }
        let mut bytes = s.into_bytes();
        for (iter, samples) in &self.checkpoints {
            bytes.extend_from_slice(format!("samples {iter}\n").as_bytes());
            for v in samples.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }
}

/// Trains one GAN on the ring and tracks mode coverage at every checkpoint.
pub fn train_gan(ring: &RingMixtureSpec, trial: &TrialConfig, criterion: &CoverageCriterion) -> Result<TrialReport, GmmError> {
    ring.validate()?;
    criterion.validate()?;
    let violations = trial.violations();
    if !violations.is_empty() {
        return Err(GmmError::InvalidConfig(violations));
    }
    let mut nets = Networks::init(&trial.generator_spec(2, false), &trial.discriminator_spec(2), trial.seed)?;
    let mut coverage = ModeCoverageReport::default();
    let mut checkpoints = Vec::new();
    let outcome = adversarial_train(
        &mut nets,
        trial,
        |rng, n| ring.sample(rng, n),
        |iter, samples| {
            coverage.history.push((iter, mode_coverage(&samples, ring, criterion)));
            checkpoints.push((iter, samples));
        },
    );
    Ok(TrialReport {
        config: trial.clone(),
        ring: *ring,
        status: outcome.status,
        coverage,
        losses: outcome.losses,
        checkpoints,
        wall_time: outcome.wall_time,
    })
}

/// Collapse counts for one scheme across repeated trials.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeSummary {
    pub scheme: LossScheme,
    pub optimizer: crate::nn::OptimizerKind,
    pub trials: usize,
    /// Completed trials that collapsed at some checkpoint.
    pub collapsed: usize,
    pub non_collapsed: usize,
    /// Trials that hit a non-finite value.
    pub failed: usize,
}

impl SchemeSummary {
    /// Collapsed plus failed: a trial that diverged counts as collapsed.
    pub fn collapsed_total(&self) -> usize {
        self.collapsed + self.failed
    }
}

pub struct TrialsOutcome {
    pub summaries: Vec<SchemeSummary>,
    /// `reports[s][t]` is trial `t` of scheme `s`.
    pub reports: Vec<Vec<TrialReport>>,
}

/// Collapse accounting for one scheme's trials.
pub fn summarize(scheme: LossScheme, optimizer: crate::nn::OptimizerKind, reports: &[TrialReport]) -> SchemeSummary {
    let failed = reports.iter().filter(|r| r.status.is_failed()).count();
    let collapsed = reports
        .iter()
        .filter(|r| !r.status.is_failed() && r.coverage.ever_collapsed())
        .count();
    SchemeSummary {
        scheme,
        optimizer,
        trials: reports.len(),
        collapsed,
        non_collapsed: reports.len() - collapsed - failed,
        failed,
    }
}

/// Runs `n_trials` trials per scheme with seeds `base.seed + trial_index` on
/// `workers` threads. Results are ordered by scheme then trial index
/// regardless of completion order.
pub fn run_trials_with<F>(
    base: &TrialConfig,
    n_trials: usize,
    schemes: &[LossScheme],
    workers: usize,
    runner: F,
) -> Result<TrialsOutcome, GmmError>
where
    F: Fn(&TrialConfig) -> Result<TrialReport, GmmError> + Sync,
{
    assert!(n_trials >= 1, "at least one trial");
    let jobs: Vec<TrialConfig> = schemes
        .iter()
        .flat_map(|&scheme| {
            (0..n_trials).map(move |t| TrialConfig {
                scheme,
                seed: base.seed.wrapping_add(t as u64),
                ..base.clone()
            })
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| GmmError::Pool(e.to_string()))?;
    let results: Vec<Result<TrialReport, GmmError>> = pool.install(|| jobs.par_iter().map(&runner).collect());
    let mut flat = Vec::with_capacity(results.len());
    for r in results {
        flat.push(r?);
    }

    let mut summaries = Vec::new();
    let mut reports = Vec::new();
    let mut it = flat.into_iter();
    for &scheme in schemes {
        let group: Vec<TrialReport> = it.by_ref().take(n_trials).collect();
        summaries.push(summarize(scheme, base.optimizer, &group));
        reports.push(group);
    }
    Ok(TrialsOutcome { summaries, reports })
}

pub fn run_trials(
    ring: &RingMixtureSpec,
    base: &TrialConfig,
    criterion: &CoverageCriterion,
    n_trials: usize,
    schemes: &[LossScheme],
    workers: usize,
) -> Result<TrialsOutcome, GmmError> {
    run_trials_with(base, n_trials, schemes, workers, |cfg| train_gan(ring, cfg, criterion))
}

/// `scheme,optimizer,trials,collapsed,failed`; `collapsed` includes failed
/// trials.
pub fn write_summary_csv(summaries: &[SchemeSummary], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "scheme,optimizer,trials,collapsed,failed")?;
    for s in summaries {
        writeln!(
            w,
            "{},{},{},{},{}",
            s.scheme,
            s.optimizer,
            s.trials,
            s.collapsed_total(),
            s.failed
        )?;
    }
    Ok(())
}

/// `iter,x,y` rows for every checkpoint of a trial.
pub fn write_samples_csv(checkpoints: &[(usize, Tensor)], mut w: impl Write) -> io::Result<()> {
    writeln!(w, "iter,x,y")?;
    for (iter, samples) in checkpoints {
        for i in 0..samples.rows() {
            let p = samples.row(i);
            writeln!(w, "{iter},{},{}", p[0], p[1])?;
        }
    }
    Ok(())
}

/// Gaussian kernel density estimate on a regular grid of cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub resolution: usize,
    pub bandwidth: f64,
    /// Row-major `[resolution, resolution]`; row index follows y, column x.
    pub density: Vec<f64>,
}

impl KdeGrid {
    pub fn cell_area(&self) -> f64 {
        let dx = (self.x_range.1 - self.x_range.0) / self.resolution as f64;
        let dy = (self.y_range.1 - self.y_range.0) / self.resolution as f64;
        dx * dy
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let dx = (self.x_range.1 - self.x_range.0) / self.resolution as f64;
        let dy = (self.y_range.1 - self.y_range.0) / self.resolution as f64;
        (
            self.x_range.0 + (col as f64 + 0.5) * dx,
            self.y_range.0 + (row as f64 + 0.5) * dy,
        )
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.density[row * self.resolution + col]
    }

    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_area()
    }

    /// `(row, col)` of the largest density value.
    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (i / self.resolution, i % self.resolution)
    }

    /// Binary PGM (P5), density mapped linearly onto 0..=255, top row = max y.
    pub fn write_pgm(&self, mut w: impl Write) -> io::Result<()> {
        let max = self.density.iter().cloned().fold(0.0, f64::max);
        write!(w, "P5\n{} {}\n255\n", self.resolution, self.resolution)?;
        let mut bytes = Vec::with_capacity(self.density.len());
        for row in (0..self.resolution).rev() {
            for col in 0..self.resolution {
                let v = if max > 0.0 { self.at(row, col) / max } else { 0.0 };
                bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        w.write_all(&bytes)
    }
}

/// 2-D Gaussian KDE of `[n, 2]` samples over `x_range × y_range`.
pub fn kde(
    samples: &Tensor,
    x_range: (f64, f64),
    y_range: (f64, f64),
    resolution: usize,
    bandwidth: f64,
) -> Result<KdeGrid, GmmError> {
    if samples.rows() < 2 || samples.cols() != 2 {
        return Err(GmmError::Kde(format!("need at least 2 two-dimensional samples, got shape {:?}", samples.shape())));
    }
    if !(bandwidth > 0.0) || resolution == 0 || !(x_range.0 < x_range.1) || !(y_range.0 < y_range.1) {
        return Err(GmmError::Kde("bandwidth, resolution and extents must be positive".into()));
    }
    let mut grid = KdeGrid {
        x_range,
        y_range,
        resolution,
        bandwidth,
        density: vec![0.0; resolution * resolution],
    };
    let xs: Vec<f64> = (0..resolution).map(|c| grid.cell_center(0, c).0).collect();
    let ys: Vec<f64> = (0..resolution).map(|r| grid.cell_center(r, 0).1).collect();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let n = samples.rows();
    let norm = 1.0 / (2.0 * PI * bandwidth * bandwidth * n as f64);
    let mut ex = vec![0.0; resolution];
    let mut ey = vec![0.0; resolution];
    for i in 0..n {
        let p = samples.row(i);
        for (e, x) in ex.iter_mut().zip(&xs) {
            *e = (-(x - p[0]).powi(2) * inv).exp();
        }
        for (e, y) in ey.iter_mut().zip(&ys) {
            *e = (-(y - p[1]).powi(2) * inv).exp();
        }
        for (r, &wy) in ey.iter().enumerate() {
            if wy < 1e-300 {
                continue;
            }
            let row = &mut grid.density[r * resolution..(r + 1) * resolution];
            for (d, &wx) in row.iter_mut().zip(&ex) {
                *d += wy * wx;
            }
        }
    }
    for d in &mut grid.density {
        *d *= norm;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_lie_on_circle() {
        let spec = RingMixtureSpec::default();
        let c = spec.centers();
        assert_eq!(c.len(), 8);
        for p in &c {
            assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 2.0).abs() < 1e-12);
        }
        assert!((c[2][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_std_samples_hit_centers() {
        let spec = RingMixtureSpec {
            component_std: 0.0,
            ..Default::default()
        };
        let s = sample_ring8(&spec, 200);
        let centers = spec.centers();
        for i in 0..200 {
            let p = s.row(i);
            assert!(centers.iter().any(|c| c[0] == p[0] && c[1] == p[1]));
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let spec = RingMixtureSpec::default();
        assert_eq!(sample_ring8(&spec, 50), sample_ring8(&spec, 50));
        let other = RingMixtureSpec { seed: 1, ..spec };
        assert_ne!(sample_ring8(&spec, 50), sample_ring8(&other, 50));
    }

    #[test]
    fn coverage_examples() {
        let spec = RingMixtureSpec::default();
        let crit = CoverageCriterion::default();
        let one = Tensor::new(&[100, 2], [2.0, 0.0].repeat(100)).unwrap();
        let c = mode_coverage(&one, &spec, &crit);
        assert_eq!(c.n_captured, 1);
        assert!(c.collapse);

        let full = sample_ring8(&spec, 10_000);
        let c = mode_coverage(&full, &spec, &crit);
        assert_eq!(c.n_captured, 8);
        assert!(!c.collapse);

        let far = Tensor::new(&[4, 2], vec![50.0, 50.0, -50.0, 50.0, 50.0, -50.0, -50.0, -50.0]).unwrap();
        let c = mode_coverage(&far, &spec, &crit);
        assert_eq!(c.n_captured, 0);
        assert!(c.collapse);
    }

    #[test]
    fn single_cluster_kde_peaks_at_origin() {
        let spec = RingMixtureSpec {
            n_modes: 1,
            radius: 1e-9,
            component_std: 0.05,
            seed: 3,
        };
        let s = sample_ring8(&spec, 500);
        let g = kde(&s, (-3.0, 3.0), (-3.0, 3.0), 128, 0.1).unwrap();
        let (r, c) = g.argmax();
        let (x, y) = g.cell_center(r, c);
        let half = 3.0 / 128.0;
        assert!(x.abs() <= half + 1e-12 && y.abs() <= half + 1e-12, "({x}, {y})");
        assert!(g.density.iter().all(|&d| d >= 0.0));
        assert!((g.total_mass() - 1.0).abs() < 0.02);
    }

    #[test]
    fn kde_rejects_bad_input() {
        let s = Tensor::zeros(&[1, 2]);
        assert!(kde(&s, (-1.0, 1.0), (-1.0, 1.0), 8, 0.1).is_err());
        let s = Tensor::zeros(&[3, 2]);
        assert!(kde(&s, (-1.0, 1.0), (-1.0, 1.0), 8, 0.0).is_err());
    }

    #[test]
    fn pgm_layout() {
        let s = sample_ring8(&RingMixtureSpec::default(), 64);
        let g = kde(&s, (-3.0, 3.0), (-3.0, 3.0), 16, 0.1).unwrap();
        let mut buf = Vec::new();
        g.write_pgm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(buf.len(), b"P5\n16 16\n255\n".len() + 256);
        assert!(buf.iter().skip(13).any(|&b| b == 255));
    }
}
