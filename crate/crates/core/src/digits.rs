//! Synthetic 28×28 digit datasets with tightly controlled variability, and
//! GAN training on them with a sample-diversity score.

use std::io::{self, Read, Write};
use std::time::Duration;

use rand::Rng as _;
use thiserror::Error;

use crate::nn::{Activation, MlpSpec, NnError};
use crate::rng::{stream, substream, Rng};
use crate::tensor::Tensor;
use crate::train::{adversarial_train, LossRow, Networks, NoiseDistribution, TrialConfig, TrialStatus};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
/// Pixel-grid center; rotations pivot here.
const CENTER: f64 = (SIDE as f64 - 1.0) / 2.0;

const GLYPHS: &str = include_str!("../assets/glyphs28.txt");

#[derive(Debug, Error)]
pub enum DigitError {
    #[error("digit must be 0..=9, got {0}")]
    Digit(usize),
    #[error("shift must satisfy |shift| <= 14, got {0}")]
    Shift(f64),
    #[error("rotation must lie in [0, 360] degrees, got {0}")]
    Rotation(f64),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("invalid glyph atlas: {0}")]
    Atlas(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("diversity needs at least 2 samples of equal width, got shape {0:?}")]
    Diversity(Vec<usize>),
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Ten base glyphs, one per digit, row-major with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlyphAtlas {
    glyphs: Vec<[f64; PIXELS]>,
}

impl GlyphAtlas {
    /// The checked-in glyph bitmaps.
    pub fn embedded() -> Self {
        Self::parse(GLYPHS).expect("embedded glyph asset is well formed")
    }

    /// One line of 784 two-digit hex bytes per digit.
    pub fn parse(text: &str) -> Result<Self, DigitError> {
        let glyphs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(d, line)| {
                let line = line.trim();
                if line.len() != 2 * PIXELS {
                    return Err(DigitError::Atlas(format!("glyph {d} has {} hex chars", line.len())));
                }
                let mut g = [0.0; PIXELS];
                for (i, px) in g.iter_mut().enumerate() {
                    let byte = u8::from_str_radix(&line[2 * i..2 * i + 2], 16)
                        .map_err(|e| DigitError::Atlas(format!("glyph {d}: {e}")))?;
                    *px = f64::from(byte) / 255.0;
                }
                Ok(g)
            })
            .collect::<Result<Vec<_>, _>>()?;
        if glyphs.len() != 10 {
            return Err(DigitError::Atlas(format!("expected 10 glyphs, found {}", glyphs.len())));
        }
        Ok(GlyphAtlas { glyphs })
    }

    pub fn glyph(&self, digit: usize) -> Result<&[f64; PIXELS], DigitError> {
        self.glyphs.get(digit).ok_or(DigitError::Digit(digit))
    }

    /// Fraction of pixels above one half.
    pub fn ink_fraction(&self, digit: usize) -> Result<f64, DigitError> {
        let g = self.glyph(digit)?;
        Ok(g.iter().filter(|&&v| v > 0.5).count() as f64 / PIXELS as f64)
    }

    /// Intensity-weighted `(row, col)` centroid.
    pub fn centroid(&self, digit: usize) -> Result<(f64, f64), DigitError> {
        let g = self.glyph(digit)?;
        let (mut m, mut r, mut c) = (0.0, 0.0, 0.0);
        for (i, &v) in g.iter().enumerate() {
            m += v;
            r += v * (i / SIDE) as f64;
            c += v * (i % SIDE) as f64;
        }
        Ok((r / m, c / m))
    }
}

fn pixel(img: &[f64], row: isize, col: isize) -> f64 {
    if (0..SIDE as isize).contains(&row) && (0..SIDE as isize).contains(&col) {
        img[row as usize * SIDE + col as usize]
    } else {
        0.0
    }
}

fn bilinear(img: &[f64], row: f64, col: f64) -> f64 {
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let top = pixel(img, r0, c0) * (1.0 - fc) + pixel(img, r0, c0 + 1) * fc;
    let bottom = pixel(img, r0 + 1, c0) * (1.0 - fc) + pixel(img, r0 + 1, c0 + 1) * fc;
    top * (1.0 - fr) + bottom * fr
}

/// Rotates `img` counter-clockwise by `rotation_deg` about the image center,
/// then shifts it right by `shift_px`. Bilinear resampling; reads outside
/// the image are background.
pub fn transform_image(img: &[f64], shift_px: f64, rotation_deg: f64) -> Vec<f64> {
    assert_eq!(img.len(), PIXELS, "28x28 image expected");
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let mut out = vec![0.0; PIXELS];
    for (i, o) in out.iter_mut().enumerate() {
        // inverse map: undo the shift, then the rotation
        let x = (i % SIDE) as f64 - shift_px - CENTER;
        let y = (i / SIDE) as f64 - CENTER;
        // with rows pointing down, a visual counter-clockwise turn by θ maps
        // (x, y) to (x cos θ + y sin θ, -x sin θ + y cos θ)
        let src_x = x * cos - y * sin + CENTER;
        let src_y = x * sin + y * cos + CENTER;
        *o = bilinear(img, src_y, src_x).clamp(0.0, 1.0);
    }
    out
}

pub fn render_digit(atlas: &GlyphAtlas, digit: usize, shift_px: f64, rotation_deg: f64) -> Result<Vec<f64>, DigitError> {
    if !(shift_px.abs() <= 14.0) {
        return Err(DigitError::Shift(shift_px));
    }
    if !(0.0..=360.0).contains(&rotation_deg) {
        return Err(DigitError::Rotation(rotation_deg));
    }
    Ok(transform_image(atlas.glyph(digit)?, shift_px, rotation_deg))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitDatasetSpec {
    /// Horizontal shifts are drawn from `[-shift_range, shift_range]` pixels.
    pub shift_range: f64,
    /// Rotations are drawn from `[0, rotation_range]` degrees.
    pub rotation_range: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl DigitDatasetSpec {
    pub fn shift_only(seed: u64) -> Self {
        DigitDatasetSpec {
            shift_range: 2.0,
            rotation_range: 0.0,
            samples_per_class: 1000,
            seed,
        }
    }

    pub fn shift_rotate(seed: u64) -> Self {
        DigitDatasetSpec {
            rotation_range: 10.0,
            ..Self::shift_only(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "shift-only" => Some(Self::shift_only(seed)),
            "shift+rotate" => Some(Self::shift_rotate(seed)),
            _ => None,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..=14.0).contains(&self.shift_range) {
            v.push(format!("shift_range: must lie in [0, 14], got {}", self.shift_range));
        }
        if !(0.0..=45.0).contains(&self.rotation_range) {
            v.push(format!("rotation_range: must lie in [0, 45], got {}", self.rotation_range));
        }
        if self.samples_per_class == 0 {
            v.push("samples_per_class: must be at least 1".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    /// `[N, 784]`, pixels in `[-1, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `n` rows drawn uniformly with replacement.
    pub fn sample_batch(&self, rng: &mut Rng, n: usize) -> Tensor {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.len())).collect();
        self.rows(&rows)
    }

    pub fn rows(&self, rows: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(rows.len() * PIXELS);
        for &r in rows {
            data.extend_from_slice(&self.images.data()[r * PIXELS..(r + 1) * PIXELS]);
        }
        Tensor::new(&[rows.len(), PIXELS], data).expect("rows * 784 entries")
    }

    pub fn write(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "digits28 v1 {}", self.len())?;
        for (img, &label) in self.images.data().chunks(PIXELS).zip(&self.labels) {
            let mut record = Vec::with_capacity(PIXELS * 8 + 1);
            for v in img {
                record.extend_from_slice(&v.to_le_bytes());
            }
            record.push(label);
            w.write_all(&record)?;
        }
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self, DigitError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| DigitError::Format("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline]).map_err(|e| DigitError::Format(e.to_string()))?;
        let n: usize = header
            .strip_prefix("digits28 v1 ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| DigitError::Format(format!("bad header {header:?}")))?;
        let body = &bytes[newline + 1..];
        let record = PIXELS * 8 + 1;
        if body.len() != n * record {
            return Err(DigitError::Format(format!("expected {} body bytes, found {}", n * record, body.len())));
        }
        let mut data = Vec::with_capacity(n * PIXELS);
        let mut labels = Vec::with_capacity(n);
        for rec in body.chunks(record) {
            data.extend(rec[..PIXELS * 8].chunks(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))));
            labels.push(rec[PIXELS * 8]);
        }
        Ok(ImageDataset {
            images: Tensor::new(&[n, PIXELS], data).map_err(|e| DigitError::Format(e.to_string()))?,
            labels,
        })
    }
}

/// `samples_per_class` renders of every digit, in digit order, rescaled to
/// `[-1, 1]`.
pub fn build_dataset(atlas: &GlyphAtlas, spec: &DigitDatasetSpec) -> Result<ImageDataset, DigitError> {
    let violations = spec.violations();
    if !violations.is_empty() {
        return Err(DigitError::Spec(violations.join("; ")));
    }
    // separate streams, so presets with the same seed share their shifts
    let mut shift_rng = substream(spec.seed, stream::DATASET);
    let mut rotation_rng = substream(spec.seed, stream::DATASET_ROTATION);
    let n = 10 * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for digit in 0..10 {
        for _ in 0..spec.samples_per_class {
            let shift = if spec.shift_range > 0.0 {
                shift_rng.random_range(-spec.shift_range..=spec.shift_range)
            } else {
                0.0
            };
            let rotation = if spec.rotation_range > 0.0 {
                rotation_rng.random_range(0.0..=spec.rotation_range)
            } else {
                0.0
            };
            let img = render_digit(atlas, digit, shift, rotation)?;
            data.extend(img.iter().map(|v| 2.0 * v - 1.0));
            labels.push(digit as u8);
        }
    }
    debug_assert!(data.iter().all(|v| (-1.0..=1.0).contains(v)));
    Ok(ImageDataset {
        images: Tensor::new(&[n, PIXELS], data).expect("n * 784 entries"),
        labels,
    })
}

/// Largest batch scored over all pairs; bigger batches use sampled pairs.
pub const EXACT_PAIRS_MAX: usize = 150;
pub const SAMPLED_PAIRS: usize = 10_000;

/// Mean Euclidean distance between rows: exact over all unordered pairs up to
/// [`EXACT_PAIRS_MAX`] rows, otherwise over [`SAMPLED_PAIRS`] random pairs
/// drawn from a fixed stream.
pub fn diversity(samples: &Tensor) -> Result<f64, DigitError> {
    let shape = samples.shape().to_vec();
    if shape.len() != 2 || shape[0] < 2 {
        return Err(DigitError::Diversity(shape));
    }
    let (b, w) = (shape[0], shape[1]);
    let data = samples.data();
    let dist = |i: usize, j: usize| {
        data[i * w..(i + 1) * w]
            .iter()
            .zip(&data[j * w..(j + 1) * w])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    if b <= EXACT_PAIRS_MAX {
        let mut total = 0.0;
        for i in 0..b {
            for j in i + 1..b {
                total += dist(i, j);
            }
        }
        Ok(total / (b * (b - 1) / 2) as f64)
    } else {
        let mut rng = substream(0, stream::DIVERSITY);
        let mut total = 0.0;
        for _ in 0..SAMPLED_PAIRS {
            let i = rng.random_range(0..b);
            let mut j = rng.random_range(0..b - 1);
            if j >= i {
                j += 1;
            }
            total += dist(i, j);
        }
        Ok(total / SAMPLED_PAIRS as f64)
    }
}

/// Network shapes for the digit experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitArch {
    pub generator_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub discriminator_activation: Activation,
}

impl Default for DigitArch {
    fn default() -> Self {
        DigitArch {
            generator_hidden: vec![128, 256],
            discriminator_hidden: vec![256, 128],
            discriminator_activation: Activation::LeakyRelu(0.2),
        }
    }
}

impl DigitArch {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.generator_hidden.contains(&0) || self.discriminator_hidden.contains(&0) {
            v.push("arch: hidden widths must be at least 1".into());
        }
        v
    }

    pub fn generator_spec(&self, trial: &TrialConfig) -> MlpSpec {
        MlpSpec {
            input: trial.z_dim,
            hidden: self.generator_hidden.clone(),
            output: PIXELS,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Tanh,
            batch_norm: trial.generator_batch_norm,
        }
    }

    pub fn discriminator_spec(&self) -> MlpSpec {
        MlpSpec {
            input: PIXELS,
            hidden: self.discriminator_hidden.clone(),
            output: 1,
            hidden_activation: self.discriminator_activation,
            output_activation: Activation::None,
            batch_norm: false,
        }
    }
}

/// Trial defaults for the digit experiment: 20k Adam iterations, 32-d
/// Gaussian noise, batch-normalized generator, 64-sample checkpoint grids.
pub fn default_digit_trial() -> TrialConfig {
    TrialConfig {
        z_dim: 32,
        z_distribution: NoiseDistribution::Gaussian,
        total_iters: 20_000,
        checkpoint_every: 5_000,
        checkpoint_samples: GRID_SAMPLES,
        generator_batch_norm: true,
        ..TrialConfig::default()
    }
}

/// Samples per checkpoint grid (8×8).
pub const GRID_SAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DigitCheckpoint {
    pub iter: usize,
    /// `[GRID_SAMPLES, 784]` generator outputs.
    pub grid: Tensor,
    pub diversity: f64,
}

#[derive(Debug, Clone)]
pub struct DigitTrialReport {
    pub config: TrialConfig,
    pub arch: DigitArch,
    pub status: TrialStatus,
    pub losses: Vec<LossRow>,
    pub checkpoints: Vec<DigitCheckpoint>,
    pub wall_time: Duration,
}

impl DigitTrialReport {
    pub fn final_diversity(&self) -> Option<f64> {
        self.checkpoints.last().map(|c| c.diversity)
    }
}

/// Trains on `dataset` with batches drawn uniformly with replacement.
/// Checkpoint grids use the first [`GRID_SAMPLES`] rows of the fixed
/// evaluation noise.
pub fn train_digit_gan(dataset: &ImageDataset, trial: &TrialConfig, arch: &DigitArch) -> Result<DigitTrialReport, DigitError> {
    let mut violations = trial.violations();
    violations.extend(arch.violations());
    if trial.checkpoint_samples < 2 {
        violations.push("checkpoint_samples: diversity needs at least 2".into());
    }
    if dataset.is_empty() {
        violations.push("dataset: empty".into());
    }
    if !violations.is_empty() {
        return Err(DigitError::InvalidConfig(violations));
    }
    let mut nets = Networks::init(&arch.generator_spec(trial), &arch.discriminator_spec(), trial.seed)?;
    let mut checkpoints = Vec::new();
    let mut status_override = None;
    let outcome = adversarial_train(
        &mut nets,
        trial,
        |rng, n| dataset.sample_batch(rng, n),
        |iter, samples| {
            if status_override.is_some() {
                return;
            }
            if let Some(bad) = samples.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                status_override = Some(TrialStatus::Failed {
                    iter,
                    reason: format!("generator output {bad} outside [-1, 1]"),
                });
                return;
            }
            let diversity = diversity(&samples).expect("at least 2 samples");
            checkpoints.push(DigitCheckpoint {
                iter,
                grid: samples,
                diversity,
            });
        },
    );
    Ok(DigitTrialReport {
        config: trial.clone(),
        arch: arch.clone(),
        status: status_override.unwrap_or(outcome.status),
        losses: outcome.losses,
        checkpoints,
        wall_time: outcome.wall_time,
    })
}

/// Tiles up to 64 images in `[-1, 1]` into an 8×8 grayscale PGM.
pub fn write_grid_pgm(images: &Tensor, mut w: impl Write) -> io::Result<()> {
    const TILES: usize = 8;
    let side = TILES * SIDE;
    let mut bytes = vec![0u8; side * side];
    for (k, img) in images.data().chunks(PIXELS).take(TILES * TILES).enumerate() {
        let (tr, tc) = (k / TILES, k % TILES);
        for (i, &v) in img.iter().enumerate() {
            let (r, c) = (tr * SIDE + i / SIDE, tc * SIDE + i % SIDE);
            bytes[r * side + c] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        }
    }
    write!(w, "P5\n{side} {side}\n255\n")?;
    w.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn atlas_glyphs_are_inked_and_centered() {
        let atlas = GlyphAtlas::embedded();
        for d in 0..10 {
            assert!(atlas.ink_fraction(d).unwrap() >= 0.05, "digit {d}");
            let (r, c) = atlas.centroid(d).unwrap();
            assert!((r - CENTER).abs() <= 3.0 && (c - CENTER).abs() <= 3.0, "digit {d}");
            assert!(atlas.glyph(d).unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(atlas.glyph(10).is_err());
    }

    #[test]
    fn identity_render_is_the_glyph() {
        let atlas = GlyphAtlas::embedded();
        for d in 0..10 {
            assert_eq!(render_digit(&atlas, d, 0.0, 0.0).unwrap(), atlas.glyph(d).unwrap().to_vec());
        }
    }

    #[test]
    fn full_turn_matches_identity() {
        let atlas = GlyphAtlas::embedded();
        let a = render_digit(&atlas, 3, 0.0, 360.0).unwrap();
        let b = render_digit(&atlas, 3, 0.0, 0.0).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn integer_shift_moves_columns() {
        let atlas = GlyphAtlas::embedded();
        let g = atlas.glyph(7).unwrap();
        let s = render_digit(&atlas, 7, 1.0, 0.0).unwrap();
        for r in 0..SIDE {
            assert_eq!(s[r * SIDE], 0.0);
            for c in 1..SIDE {
                assert_eq!(s[r * SIDE + c], g[r * SIDE + c - 1]);
            }
        }
    }

    #[test]
    fn quarter_turn_moves_top_to_left() {
        let mut img = vec![0.0; PIXELS];
        img[13] = 1.0; // top row, column 13
        let out = transform_image(&img, 0.0, 90.0);
        // the top edge swings to the left edge under a counter-clockwise turn
        let (argmax, _) = out
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        assert_eq!(argmax % SIDE, 0);
    }

    #[test]
    fn render_argument_checks() {
        let atlas = GlyphAtlas::embedded();
        assert!(matches!(render_digit(&atlas, 10, 0.0, 0.0), Err(DigitError::Digit(10))));
        assert!(matches!(render_digit(&atlas, 1, 14.5, 0.0), Err(DigitError::Shift(_))));
        assert!(matches!(render_digit(&atlas, 1, 0.0, -1.0), Err(DigitError::Rotation(_))));
        assert!(render_digit(&atlas, 1, -14.0, 45.0).is_ok());
    }

    #[test]
    fn zero_variability_gives_ten_images() {
        let spec = DigitDatasetSpec {
            shift_range: 0.0,
            rotation_range: 0.0,
            samples_per_class: 20,
            seed: 1,
        };
        let ds = build_dataset(&GlyphAtlas::embedded(), &spec).unwrap();
        let distinct: HashSet<Vec<u64>> = ds
            .images
            .data()
            .chunks(PIXELS)
            .map(|img| img.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn dataset_file_round_trip() {
        let spec = DigitDatasetSpec {
            samples_per_class: 3,
            ..DigitDatasetSpec::shift_rotate(4)
        };
        let ds = build_dataset(&GlyphAtlas::embedded(), &spec).unwrap();
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        assert!(buf.starts_with(b"digits28 v1 30\n"));
        assert_eq!(buf.len(), 15 + 30 * (PIXELS * 8 + 1));
        assert_eq!(ImageDataset::read(&buf[..]).unwrap(), ds);
        assert!(ImageDataset::read(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn spec_violations_name_fields() {
        let spec = DigitDatasetSpec {
            shift_range: 20.0,
            rotation_range: 50.0,
            samples_per_class: 0,
            seed: 0,
        };
        let v = spec.violations();
        assert_eq!(v.len(), 3);
        assert!(v[0].starts_with("shift_range") && v[1].starts_with("rotation_range"));
    }

    #[test]
    fn diversity_closed_forms() {
        let same = Tensor::full(&[5, PIXELS], 0.3);
        assert_eq!(diversity(&same).unwrap(), 0.0);
        let mut data = vec![-1.0; PIXELS];
        data.extend(vec![1.0; PIXELS]);
        let pair = Tensor::new(&[2, PIXELS], data).unwrap();
        assert!((diversity(&pair).unwrap() - 56.0).abs() < 1e-12);
        assert!(diversity(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn grid_pgm_layout() {
        let images = Tensor::full(&[64, PIXELS], 1.0);
        let mut buf = Vec::new();
        write_grid_pgm(&images, &mut buf).unwrap();
        let header = b"P5\n224 224\n255\n";
        assert!(buf.starts_with(header));
        assert_eq!(buf.len(), header.len() + 224 * 224);
        assert!(buf[header.len()..].iter().all(|&b| b == 255));
    }
}
