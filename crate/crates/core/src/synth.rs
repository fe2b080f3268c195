//! Synthetic multi-modal classification data with per-modality noise levels
//! and independent, imbalanced missingness.
//!
//! Each class `y` has a fixed mean vector per modality (column `y` of a seeded
//! Gaussian projection `W_m`); a sample's modality-`m` input is that mean plus
//! unit Gaussian noise divided by `snr[m]`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::coalition::Coalition;
use crate::error::{MceError, Result};
use crate::seeding::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;
use crate::text::{format_list, parse_list, Document};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub modalities: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub samples: usize,
    pub snr: Vec<f64>,
    pub missing_rates: Vec<f64>,
    /// Scale of the class-mean projections (entries ~ N(0, sep²/input_dim)).
    pub class_sep: f64,
    /// Adjust the sampling probabilities so that, after all-missing rows are
    /// redrawn, each modality's marginal presence still equals `1 − r[m]`.
    pub calibrate_missing: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            modalities: 3,
            classes: 4,
            input_dim: 16,
            samples: 2000,
            snr: vec![5.0, 2.0, 1.0],
            missing_rates: vec![0.2, 0.5, 0.8],
            class_sep: 1.0,
            calibrate_missing: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities < 2 {
            return Err(MceError::config("data.modalities", "need at least 2 modalities"));
        }
        if self.modalities > 16 {
            return Err(MceError::config("data.modalities", "at most 16 modalities are supported"));
        }
        if self.classes < 2 {
            return Err(MceError::config("data.classes", "need at least 2 classes"));
        }
        if self.samples == 0 {
            return Err(MceError::config("data.train_samples", "need at least 1 sample"));
        }
        if self.input_dim == 0 {
            return Err(MceError::config("data.input_dim", "must be positive"));
        }
        if self.snr.len() != self.modalities {
            return Err(MceError::config(
                "data.snr",
                format!("expected {} values, got {}", self.modalities, self.snr.len()),
            ));
        }
        if let Some(bad) = self.snr.iter().find(|&&s| !(s > 0.0)) {
            return Err(MceError::config("data.snr", format!("must be > 0, got {bad}")));
        }
        validate_rates(&self.missing_rates, self.modalities)?;
        if !(self.class_sep > 0.0 && self.class_sep.is_finite()) {
            return Err(MceError::config("data.class_sep", "must be a positive finite number"));
        }
        Ok(())
    }
}

fn validate_rates(rates: &[f64], modalities: usize) -> Result<()> {
    if rates.len() != modalities {
        return Err(MceError::config(
            "data.missing_rates",
            format!("expected {modalities} values, got {}", rates.len()),
        ));
    }
    if let Some(bad) = rates.iter().find(|&&r| !(0.0..1.0).contains(&r)) {
        return Err(MceError::config("data.missing_rates", format!("{bad} is outside [0, 1)")));
    }
    Ok(())
}

/// Binary N×M modality-availability matrix; every row has a present modality.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PresenceMatrix {
    modalities: usize,
    masks: Vec<Coalition>,
}

impl PresenceMatrix {
    pub fn from_masks(modalities: usize, masks: Vec<Coalition>) -> Result<Self> {
        let full = (1u64 << modalities) - 1;
        for (n, &m) in masks.iter().enumerate() {
            if m == 0 {
                return Err(MceError::Contract(format!("sample {n} has no present modality")));
            }
            if m & !full != 0 {
                return Err(MceError::Contract(format!(
                    "sample {n} mask {m:#b} exceeds {modalities} modalities"
                )));
            }
        }
        Ok(PresenceMatrix { modalities, masks })
    }

    /// Builds from 0/1 rows.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let modalities = rows.first().map_or(0, Vec::len);
        let mut masks = Vec::with_capacity(rows.len());
        for row in rows {
            if row.len() != modalities {
                return Err(MceError::Dimension {
                    op: "presence",
                    lhs: vec![modalities],
                    rhs: vec![row.len()],
                });
            }
            masks.push(
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .fold(0u64, |acc, (m, _)| acc | 1 << m),
            );
        }
        PresenceMatrix::from_masks(modalities, masks)
    }

    /// All modalities present for every sample.
    pub fn complete(samples: usize, modalities: usize) -> Self {
        PresenceMatrix {
            modalities,
            masks: vec![(1u64 << modalities) - 1; samples],
        }
    }

    pub fn rows(&self) -> usize {
        self.masks.len()
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn mask(&self, n: usize) -> Coalition {
        self.masks[n]
    }

    pub fn masks(&self) -> &[Coalition] {
        &self.masks
    }

    pub fn is_present(&self, n: usize, m: usize) -> bool {
        self.masks[n] >> m & 1 == 1
    }

    /// Present-sample count per modality.
    pub fn column_counts(&self) -> Vec<usize> {
        (0..self.modalities)
            .map(|m| self.masks.iter().filter(|&&k| k >> m & 1 == 1).count())
            .collect()
    }

    pub fn select(&self, indices: &[usize]) -> PresenceMatrix {
        PresenceMatrix {
            modalities: self.modalities,
            masks: indices.iter().map(|&i| self.masks[i]).collect(),
        }
    }
}

/// Inputs (one `N×D_in` matrix per modality), presence and labels.
///
/// Inputs of absent modalities are stored as zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub presence: PresenceMatrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// A slice of a dataset ready for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalBatch {
    pub inputs: Vec<Tensor>,
    pub masks: Vec<Coalition>,
    pub labels: Vec<usize>,
}

impl MultiModalBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modalities(&self) -> usize {
        self.inputs.len()
    }

    /// 1.0 for samples where modality `m` is present, else 0.0.
    pub fn presence_column(&self, m: usize) -> Vec<f64> {
        self.masks.iter().map(|&k| (k >> m & 1) as f64).collect()
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modalities(&self) -> usize {
        self.inputs.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Tensor::cols)
    }

    pub fn batch(&self, indices: &[usize]) -> MultiModalBatch {
        MultiModalBatch {
            inputs: self.inputs.iter().map(|x| x.select_rows(indices)).collect(),
            masks: indices.iter().map(|&i| self.presence.mask(i)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn full_batch(&self) -> MultiModalBatch {
        let all: Vec<usize> = (0..self.len()).collect();
        self.batch(&all)
    }

    /// Indices of samples where modality `m` is present.
    pub fn present_indices(&self, m: usize) -> Vec<usize> {
        (0..self.len()).filter(|&n| self.presence.is_present(n, m)).collect()
    }

    /// Replaces the presence matrix, zeroing inputs of absent modalities.
    pub fn with_presence(mut self, presence: PresenceMatrix) -> Result<Self> {
        if presence.rows() != self.len() || presence.modalities() != self.modalities() {
            return Err(MceError::Dimension {
                op: "with_presence",
                lhs: vec![self.len(), self.modalities()],
                rhs: vec![presence.rows(), presence.modalities()],
            });
        }
        let d = self.input_dim();
        for (m, x) in self.inputs.iter_mut().enumerate() {
            for n in 0..presence.rows() {
                if !presence.is_present(n, m) {
                    x.data_mut()[n * d..(n + 1) * d].fill(0.0);
                }
            }
        }
        self.presence = presence;
        Ok(self)
    }

    fn to_bytes(&self) -> Vec<u8> {
        let (n, m, d) = (self.len(), self.modalities(), self.input_dim());
        let mut out = Vec::with_capacity(n * m * (d * 8 + 1) + n * 4);
        for s in 0..n {
            for x in &self.inputs {
                for v in x.row(s) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        for s in 0..n {
            for k in 0..m {
                out.push(self.presence.is_present(s, k) as u8);
            }
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        out
    }

    /// SHA-256 of the binary serialisation.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Writes `<stem>.bin` and `<stem>.header`.
    ///
    /// Binary layout: inputs as little-endian `f64[N][M][D]`, then presence as
    /// `u8[N][M]`, then labels as little-endian `u32[N]`.
    pub fn write_binary(&self, stem: &Path, config: &SynthConfig) -> Result<()> {
        let mut header = Document::new();
        header.push("dataset", "samples", self.len());
        header.push("dataset", "modalities", self.modalities());
        header.push("dataset", "classes", self.classes);
        header.push("dataset", "input_dim", self.input_dim());
        header.push("dataset", "seed", config.seed);
        header.push("dataset", "snr", format_list(&config.snr));
        header.push("dataset", "missing_rates", format_list(&config.missing_rates));
        header.push("dataset", "fingerprint", self.fingerprint());
        header.push(
            "dataset",
            "layout",
            "inputs f64le[N][M][D]; presence u8[N][M]; labels u32le[N]",
        );
        header.write(&with_ext(stem, "header"))?;
        std::fs::write(with_ext(stem, "bin"), self.to_bytes())?;
        Ok(())
    }

    pub fn read_binary(stem: &Path) -> Result<Dataset> {
        let header = Document::read(&with_ext(stem, "header"))?;
        let n: usize = header.parse_value("dataset", "samples")?;
        let m: usize = header.parse_value("dataset", "modalities")?;
        let classes: usize = header.parse_value("dataset", "classes")?;
        let d: usize = header.parse_value("dataset", "input_dim")?;
        let bytes = std::fs::read(with_ext(stem, "bin"))?;
        let expected = n * m * d * 8 + n * m + n * 4;
        if bytes.len() != expected {
            return Err(MceError::Parse(format!(
                "dataset binary has {} bytes, header implies {expected}",
                bytes.len()
            )));
        }
        let mut inputs = vec![vec![0.0; n * d]; m];
        let mut off = 0;
        for s in 0..n {
            for x in inputs.iter_mut() {
                for j in 0..d {
                    let chunk: [u8; 8] = bytes[off..off + 8].try_into().expect("8 bytes");
                    x[s * d + j] = f64::from_le_bytes(chunk);
                    off += 8;
                }
            }
        }
        let mut masks = vec![0u64; n];
        for mask in masks.iter_mut() {
            for k in 0..m {
                if bytes[off] != 0 {
                    *mask |= 1 << k;
                }
                off += 1;
            }
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let chunk: [u8; 4] = bytes[off..off + 4].try_into().expect("4 bytes");
            labels.push(u32::from_le_bytes(chunk) as usize);
            off += 4;
        }
        Ok(Dataset {
            inputs: inputs
                .into_iter()
                .map(|x| Tensor::matrix(n, d, x))
                .collect::<Result<_>>()?,
            presence: PresenceMatrix::from_masks(m, masks)?,
            labels,
            classes,
        })
    }

    /// Long-format CSV: one row per (sample, modality).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.input_dim();
        let mut head = vec!["sample".to_string(), "label".into(), "modality".into(), "present".into()];
        head.extend((0..d).map(|j| format!("x{j}")));
        w.write_record(&head)?;
        for s in 0..self.len() {
            for (m, x) in self.inputs.iter().enumerate() {
                let mut rec = vec![
                    s.to_string(),
                    self.labels[s].to_string(),
                    m.to_string(),
                    (self.presence.is_present(s, m) as u8).to_string(),
                ];
                rec.extend(x.row(s).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Seeded class-mean projections, one `D_in×C` matrix per modality.
#[derive(Clone, Debug)]
pub struct SynthGenerator {
    config: SynthConfig,
    projections: Vec<Tensor>,
}

impl SynthGenerator {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, stream::PROJECTIONS);
        let std = config.class_sep / (config.input_dim as f64).sqrt();
        let projections = (0..config.modalities)
            .map(|_| Tensor::randn(&[config.input_dim, config.classes], std, &mut rng))
            .collect();
        Ok(SynthGenerator {
            config: config.clone(),
            projections,
        })
    }

    pub fn projections(&self) -> &[Tensor] {
        &self.projections
    }

    /// `samples` complete samples drawn from the stream `(seed, stream_id)`.
    pub fn sample(&self, samples: usize, stream_id: u64) -> Dataset {
        let c = &self.config;
        let (m_count, d) = (c.modalities, c.input_dim);
        let mut rng = rng_for(c.seed, stream_id);
        let mut inputs = vec![vec![0.0; samples * d]; m_count];
        let mut labels = Vec::with_capacity(samples);
        for n in 0..samples {
            let y = rng.random_range(0..c.classes);
            labels.push(y);
            for m in 0..m_count {
                let w = &self.projections[m];
                let noise_scale = 1.0 / c.snr[m];
                for j in 0..d {
                    let eps: f64 = rng.sample(StandardNormal);
                    let noise = if noise_scale == 0.0 { 0.0 } else { eps * noise_scale };
                    inputs[m][n * d + j] = w.get(j, y) + noise;
                }
            }
        }
        Dataset {
            inputs: inputs
                .into_iter()
                .map(|x| Tensor::matrix(samples, d, x).expect("shape"))
                .collect(),
            presence: PresenceMatrix::complete(samples, m_count),
            labels,
            classes: c.classes,
        }
    }
}

/// Draws `config.samples` training samples and applies the configured
/// missingness.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    let generator = SynthGenerator::new(config)?;
    let data = generator.sample(config.samples, stream::TRAIN_SAMPLES);
    let presence = sample_presence(
        config.samples,
        &config.missing_rates,
        derive_seed(config.seed, stream::MISSING),
        config.calibrate_missing,
    )?;
    data.with_presence(presence)
}

/// Training split with missingness plus a complete held-out split drawn from
/// the same class means.
pub fn generate_split(config: &SynthConfig, test_samples: usize) -> Result<(Dataset, Dataset)> {
    let train = generate(config)?;
    let generator = SynthGenerator::new(config)?;
    let test = generator.sample(test_samples, stream::TEST_SAMPLES);
    Ok((train, test))
}

/// Presence matrix for an existing dataset's sample count.
pub fn apply_missing(dataset: &Dataset, rates: &[f64], seed: u64) -> Result<PresenceMatrix> {
    sample_presence(dataset.len(), rates, seed, true)
}

/// Per-modality presence probabilities `q` such that, conditioned on a row
/// not being all-absent, modality `m` is present with probability `1 − r[m]`.
///
/// Solves `z = 1 − Π(1 − p_m z)` with `q_m = p_m z`. When `Σ p_m ≤ 1` no such
/// `z` exists (every row needs a present modality), and the raw `p` is used.
pub fn calibrated_presence_probs(rates: &[f64]) -> Vec<f64> {
    let p: Vec<f64> = rates.iter().map(|r| 1.0 - r).collect();
    let g = |z: f64| 1.0 - p.iter().map(|pm| 1.0 - pm * z).product::<f64>() - z;
    if p.iter().sum::<f64>() <= 1.0 || g(1.0) >= 0.0 {
        return p;
    }
    let (mut lo, mut hi) = (1e-12, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z = 0.5 * (lo + hi);
    p.iter().map(|pm| pm * z).collect()
}

/// Independent per-entry absence with all-absent rows redrawn.
///
/// A row that is still all-absent after `10·N` redraws is a configuration
/// error.
pub fn sample_presence(samples: usize, rates: &[f64], seed: u64, calibrate: bool) -> Result<PresenceMatrix> {
    validate_rates(rates, rates.len())?;
    let modalities = rates.len();
    if modalities == 0 || modalities > 63 {
        return Err(MceError::config("data.missing_rates", "need between 1 and 63 modalities"));
    }
    let probs = if calibrate {
        calibrated_presence_probs(rates)
    } else {
        rates.iter().map(|r| 1.0 - r).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_attempts = 10 * samples.max(1);
    let mut masks = Vec::with_capacity(samples);
    for n in 0..samples {
        let mut attempts = 0;
        let mask = loop {
            let mut mask = 0u64;
            for (m, &q) in probs.iter().enumerate() {
                if rng.random::<f64>() < q {
                    mask |= 1 << m;
                }
            }
            if mask != 0 {
                break mask;
            }
            attempts += 1;
            if attempts >= max_attempts {
                return Err(MceError::config(
                    "data.missing_rates",
                    format!("sample {n} stayed all-absent after {max_attempts} redraws"),
                ));
            }
        };
        masks.push(mask);
    }
    PresenceMatrix::from_masks(modalities, masks)
}

/// Parses a header written by [`Dataset::write_binary`] back into rates.
pub fn header_rates(header: &Document) -> Option<Vec<f64>> {
    parse_list(header.get("dataset", "missing_rates")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{softmax_cross_entropy, Tape};

    #[test]
    fn config_validation() {
        let ok = SynthConfig::default();
        assert!(ok.validate().is_ok());
        let bad = |f: &dyn Fn(&mut SynthConfig)| {
            let mut c = SynthConfig::default();
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert!(matches!(bad(&|c| c.modalities = 1), MceError::Config { .. }));
        assert!(matches!(bad(&|c| c.classes = 1), MceError::Config { .. }));
        assert!(matches!(bad(&|c| c.samples = 0), MceError::Config { .. }));
        assert!(matches!(bad(&|c| c.snr[1] = 0.0), MceError::Config { .. }));
        assert!(matches!(bad(&|c| c.missing_rates[2] = 1.0), MceError::Config { .. }));
        match bad(&|c| c.snr = vec![1.0]) {
            MceError::Config { field, .. } => assert_eq!(field, "data.snr"),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let c = SynthConfig {
            samples: 200,
            seed: 42,
            ..SynthConfig::default()
        };
        let a = generate(&c).unwrap();
        let b = generate(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let other = generate(&SynthConfig { seed: 43, ..c }).unwrap();
        assert_ne!(a.fingerprint(), other.fingerprint());
    }

    #[test]
    fn zero_rates_give_complete_presence() {
        let p = sample_presence(500, &[0.0, 0.0, 0.0], 1, true).unwrap();
        assert!(p.masks().iter().all(|&m| m == 0b111));
        let p = sample_presence(500, &[0.0, 0.0, 0.0], 1, false).unwrap();
        assert!(p.masks().iter().all(|&m| m == 0b111));
    }

    #[test]
    fn imbalanced_rates_hit_marginals() {
        let rates = [0.2, 0.5, 0.8];
        let expect = [0.8, 0.5, 0.2];
        let mut mean = [0.0; 3];
        for seed in 0..5 {
            let p = sample_presence(10_000, &rates, seed, true).unwrap();
            assert!(p.masks().iter().all(|&m| m != 0));
            for (m, c) in p.column_counts().iter().enumerate() {
                mean[m] += *c as f64 / 10_000.0 / 5.0;
            }
        }
        for m in 0..3 {
            assert!((mean[m] - expect[m]).abs() < 0.02, "{mean:?}");
        }
    }

    #[test]
    fn uncalibrated_redraw_inflates_marginals() {
        // P(present | not all-absent) = p / (1 − Π r) without calibration
        let p = sample_presence(20_000, &[0.2, 0.5, 0.8], 9, false).unwrap();
        let frac = p.column_counts()[0] as f64 / 20_000.0;
        assert!((frac - 0.8 / 0.92).abs() < 0.01, "{frac}");
    }

    #[test]
    fn calibrated_probabilities_solve_fixed_point() {
        let rates = [0.2, 0.5, 0.8];
        let q = calibrated_presence_probs(&rates);
        let none: f64 = q.iter().map(|v| 1.0 - v).product();
        for (m, r) in rates.iter().enumerate() {
            assert!((q[m] / (1.0 - none) - (1.0 - r)).abs() < 1e-12);
        }
        // infeasible: expected presence below one modality per row
        assert_eq!(calibrated_presence_probs(&[0.9, 0.8]), vec![1.0 - 0.9, 1.0 - 0.8]);
    }

    #[test]
    fn hopeless_rates_are_a_config_error() {
        let err = sample_presence(1, &[0.999_999, 0.999_999], 3, true).unwrap_err();
        assert!(matches!(err, MceError::Config { .. }));
    }

    #[test]
    fn illustration_counts_form_valid_matrix() {
        // ten samples, four modalities, presence counts (10, 8, 5, 2)
        let rows: Vec<Vec<u8>> = (0..10)
            .map(|n| vec![1, (n < 8) as u8, (n < 5) as u8, (n < 2) as u8])
            .collect();
        let p = PresenceMatrix::from_rows(&rows).unwrap();
        assert_eq!(p.column_counts(), vec![10, 8, 5, 2]);
        assert!(PresenceMatrix::from_rows(&[vec![0, 0]]).is_err());
    }

    #[test]
    fn absent_inputs_are_zeroed_and_rows_nonempty() {
        let c = SynthConfig {
            samples: 300,
            seed: 5,
            ..SynthConfig::default()
        };
        let d = generate(&c).unwrap();
        for n in 0..d.len() {
            assert_ne!(d.presence.mask(n), 0);
            for m in 0..3 {
                if !d.presence.is_present(n, m) {
                    assert!(d.inputs[m].row(n).iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    fn train_linear_probe(x: &Tensor, labels: &[usize], classes: usize, steps: usize) -> (Tensor, Tensor) {
        // plain full-batch gradient descent on softmax regression
        let d = x.cols();
        let mut w = Tensor::zeros(&[d, classes]);
        let mut b = Tensor::zeros(&[classes]);
        for _ in 0..steps {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let (wv, bv) = (t.leaf(w.clone()), t.leaf(b.clone()));
            let z = crate::tensor::dense_forward(&mut t, xv, wv, bv).unwrap();
            let loss = softmax_cross_entropy(&mut t, z, labels).unwrap();
            let g = t.backward(loss).unwrap();
            for (p, gv) in [(&mut w, g.wrt(wv)), (&mut b, g.wrt(bv))] {
                for (a, d) in p.data_mut().iter_mut().zip(gv.data()) {
                    *a -= 0.5 * d;
                }
            }
        }
        (w, b)
    }

    fn probe_accuracy(train: &Dataset, test: &Dataset, m: usize) -> f64 {
        let (w, b) = train_linear_probe(&train.inputs[m], &train.labels, train.classes, 300);
        let mut t = Tape::new();
        let xv = t.constant(test.inputs[m].clone());
        let (wv, bv) = (t.constant(w), t.constant(b));
        let z = crate::tensor::dense_forward(&mut t, xv, wv, bv).unwrap();
        let pred = t.value(z).argmax_rows();
        pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count() as f64 / test.len() as f64
    }

    #[test]
    fn noiseless_modalities_are_linearly_separable() {
        let c = SynthConfig {
            samples: 400,
            snr: vec![f64::INFINITY; 3],
            missing_rates: vec![0.0; 3],
            seed: 2,
            ..SynthConfig::default()
        };
        let (train, _) = generate_split(&c, 10).unwrap();
        for m in 0..3 {
            assert_eq!(probe_accuracy(&train, &train, m), 1.0);
        }
    }

    #[test]
    fn snr_orders_unimodal_probe_accuracy() {
        let c = SynthConfig {
            samples: 1500,
            snr: vec![5.0, 2.0, 1.0],
            missing_rates: vec![0.0; 3],
            seed: 11,
            ..SynthConfig::default()
        };
        let (train, test) = generate_split(&c, 1000).unwrap();
        let acc: Vec<f64> = (0..3).map(|m| probe_accuracy(&train, &test, m)).collect();
        assert!(acc[0] > acc[1] && acc[1] > acc[2], "{acc:?}");
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = SynthConfig {
            samples: 50,
            seed: 8,
            ..SynthConfig::default()
        };
        let d = generate(&c).unwrap();
        let stem = dir.path().join("train");
        d.write_binary(&stem, &c).unwrap();
        let back = Dataset::read_binary(&stem).unwrap();
        assert_eq!(back, d);
        let header = Document::read(&dir.path().join("train.header")).unwrap();
        assert_eq!(header_rates(&header), Some(c.missing_rates.clone()));
        d.write_csv(&dir.path().join("train.csv")).unwrap();
        let rows = csv::Reader::from_path(dir.path().join("train.csv")).unwrap().records().count();
        assert_eq!(rows, 50 * 3);
    }
}
