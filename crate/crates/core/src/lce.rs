//! Learning-capability factors.
//!
//! `A` compensates for how often each modality is seen at all. `B` measures,
//! per batch, how far each modality's Shapley contribution to the multi-modal
//! model trails what a standalone model on that modality achieves, normalised
//! by the modality's present count and clipped at zero.

use std::collections::BTreeMap;

use crate::coalition::{enumerate_subsets, exact_shapley, mc_shapley, size, Coalition, CoalitionGame, ShapleyResult};
use crate::error::{MceError, Result};
use crate::model::{FrozenUnimodal, MultiModalModel};
use crate::seeding::derive_seed;
use crate::synth::{Dataset, MultiModalBatch, PresenceMatrix};
use crate::tensor::Tensor;

/// Dataset speed factor: raw `N / count[m]` and the same divided by its mean.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorA {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

pub fn compute_factor_a(presence: &PresenceMatrix) -> Result<FactorA> {
    let n = presence.rows() as f64;
    let counts = presence.column_counts();
    if let Some(m) = counts.iter().position(|&c| c == 0) {
        return Err(MceError::config(
            "data.missing_rates",
            format!("modality {m} is absent from every sample"),
        ));
    }
    let raw: Vec<f64> = counts.iter().map(|&c| n / c as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let normalized = raw.iter().map(|a| a / mean).collect();
    Ok(FactorA { raw, normalized })
}

/// Per-sample accuracy used as the coalition payoff.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ValueKind {
    /// 1 when the argmax (lowest index on ties) equals the label.
    #[default]
    Hard,
    /// Softmax probability of the true class.
    Soft,
}

fn sample_value(logits: &[f64], label: usize, kind: ValueKind) -> f64 {
    match kind {
        ValueKind::Hard => {
            let mut best = 0;
            for (c, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = c;
                }
            }
            f64::from(u8::from(best == label))
        }
        ValueKind::Soft => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            (logits[label] - max).exp() / z
        }
    }
}

/// Value of `subset` for row `n` of `batch`. The empty subset is worth 0.
pub fn coalition_value(model: &MultiModalModel, batch: &MultiModalBatch, n: usize, subset: Coalition, kind: ValueKind) -> Result<f64> {
    if subset == 0 {
        return Ok(0.0);
    }
    if subset & !batch.masks[n] != 0 {
        return Err(MceError::Contract(format!(
            "subset {subset:#b} is not available for sample {n} (present {:#b})",
            batch.masks[n]
        )));
    }
    let row = batch_rows(batch, &[n]);
    let logits = model.predict_subset(&row, subset)?;
    Ok(sample_value(logits.row(0), batch.labels[n], kind))
}

fn batch_rows(batch: &MultiModalBatch, rows: &[usize]) -> MultiModalBatch {
    MultiModalBatch {
        inputs: batch.inputs.iter().map(|x| x.select_rows(rows)).collect(),
        masks: rows.iter().map(|&i| batch.masks[i]).collect(),
        labels: rows.iter().map(|&i| batch.labels[i]).collect(),
    }
}

/// Coalition values of every feasible (sample, subset) pair of a batch,
/// computed with one inference pass per distinct subset.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    masks: Vec<Coalition>,
    values: BTreeMap<Coalition, Vec<f64>>,
}

impl ValueTable {
    pub fn compute(model: &MultiModalModel, batch: &MultiModalBatch, kind: ValueKind) -> Result<Self> {
        let mut subsets: Vec<Coalition> = batch.masks.iter().flat_map(|&k| enumerate_subsets(k)).collect();
        subsets.sort_unstable();
        subsets.dedup();
        let all_logits = model.predict_subsets(batch, &subsets)?;
        let mut values = BTreeMap::new();
        for (s, logits) in subsets.into_iter().zip(all_logits) {
            let v = (0..batch.len())
                .map(|n| {
                    if s & !batch.masks[n] == 0 {
                        sample_value(logits.row(n), batch.labels[n], kind)
                    } else {
                        f64::NAN
                    }
                })
                .collect();
            values.insert(s, v);
        }
        Ok(ValueTable {
            masks: batch.masks.clone(),
            values,
        })
    }

    /// Builds a table directly from per-sample values, for tests and the
    /// characteristic-function CLI. `values[n]` maps subsets of `masks[n]`.
    pub fn from_values(masks: Vec<Coalition>, values: &[BTreeMap<Coalition, f64>]) -> Result<Self> {
        let mut table: BTreeMap<Coalition, Vec<f64>> = BTreeMap::new();
        for (n, (&mask, vals)) in masks.iter().zip(values).enumerate() {
            for s in enumerate_subsets(mask) {
                let v = *vals.get(&s).ok_or_else(|| {
                    MceError::Contract(format!("sample {n} lacks a value for subset {s:#b}"))
                })?;
                table.entry(s).or_insert_with(|| vec![f64::NAN; masks.len()])[n] = v;
            }
        }
        Ok(ValueTable { masks, values: table })
    }

    pub fn samples(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, n: usize) -> Coalition {
        self.masks[n]
    }

    /// `v_n(S)`; the empty subset is 0.
    pub fn value(&self, n: usize, subset: Coalition) -> Result<f64> {
        if subset == 0 {
            return Ok(0.0);
        }
        match self.values.get(&subset).map(|v| v[n]) {
            Some(v) if !v.is_nan() => Ok(v),
            _ => Err(MceError::Contract(format!(
                "subset {subset:#b} is infeasible for sample {n}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapleySettings {
    /// Samples with at most this many present modalities use the exact sum.
    pub exact_threshold: usize,
    /// Permutations per sample for the Monte-Carlo estimate.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ShapleySettings {
    fn default() -> Self {
        ShapleySettings {
            exact_threshold: 10,
            permutations: 100,
            seed: 0,
        }
    }
}

/// Shapley vector of sample `n`'s game over its present modalities.
pub fn sample_shapley(table: &ValueTable, n: usize, players: usize, settings: &ShapleySettings, step: u64) -> Result<ShapleyResult> {
    let mask = table.mask(n);
    let game = CoalitionGame::new(players, |s: Coalition| table.value(n, s))?.with_empty_value(0.0);
    if size(mask) <= settings.exact_threshold {
        exact_shapley(&game, mask)
    } else {
        let seed = derive_seed(derive_seed(settings.seed, step), n as u64);
        mc_shapley(&game, mask, settings.permutations, seed)
    }
}

/// `φ[m]`: per-sample Shapley values summed over the batch. Samples without
/// modality `m` contribute nothing to `φ[m]`.
pub fn batch_shapley(table: &ValueTable, players: usize, settings: &ShapleySettings, step: u64) -> Result<Vec<f64>> {
    let mut phi = vec![0.0; players];
    for n in 0..table.samples() {
        let r = sample_shapley(table, n, players, settings, step)?;
        for (p, v) in phi.iter_mut().zip(&r.phi) {
            *p += v;
        }
    }
    Ok(phi)
}

/// Correctness of each frozen unimodal model on every sample of `dataset`
/// (0 where the modality is absent). Frozen models are deterministic, so
/// this is computed once and summed per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenScores {
    /// `scores[m][n]`.
    pub scores: Vec<Vec<f64>>,
}

impl FrozenScores {
    pub fn compute(frozen: &[FrozenUnimodal], dataset: &Dataset, kind: ValueKind) -> Result<Self> {
        let scores = frozen
            .iter()
            .map(|f| {
                let m = f.modality();
                let logits = f.logits(&dataset.inputs[m])?;
                Ok((0..dataset.len())
                    .map(|n| {
                        if dataset.presence.is_present(n, m) {
                            sample_value(logits.row(n), dataset.labels[n], kind)
                        } else {
                            0.0
                        }
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(FrozenScores { scores })
    }

    /// `U[m]` for the samples at `indices`.
    pub fn upperbound(&self, indices: &[usize]) -> Vec<f64> {
        self.scores
            .iter()
            .map(|s| indices.iter().map(|&n| s[n]).sum())
            .collect()
    }
}

/// `U[m]`: summed accuracy of frozen model `m` over the batch rows where `m`
/// is present.
pub fn batch_upperbound(frozen: &[FrozenUnimodal], batch: &MultiModalBatch, kind: ValueKind) -> Result<Vec<f64>> {
    frozen
        .iter()
        .map(|f| {
            let m = f.modality();
            let rows: Vec<usize> = (0..batch.len()).filter(|&n| batch.masks[n] >> m & 1 == 1).collect();
            if rows.is_empty() {
                return Ok(0.0);
            }
            let logits: Tensor = f.logits(&batch.inputs[m].select_rows(&rows))?;
            Ok(rows
                .iter()
                .enumerate()
                .map(|(r, &n)| sample_value(logits.row(r), batch.labels[n], kind))
                .sum())
        })
        .collect()
}

/// Capability gap `Δ = U − φ` and the masked factor
/// `B[m] = Δ[m] / count[m]` when both are positive, else 0.
pub fn compute_factor_b(phi: &[f64], upper: &[f64], present: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if phi.len() != upper.len() || phi.len() != present.len() {
        return Err(MceError::Dimension {
            op: "factor_b",
            lhs: vec![phi.len(), upper.len()],
            rhs: vec![present.len()],
        });
    }
    let delta: Vec<f64> = upper.iter().zip(phi).map(|(u, p)| u - p).collect();
    let b = delta
        .iter()
        .zip(present)
        .map(|(&d, &c)| if d > 0.0 && c > 0 { d / c as f64 } else { 0.0 })
        .collect();
    Ok((delta, b))
}

/// Factor values in effect for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LceState {
    pub a: Vec<f64>,
    pub phi: Vec<f64>,
    pub upper: Vec<f64>,
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub present_count: Vec<usize>,
}

impl LceState {
    /// All factors set to one, for runs with the incentive disabled.
    pub fn neutral(modalities: usize) -> Self {
        LceState {
            a: vec![1.0; modalities],
            phi: vec![0.0; modalities],
            upper: vec![0.0; modalities],
            delta: vec![0.0; modalities],
            b: vec![1.0; modalities],
            present_count: vec![0; modalities],
        }
    }

    /// Per-modality `A[m]·B[m]` weights.
    pub fn weights(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(a, b)| a * b).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coalition::members;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn factor_a_from_illustration_counts() {
        let rows: Vec<Vec<u8>> = (0..10)
            .map(|n| vec![1, (n < 8) as u8, (n < 5) as u8, (n < 2) as u8])
            .collect();
        let a = compute_factor_a(&PresenceMatrix::from_rows(&rows).unwrap()).unwrap();
        assert_eq!(a.raw, vec![1.0, 1.25, 2.0, 5.0]);
        let mean = a.normalized.iter().sum::<f64>() / 4.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn factor_a_complete_and_missing_modality() {
        let a = compute_factor_a(&PresenceMatrix::complete(7, 3)).unwrap();
        assert_eq!(a.raw, vec![1.0; 3]);
        assert_eq!(a.normalized, vec![1.0; 3]);
        let p = PresenceMatrix::from_masks(2, vec![0b01, 0b01]).unwrap();
        match compute_factor_a(&p).unwrap_err() {
            MceError::Config { reason, .. } => assert!(reason.contains("modality 1")),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn factor_b_reference_batches() {
        let (_, b) = compute_factor_b(&[23.6667, 11.6667, 4.0], &[91.0, 26.0, 12.0], &[101, 65, 20]).unwrap();
        assert!(close(&b, &[0.6667, 0.2205, 0.4], 1e-3), "{b:?}");

        let (delta, b) = compute_factor_b(&[59.6667, 34.6667, 10.6667], &[91.0, 29.0, 8.0], &[105, 79, 25]).unwrap();
        let raw: Vec<f64> = delta.iter().zip([105.0, 79.0, 25.0]).map(|(d, c)| d / c).collect();
        assert!(close(&raw, &[0.2984, -0.0717, -0.1067], 1e-3), "{raw:?}");
        assert!(close(&b, &[0.2984, 0.0, 0.0], 1e-3));

        let (_, b) = compute_factor_b(
            &[0.3053, 0.2146, 0.0, 0.2013],
            &[0.8216, 0.8051, 0.8018, 0.8283],
            &[1, 1, 0, 1],
        )
        .unwrap();
        assert!(close(&b, &[0.5163, 0.5905, 0.0, 0.6270], 1e-3), "{b:?}");
    }

    fn table(masks: &[Coalition], vals: &[&[(Coalition, f64)]]) -> ValueTable {
        let maps: Vec<BTreeMap<Coalition, f64>> = vals.iter().map(|v| v.iter().cloned().collect()).collect();
        ValueTable::from_values(masks.to_vec(), &maps).unwrap()
    }

    #[test]
    fn single_present_modality_takes_full_credit() {
        let t = table(&[0b010], &[&[(0b010, 1.0)]]);
        let phi = batch_shapley(&t, 3, &ShapleySettings::default(), 0).unwrap();
        assert_eq!(phi, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn modality_absent_from_batch_gets_zero() {
        let t = table(
            &[0b011, 0b001],
            &[&[(0b001, 1.0), (0b010, 0.0), (0b011, 1.0)], &[(0b001, 0.0)]],
        );
        let phi = batch_shapley(&t, 3, &ShapleySettings::default(), 0).unwrap();
        assert_eq!(phi[2], 0.0);
        let (_, b) = compute_factor_b(&phi, &[1.0, 1.0, 0.0], &[2, 1, 0]).unwrap();
        assert_eq!(b[2], 0.0);
    }

    fn permutation_average(mask: Coalition, v: &dyn Fn(Coalition) -> f64, players: usize) -> Vec<f64> {
        let ids: Vec<usize> = members(mask).collect();
        let mut perms = vec![vec![]];
        for _ in 0..ids.len() {
            perms = perms
                .into_iter()
                .flat_map(|p: Vec<usize>| {
                    ids.iter()
                        .filter(|i| !p.contains(i))
                        .map(|&i| {
                            let mut q = p.clone();
                            q.push(i);
                            q
                        })
                        .collect::<Vec<_>>()
                })
                .collect();
        }
        let mut phi = vec![0.0; players];
        for p in &perms {
            let mut s = 0;
            for &i in p {
                phi[i] += v(s | 1 << i) - v(s);
                s |= 1 << i;
            }
        }
        phi.iter().map(|x| x / perms.len() as f64).collect()
    }

    #[test]
    fn two_sample_batch_matches_brute_force() {
        let v0 = [(0b001, 1.0), (0b010, 0.0), (0b100, 0.0), (0b011, 1.0), (0b101, 0.0), (0b110, 1.0), (0b111, 1.0)];
        let v1 = [(0b001, 0.0), (0b100, 1.0), (0b101, 1.0)];
        let t = table(&[0b111, 0b101], &[&v0, &v1]);
        let phi = batch_shapley(&t, 3, &ShapleySettings::default(), 0).unwrap();
        let mut expect = vec![0.0; 3];
        for n in 0..2 {
            let f = |s: Coalition| t.value(n, s).unwrap();
            for (e, p) in expect.iter_mut().zip(permutation_average(t.mask(n), &f, 3)) {
                *e += p;
            }
        }
        assert!(close(&phi, &expect, 1e-12), "{phi:?} {expect:?}");
    }

    proptest! {
        #[test]
        fn per_sample_efficiency_and_scaling(mask in 1u64..16, seed in 0u64..1000, c in 0.1f64..10.0) {
            let vals: BTreeMap<Coalition, f64> = enumerate_subsets(mask)
                .into_iter()
                .map(|s| (s, ((s.wrapping_mul(2654435761) ^ seed) % 97) as f64 / 97.0))
                .collect();
            let scaled: BTreeMap<Coalition, f64> = vals.iter().map(|(&s, &v)| (s, c * v)).collect();
            let t = ValueTable::from_values(vec![mask], &[vals.clone()]).unwrap();
            let ts = ValueTable::from_values(vec![mask], &[scaled]).unwrap();
            let s = ShapleySettings::default();
            let phi = sample_shapley(&t, 0, 4, &s, 0).unwrap().phi;
            let phis = sample_shapley(&ts, 0, 4, &s, 0).unwrap().phi;
            prop_assert!((phi.iter().sum::<f64>() - vals[&mask]).abs() < 1e-10);
            for (a, b) in phi.iter().zip(&phis) {
                prop_assert!((c * a - b).abs() < 1e-9);
            }
            let argmax = |p: &[f64]| p.iter().enumerate().fold(0, |best, (i, &x)| if x > p[best] + 1e-12 { i } else { best });
            prop_assert_eq!(argmax(&phi), argmax(&phis));
        }

        #[test]
        fn factor_b_is_never_negative(
            phi in proptest::collection::vec(-5.0f64..50.0, 4),
            upper in proptest::collection::vec(0.0f64..50.0, 4),
            counts in proptest::collection::vec(0usize..60, 4),
        ) {
            let (delta, b) = compute_factor_b(&phi, &upper, &counts).unwrap();
            for m in 0..4 {
                prop_assert!(b[m] >= 0.0);
                if delta[m] <= 0.0 || counts[m] == 0 {
                    prop_assert_eq!(b[m], 0.0);
                }
            }
        }
    }

    #[test]
    fn monte_carlo_path_for_wide_samples() {
        let mask = 0b111;
        let vals: BTreeMap<Coalition, f64> = enumerate_subsets(mask).into_iter().map(|s| (s, size(s) as f64)).collect();
        let t = ValueTable::from_values(vec![mask], &[vals]).unwrap();
        let s = ShapleySettings {
            exact_threshold: 2,
            permutations: 50,
            seed: 1,
        };
        let r = sample_shapley(&t, 0, 3, &s, 4).unwrap();
        assert!(matches!(r.method, crate::coalition::ShapleyMethod::MonteCarlo { .. }));
        // additive game: every permutation gives the exact answer
        assert!(close(&r.phi, &[1.0, 1.0, 1.0], 1e-12));
    }

    #[test]
    fn hard_value_ties_break_to_lowest_class() {
        assert_eq!(sample_value(&[0.0, 0.0, 0.0, 0.0], 0, ValueKind::Hard), 1.0);
        assert_eq!(sample_value(&[0.0, 0.0, 0.0, 0.0], 2, ValueKind::Hard), 0.0);
        assert!((sample_value(&[0.0; 4], 1, ValueKind::Soft) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn infeasible_subset_is_contract_error() {
        let t = table(&[0b001], &[&[(0b001, 1.0)]]);
        assert!(matches!(t.value(0, 0b010), Err(MceError::Contract(_))));
        assert_eq!(t.value(0, 0).unwrap(), 0.0);
    }
}
