//! Post-hoc analysis of trained models and logged runs.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{MceError, Result};
use crate::runlog::RunLog;
use crate::tensor::Tensor;

/// Class-separation statistics of a feature matrix.
///
/// * `intra`: mean over classes (with ≥2 samples) of the mean pairwise
///   Euclidean distance within the class.
/// * `inter`: mean pairwise Euclidean distance between class centroids.
/// * `ratio`: `intra / inter`; lower means tighter, better separated classes.
/// * `cosine`: mean over samples of the cosine similarity to the sample's
///   class centroid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprQualityReport {
    pub intra: f64,
    pub inter: f64,
    pub ratio: f64,
    pub cosine: f64,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0),
    }
}

pub fn repr_quality(features: &Tensor, labels: &[usize]) -> Result<ReprQualityReport> {
    if features.rows() != labels.len() {
        return Err(MceError::Dimension {
            op: "repr_quality",
            lhs: features.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (n, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(n);
    }
    if groups.len() < 2 {
        return Err(MceError::Contract("representation quality needs at least two classes".into()));
    }
    let d = features.cols();
    let mut centroids: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&y, rows) in &groups {
        let mut c = vec![0.0; d];
        for &n in rows {
            for (acc, v) in c.iter_mut().zip(features.row(n)) {
                *acc += v;
            }
        }
        c.iter_mut().for_each(|v| *v /= rows.len() as f64);
        centroids.insert(y, c);
    }

    let mut intra_sum = 0.0;
    let mut intra_classes = 0usize;
    for (&y, rows) in &groups {
        if rows.len() < 2 {
            warn!("class {y} has a single sample and is left out of the intra-class distance");
            continue;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (i, &a) in rows.iter().enumerate() {
            for &b in &rows[i + 1..] {
                total += distance(features.row(a), features.row(b));
                pairs += 1;
            }
        }
        intra_sum += total / pairs as f64;
        intra_classes += 1;
    }
    if intra_classes == 0 {
        return Err(MceError::Contract("no class has two or more samples".into()));
    }
    let intra = intra_sum / intra_classes as f64;

    let cs: Vec<&Vec<f64>> = centroids.values().collect();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            inter += distance(cs[i], cs[j]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;

    let cos = labels
        .iter()
        .enumerate()
        .map(|(n, y)| cosine(features.row(n), &centroids[y]))
        .sum::<f64>()
        / labels.len() as f64;

    Ok(ReprQualityReport {
        intra,
        inter,
        ratio: intra / inter,
        cosine: cos,
    })
}

/// One row of a capability trajectory. `run` names the source directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapabilityReportRow {
    pub run: String,
    pub epoch: usize,
    pub modality: usize,
    pub capability: f64,
    pub upperbound: f64,
}

/// Concatenates the logged probe trajectories of several runs. Each logged
/// row already carries the frozen-unimodal ceiling for its modality.
pub fn capability_report(runs: &[(String, RunLog)]) -> Vec<CapabilityReportRow> {
    runs.iter()
        .flat_map(|(name, log)| {
            log.capability.iter().map(move |r| CapabilityReportRow {
                run: name.clone(),
                epoch: r.epoch,
                modality: r.modality,
                capability: r.capability,
                upperbound: r.upperbound,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runlog::CapabilityRow;
    use proptest::prelude::*;

    #[test]
    fn identical_class_members() {
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0], vec![0.0, 3.0]]).unwrap();
        let r = repr_quality(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!(r.intra, 0.0);
        assert!((r.cosine - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_geometry() {
        let f = Tensor::from_rows(&[vec![-1.0, 0.0], vec![1.0, 0.0], vec![3.0, 0.0], vec![5.0, 0.0]]).unwrap();
        let r = repr_quality(&f, &[0, 0, 1, 1]).unwrap();
        assert_eq!((r.intra, r.inter, r.ratio), (2.0, 4.0, 0.5));
    }

    #[test]
    fn degenerate_inputs() {
        let f = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![5.0]]).unwrap();
        // class 1 has a single sample: excluded from intra, kept as a centroid
        let r = repr_quality(&f, &[0, 0, 1]).unwrap();
        assert_eq!(r.intra, 1.0);
        assert_eq!(r.inter, 4.5);
        assert!(repr_quality(&f, &[0, 0, 0]).is_err());
        assert!(repr_quality(&f, &[0, 1, 2]).is_err());
    }

    fn rotate(f: &Tensor, theta: f64) -> Tensor {
        let (c, s) = (theta.cos(), theta.sin());
        let rows: Vec<Vec<f64>> = (0..f.rows())
            .map(|n| {
                let r = f.row(n);
                vec![c * r[0] - s * r[1], s * r[0] + c * r[1], r[2]]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    proptest! {
        #[test]
        fn invariant_under_permutation_and_rotation(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 6..20),
            theta in 0.0f64..6.3,
            shift in 0usize..20,
        ) {
            let n = pts.len();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let f = Tensor::from_rows(&pts.iter().map(|&(a, b, c)| vec![a, b, c]).collect::<Vec<_>>()).unwrap();
            let base = repr_quality(&f, &labels).unwrap();

            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let pf = f.select_rows(&perm);
            let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let p = repr_quality(&pf, &pl).unwrap();
            prop_assert!((p.intra - base.intra).abs() < 1e-9);
            prop_assert!((p.inter - base.inter).abs() < 1e-9);
            prop_assert!((p.cosine - base.cosine).abs() < 1e-9);

            let r = repr_quality(&rotate(&f, theta), &labels).unwrap();
            prop_assert!((r.intra - base.intra).abs() < 1e-9);
            prop_assert!((r.inter - base.inter).abs() < 1e-9);
            prop_assert!((r.cosine - base.cosine).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&r.cosine));
        }
    }

    #[test]
    fn capability_report_concatenates_runs() {
        let mut a = RunLog::default();
        a.capability.push(CapabilityRow { epoch: 1, modality: 2, capability: 0.4, upperbound: 0.6 });
        let mut b = RunLog::default();
        b.capability.push(CapabilityRow { epoch: 1, modality: 2, capability: 0.5, upperbound: 0.6 });
        let rows = capability_report(&[("baseline".into(), a), ("mce".into(), b)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].run, "baseline");
        assert_eq!(rows[1].capability, 0.5);
    }
}
