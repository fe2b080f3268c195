//! Unimodal pretraining, joint training with the capability factors and
//! losses, all-subset evaluation and capability probes.

use std::fmt;

use log::{debug, info};
use rand::seq::SliceRandom;

use crate::coalition::{enumerate_subsets, members, Coalition};
use crate::error::{MceError, Result};
use crate::lce::{batch_shapley, compute_factor_a, compute_factor_b, FrozenScores, LceState, ShapleySettings, ValueKind, ValueTable};
use crate::model::{FrozenUnimodal, ModelConfig, MultiModalModel};
use crate::params::{Optimizer, OptimizerKind, ParamStore};
use crate::rce::{build_objective, build_subset_plan, ObjectiveSettings};
use crate::runlog::{CapabilityRow, EvalRow, FactorRow, LossRow, RunLog};
use crate::seeding::{derive_seed, rng_for, stream};
use crate::synth::{Dataset, MultiModalBatch};
use crate::tensor::{softmax_cross_entropy, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LceConfig {
    pub use_a: bool,
    pub use_b: bool,
    pub value_kind: ValueKind,
    pub exact_threshold: usize,
    pub permutations: usize,
}

impl Default for LceConfig {
    fn default() -> Self {
        LceConfig {
            use_a: true,
            use_b: true,
            value_kind: ValueKind::Hard,
            exact_threshold: 10,
            permutations: 100,
        }
    }
}

/// Which forward path scores a modality subset at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalPath {
    /// Slots outside the subset are zeroed before fusion.
    #[default]
    Masked,
    /// Slots outside the subset are filled by the reconstruction module.
    Completed,
}

impl std::str::FromStr for EvalPath {
    type Err = MceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(EvalPath::Masked),
            "completed" => Ok(EvalPath::Completed),
            other => Err(MceError::config("eval.path", format!("unknown path `{other}`"))),
        }
    }
}

impl fmt::Display for EvalPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalPath::Masked => "masked",
            EvalPath::Completed => "completed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-3,
        }
    }
}

/// Fresh linear decoder trained full-batch on frozen features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            steps: 300,
            learning_rate: 2e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub objective: ObjectiveSettings,
    pub lce: LceConfig,
    /// Largest number of batch subsets used by the subset and reconstruction
    /// losses; larger plans are subsampled. 0 disables the cap.
    pub subset_cap: usize,
    pub eval_path: EvalPath,
    /// Evaluate on the held-out split every this many epochs (0: final only).
    pub eval_every: usize,
    /// Probe every encoder every this many epochs (0: never).
    pub probe_every: usize,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            objective: ObjectiveSettings::default(),
            lce: LceConfig::default(),
            subset_cap: 64,
            eval_path: EvalPath::Masked,
            eval_every: 0,
            probe_every: 0,
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(MceError::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(MceError::config("train.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MceError::config("train.learning_rate", "must be positive"));
        }
        if self.lce.permutations == 0 {
            return Err(MceError::config("lce.permutations", "must be at least 1"));
        }
        let l = self.objective.lambdas;
        for (field, v) in [("rce.lambda_single", l.single), ("rce.lambda_sub", l.sub), ("rce.lambda_aux", l.aux)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MceError::config(field, "must be a non-negative number"));
            }
        }
        if !(self.objective.epsilon > 0.0) {
            return Err(MceError::config("rce.epsilon", "must be positive"));
        }
        Ok(())
    }
}

/// Training stopped because a loss component was not finite.
#[derive(Debug)]
pub struct Diverged {
    /// Model state at the start of the failing step.
    pub last_good: MultiModalModel,
    pub log: RunLog,
    pub step: usize,
    pub component: &'static str,
}

#[derive(Debug)]
pub enum TrainError {
    Failed(MceError),
    Diverged(Box<Diverged>),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Failed(e) => e.fmt(f),
            TrainError::Diverged(d) => write!(f, "training diverged at step {} ({} loss)", d.step, d.component),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<MceError> for TrainError {
    fn from(e: MceError) -> Self {
        TrainError::Failed(e)
    }
}

fn shuffled(n: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Trains an encoder and linear decoder on the samples where modality `m`
/// is present, then hands it out frozen.
pub fn pretrain_unimodal(dataset: &Dataset, m: usize, model: &ModelConfig, config: &PretrainConfig, seed: u64) -> Result<FrozenUnimodal> {
    let rows = dataset.present_indices(m);
    if rows.is_empty() {
        return Err(MceError::config("data.missing_rates", format!("modality {m} has no present samples")));
    }
    if config.epochs == 0 || config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(MceError::config("pretrain", "epochs, batch_size and learning_rate must be positive"));
    }
    let mut frozen = FrozenUnimodal::init(model, m, seed)?;
    let mut store: ParamStore = frozen.params().clone();
    let mut opt = Optimizer::new(OptimizerKind::Adam, config.learning_rate);
    let mut rng = rng_for(derive_seed(seed, m as u64), stream::PRETRAIN);
    let x = &dataset.inputs[m];
    for _ in 0..config.epochs {
        let order = shuffled(rows.len(), &mut rng);
        for chunk in order.chunks(config.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&i| rows[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&n| dataset.labels[n]).collect();
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, true);
            let xv = tape.constant(x.select_rows(&idx));
            let z = FrozenUnimodal::forward(&mut tape, &vars, xv)?;
            let loss = softmax_cross_entropy(&mut tape, z, &labels)?;
            if !tape.scalar(loss).is_finite() {
                return Err(MceError::Divergence { component: "pretrain", step: opt.steps() as usize });
            }
            let g = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| g.wrt(v)).collect();
            opt.apply(&mut store, &grads)?;
        }
    }
    *frozen.params_mut() = store;
    Ok(frozen)
}

/// Per-subset accuracies plus their unweighted mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetReport {
    /// (subset, feasible samples, accuracy), subsets ascending.
    pub rows: Vec<(Coalition, usize, f64)>,
    pub average: f64,
}

impl SubsetReport {
    pub fn min(&self) -> f64 {
        self.rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min)
    }

    pub fn eval_rows(&self, epoch: usize) -> Vec<EvalRow> {
        let mut out: Vec<EvalRow> = self
            .rows
            .iter()
            .map(|&(s, n, a)| EvalRow {
                epoch,
                subset: subset_label(s),
                samples: n,
                accuracy: a,
            })
            .collect();
        out.push(EvalRow {
            epoch,
            subset: "mean".into(),
            samples: 0,
            accuracy: self.average,
        });
        out
    }
}

/// `0+2` for the subset {0, 2}.
pub fn subset_label(s: Coalition) -> String {
    members(s).map(|m| m.to_string()).collect::<Vec<_>>().join("+")
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

/// Accuracy of every non-empty modality subset over the samples where it is
/// available. Subsets with no feasible sample are skipped.
pub fn evaluate_all_subsets(model: &MultiModalModel, dataset: &Dataset, path: EvalPath) -> Result<SubsetReport> {
    let full = model.config().full_mask();
    let mut rows = Vec::new();
    for s in enumerate_subsets(full) {
        let idx: Vec<usize> = (0..dataset.len())
            .filter(|&n| s & !dataset.presence.mask(n) == 0)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let mut batch = dataset.batch(&idx);
        let logits = match path {
            EvalPath::Masked => model.predict_subset(&batch, s)?,
            EvalPath::Completed => {
                batch.masks = vec![s; idx.len()];
                model.predict_completed(&batch)?
            }
        };
        rows.push((s, idx.len(), accuracy(&logits.argmax_rows(), &batch.labels)));
    }
    let average = rows.iter().map(|r| r.2).sum::<f64>() / rows.len().max(1) as f64;
    Ok(SubsetReport { rows, average })
}

/// Trains a fresh linear decoder on frozen `train` features and returns its
/// accuracy on `test` features.
pub fn probe_features(train: (&Tensor, &[usize]), test: (&Tensor, &[usize]), classes: usize, config: &ProbeConfig, seed: u64) -> Result<f64> {
    let (xtr, ytr) = train;
    let (xte, yte) = test;
    if xtr.rows() == 0 {
        return Err(MceError::Contract("probe needs at least one training sample".into()));
    }
    let d = xtr.cols();
    let mut rng = rng_for(seed, stream::PROBE);
    let mut store = ParamStore::new();
    store.add("w", Tensor::randn(&[d, classes], 0.01, &mut rng));
    store.add("b", Tensor::zeros(&[classes]));
    let mut opt = Optimizer::new(OptimizerKind::Adam, config.learning_rate);
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, true);
        let x = tape.constant(xtr.clone());
        let z = crate::tensor::dense_forward(&mut tape, x, vars[0], vars[1])?;
        let loss = softmax_cross_entropy(&mut tape, z, ytr)?;
        let g = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| g.wrt(v)).collect();
        opt.apply(&mut store, &grads)?;
    }
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, false);
    let x = tape.constant(xte.clone());
    let z = crate::tensor::dense_forward(&mut tape, x, vars[0], vars[1])?;
    Ok(accuracy(&tape.value(z).argmax_rows(), yte))
}

/// Capability of modality `m`'s encoder in `model`: a fresh decoder on its
/// frozen features of present training samples, scored on `test`.
pub fn probe_capability(model: &MultiModalModel, m: usize, train: &Dataset, test: &Dataset, config: &ProbeConfig, seed: u64) -> Result<f64> {
    let rtr = train.present_indices(m);
    let rte = test.present_indices(m);
    let htr = model.encode_modality(&train.inputs[m].select_rows(&rtr), m)?;
    let hte = model.encode_modality(&test.inputs[m].select_rows(&rte), m)?;
    let ytr: Vec<usize> = rtr.iter().map(|&n| train.labels[n]).collect();
    let yte: Vec<usize> = rte.iter().map(|&n| test.labels[n]).collect();
    probe_features((&htr, &ytr), (&hte, &yte), train.classes, config, derive_seed(seed, m as u64))
}

/// Same probe on a frozen unimodal model's encoder.
pub fn probe_frozen(frozen: &FrozenUnimodal, train: &Dataset, test: &Dataset, config: &ProbeConfig, seed: u64) -> Result<f64> {
    let m = frozen.modality();
    let rtr = train.present_indices(m);
    let rte = test.present_indices(m);
    let htr = frozen.features(&train.inputs[m].select_rows(&rtr))?;
    let hte = frozen.features(&test.inputs[m].select_rows(&rte))?;
    let ytr: Vec<usize> = rtr.iter().map(|&n| train.labels[n]).collect();
    let yte: Vec<usize> = rte.iter().map(|&n| test.labels[n]).collect();
    probe_features((&htr, &ytr), (&hte, &yte), train.classes, config, derive_seed(seed, m as u64))
}

/// Held-out accuracy of a frozen unimodal model on samples with its modality.
pub fn frozen_accuracy(frozen: &FrozenUnimodal, test: &Dataset) -> Result<f64> {
    let idx = test.present_indices(frozen.modality());
    let batch = test.batch(&idx);
    Ok(accuracy(&frozen.predict(&batch)?, &batch.labels))
}

/// Result of [`train_mce`].
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: MultiModalModel,
    pub log: RunLog,
    pub factor_a: Vec<f64>,
}

/// Factor values for one batch, computed without recording gradients.
pub fn batch_factors(
    model: &MultiModalModel,
    batch: &MultiModalBatch,
    indices: &[usize],
    scores: &FrozenScores,
    factor_a: &[f64],
    config: &TrainConfig,
    step: usize,
) -> Result<LceState> {
    let m_count = model.config().modalities;
    let table = ValueTable::compute(model, batch, config.lce.value_kind)?;
    let settings = ShapleySettings {
        exact_threshold: config.lce.exact_threshold,
        permutations: config.lce.permutations,
        seed: derive_seed(config.seed, stream::SHAPLEY),
    };
    let phi = batch_shapley(&table, m_count, &settings, step as u64)?;
    let upper = scores.upperbound(indices);
    let present_count: Vec<usize> = (0..m_count)
        .map(|m| batch.masks.iter().filter(|&&k| k >> m & 1 == 1).count())
        .collect();
    let (delta, b) = compute_factor_b(&phi, &upper, &present_count)?;
    Ok(LceState {
        a: if config.lce.use_a { factor_a.to_vec() } else { vec![1.0; m_count] },
        b: if config.lce.use_b { b } else { vec![1.0; m_count] },
        phi,
        upper,
        delta,
        present_count,
    })
}

/// Joint training. `A` is computed once from the training presence matrix;
/// every batch then computes `U`, `φ` and `B`, builds the subset plan and
/// takes one optimizer step on the combined objective.
pub fn train_mce(
    train: &Dataset,
    test: &Dataset,
    frozen: &[FrozenUnimodal],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> std::result::Result<Trained, TrainError> {
    config.validate()?;
    let m_count = model_config.modalities;
    if frozen.len() != m_count || frozen.iter().enumerate().any(|(m, f)| f.modality() != m) {
        return Err(MceError::Contract("one frozen unimodal model per modality is required, in order".into()).into());
    }
    let factor_a = compute_factor_a(&train.presence)?.normalized;
    let scores = FrozenScores::compute(frozen, train, config.lce.value_kind)?;
    let upper_acc: Vec<f64> = frozen.iter().map(|f| frozen_accuracy(f, test)).collect::<Result<_>>()?;
    info!("factor A = {factor_a:?}");

    let mut model = MultiModalModel::new(model_config, config.seed)?;
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate);
    let mut rng = rng_for(config.seed, stream::SHUFFLE);
    let mut log = RunLog::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let order = shuffled(train.len(), &mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = train.batch(chunk);
            let state = batch_factors(&model, &batch, chunk, &scores, &factor_a, config, step)?;
            for m in 0..m_count {
                log.factors.push(FactorRow {
                    step,
                    modality: m,
                    present_count: state.present_count[m],
                    a: state.a[m],
                    upper: state.upper[m],
                    phi: state.phi[m],
                    delta: state.delta[m],
                    b: state.b[m],
                });
            }
            let plan = build_subset_plan(&batch.masks)?.capped(
                config.subset_cap,
                derive_seed(config.seed, step as u64),
                stream::SUBSET_CAP,
            );
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let h = vars.encode(&mut tape, &batch)?;
            let objective = build_objective(&mut tape, &vars, &h, &batch.labels, &plan, &state.weights(), &config.objective)?;
            let breakdown = match objective.breakdown(&tape, config.objective.lambdas, step) {
                Ok(b) => b,
                Err(MceError::Divergence { component, step }) => {
                    return Err(TrainError::Diverged(Box::new(Diverged {
                        last_good: model,
                        log,
                        step,
                        component,
                    })))
                }
                Err(e) => return Err(e.into()),
            };
            log.losses.push(LossRow {
                step,
                epoch,
                task: breakdown.task,
                single: breakdown.single,
                sub: breakdown.sub,
                aux: breakdown.aux,
                total: breakdown.total,
            });
            let g = tape.backward(objective.total)?;
            let grads: Vec<Tensor> = vars.all.iter().map(|&v| g.wrt(v)).collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(TrainError::Diverged(Box::new(Diverged {
                    last_good: model,
                    log,
                    step,
                    component: "gradient",
                })));
            }
            opt.apply(model.params_mut(), &grads)?;
            step += 1;
        }
        let last = epoch + 1 == config.epochs;
        if last || (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0) {
            let report = evaluate_all_subsets(&model, test, config.eval_path)?;
            debug!("epoch {} mean subset accuracy {:.4}", epoch + 1, report.average);
            log.evals.extend(report.eval_rows(epoch + 1));
        }
        if config.probe_every > 0 && ((epoch + 1) % config.probe_every == 0 || last) {
            for m in 0..m_count {
                log.capability.push(CapabilityRow {
                    epoch: epoch + 1,
                    modality: m,
                    capability: probe_capability(&model, m, train, test, &config.probe, config.seed)?,
                    upperbound: upper_acc[m],
                });
            }
        }
    }
    Ok(Trained { model, log, factor_a })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rce::Lambdas;
    use crate::synth::{generate_split, SynthConfig};

    fn tiny_data(snr: f64, seed: u64) -> (Dataset, Dataset) {
        let sc = SynthConfig {
            samples: 120,
            input_dim: 6,
            snr: vec![snr; 3],
            missing_rates: vec![0.2, 0.5, 0.6],
            seed,
            ..SynthConfig::default()
        };
        generate_split(&sc, 60).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            encoder_hidden: 8,
            feature_dim: 4,
            ffn_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn pretrain_all(train: &Dataset, mc: &ModelConfig, seed: u64) -> Vec<FrozenUnimodal> {
        let pc = PretrainConfig { epochs: 30, batch_size: 32, learning_rate: 1e-2 };
        (0..3).map(|m| pretrain_unimodal(train, m, mc, &pc, seed).unwrap()).collect()
    }

    #[test]
    fn noiseless_pretraining_is_perfect() {
        let (train, test) = tiny_data(f64::INFINITY, 1);
        let frozen = pretrain_all(&train, &tiny_model(), 1);
        for f in &frozen {
            assert_eq!(frozen_accuracy(f, &test).unwrap(), 1.0);
        }
    }

    #[test]
    fn training_is_deterministic_and_keeps_frozen_models() {
        let (train, test) = tiny_data(2.0, 2);
        let mc = tiny_model();
        let frozen = pretrain_all(&train, &mc, 2);
        let before: Vec<String> = frozen.iter().map(|f| f.params().fingerprint()).collect();
        let cfg = TrainConfig { epochs: 2, batch_size: 32, seed: 5, ..TrainConfig::default() };
        let a = train_mce(&train, &test, &frozen, &mc, &cfg).unwrap();
        let b = train_mce(&train, &test, &frozen, &mc, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.model.params().fingerprint(), b.model.params().fingerprint());
        let after: Vec<String> = frozen.iter().map(|f| f.params().fingerprint()).collect();
        assert_eq!(before, after);

        // one factor row per modality per step, steps strictly increasing
        let steps = a.log.losses.len();
        assert_eq!(steps, 2 * 120usize.div_ceil(32));
        assert_eq!(a.log.factors.len(), 3 * steps);
        assert!(a.log.losses.windows(2).all(|w| w[0].step < w[1].step));
        assert!(a.log.factors.iter().all(|r| r.b >= 0.0));
    }

    #[test]
    fn zero_lambdas_log_zero_auxiliary_terms() {
        let (train, test) = tiny_data(2.0, 3);
        let mc = tiny_model();
        let frozen = pretrain_all(&train, &mc, 3);
        let mut cfg = TrainConfig { epochs: 1, batch_size: 40, ..TrainConfig::default() };
        cfg.objective.lambdas = Lambdas::ZERO;
        let r = train_mce(&train, &test, &frozen, &mc, &cfg).unwrap();
        assert!(r.log.losses.iter().all(|l| l.single == 0.0 && l.sub == 0.0 && l.aux == 0.0 && l.total == l.task));
    }

    #[test]
    fn divergence_returns_last_good_model() {
        let (train, test) = tiny_data(2.0, 4);
        let mc = tiny_model();
        let frozen = pretrain_all(&train, &mc, 4);
        let cfg = TrainConfig { epochs: 1, batch_size: 40, learning_rate: 1e300, optimizer: OptimizerKind::Sgd, ..TrainConfig::default() };
        match train_mce(&train, &test, &frozen, &mc, &cfg) {
            Err(TrainError::Diverged(d)) => {
                assert!(d.step >= 1);
                assert!(d.last_good.params().tensors().iter().all(Tensor::is_finite));
                assert_eq!(d.log.losses.len(), d.step);
            }
            other => panic!("expected divergence, got {:?}", other.map(|t| t.log.losses.len())),
        }
    }

    #[test]
    fn subset_report_shapes() {
        let (train, test) = tiny_data(2.0, 5);
        let model = MultiModalModel::new(&tiny_model(), 0).unwrap();
        let r = evaluate_all_subsets(&model, &test, EvalPath::Masked).unwrap();
        assert_eq!(r.rows.len(), 7);
        assert_eq!(r.eval_rows(0).len(), 8);
        let r = evaluate_all_subsets(&model, &train, EvalPath::Completed).unwrap();
        assert_eq!(r.rows.len(), 7);

        let two = ModelConfig { modalities: 2, ..tiny_model() };
        let sc = SynthConfig { modalities: 2, samples: 30, input_dim: 6, snr: vec![1.0; 2], missing_rates: vec![0.0; 2], ..SynthConfig::default() };
        let (d2, _) = generate_split(&sc, 1).unwrap();
        let m2 = MultiModalModel::new(&two, 0).unwrap();
        assert_eq!(evaluate_all_subsets(&m2, &d2, EvalPath::Masked).unwrap().rows.len(), 3);
    }

    #[test]
    fn constant_predictor_scores_class_frequency() {
        let (_, test) = tiny_data(2.0, 6);
        let mut model = MultiModalModel::new(&tiny_model(), 0).unwrap();
        // zero decoder weights, bias favouring class 2
        let names = model.params().names().to_vec();
        for (name, p) in names.iter().zip(model.params_mut().tensors_mut()) {
            if name == "decoder.w" {
                p.data_mut().fill(0.0);
            } else if name == "decoder.b" {
                p.data_mut()[2] = 1.0;
            }
        }
        let freq = test.labels.iter().filter(|&&y| y == 2).count() as f64 / test.len() as f64;
        let r = evaluate_all_subsets(&model, &test, EvalPath::Masked).unwrap();
        assert!(r.rows.iter().all(|row| (row.2 - freq).abs() < 1e-12));
    }

    #[test]
    fn probe_leaves_encoder_untouched() {
        let (train, test) = tiny_data(2.0, 7);
        let model = MultiModalModel::new(&tiny_model(), 1).unwrap();
        let before = model.params().fingerprint();
        let acc = probe_capability(&model, 0, &train, &test, &ProbeConfig::default(), 0).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(model.params().fingerprint(), before);
    }
}
