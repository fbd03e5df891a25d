//! Training loop, evaluation and hyperparameter search.

use std::borrow::Cow;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::alignment::{concordance_report, gradient_angle};
use crate::checkpoint::Checkpoint;
use crate::data::{BatchIterator, Dataset, Splits};
use crate::error::{Error, Result};
use crate::feedback::FeedbackRule;
use crate::network::{Architecture, InitConfig, Network};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{softmax_cross_entropy, Scalar, Tensor};

/// Probe batch size for angle measurements.
pub const PROBE_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rule: FeedbackRule,
    pub lr: f64,
    /// Scale of the random feedback; `None` for rules that do not draw one.
    pub sigma: Option<f64>,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Train on a seeded subset of this many samples.
    pub train_subset: Option<usize>,
    /// Log a metrics row every this many steps; 0 logs only at epoch ends
    /// and skips the alignment probes.
    pub probe_every: usize,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(rule: FeedbackRule, lr: f64) -> Self {
        TrainConfig {
            rule,
            lr,
            sigma: None,
            weight_decay: 0.0,
            epochs: 50,
            batch_size: 128,
            seed: 42,
            train_subset: None,
            probe_every: 100,
            data_dir: None,
            out_dir: None,
        }
    }

    /// Checks the values and drops `sigma` where the rule ignores it.
    pub fn normalized(mut self) -> Result<Self> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.rule.uses_sigma() {
            match self.sigma {
                Some(s) if s > 0.0 && s.is_finite() => {}
                other => {
                    return Err(Error::Config(format!(
                        "rule {} needs a positive sigma, got {other:?}",
                        self.rule
                    )))
                }
            }
        } else {
            self.sigma = None;
        }
        Ok(self)
    }

    pub fn init(&self) -> InitConfig {
        InitConfig { seed: self.seed, sigma: self.sigma }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.weight_decay)
    }
}

/// One metrics row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub step: u64,
    /// Epochs completed when the row was written, counting the current one.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// Set on the row that closes an epoch.
    pub val_acc: Option<f64>,
    pub angles: Vec<Option<f64>>,
    pub concordance: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsTable {
    pub angle_layers: Vec<String>,
    pub concordance_layers: Vec<String>,
    pub rows: Vec<RunRecord>,
}

impl MetricsTable {
    pub fn columns(&self) -> Vec<String> {
        let mut c: Vec<String> = ["step", "epoch", "train_loss", "train_acc", "val_acc"]
            .map(String::from)
            .to_vec();
        c.extend(self.angle_layers.iter().map(|l| format!("angle_{l}")));
        c.extend(self.concordance_layers.iter().map(|l| format!("concordance_{l}")));
        c
    }

    /// Header row, then one line per record; undefined values are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = self.columns().join(",");
        s.push('\n');
        for r in &self.rows {
            let mut fields = vec![
                r.step.to_string(),
                r.epoch.to_string(),
                format!("{:.6}", r.train_loss),
                format!("{:.6}", r.train_acc),
                opt(r.val_acc),
            ];
            fields.extend(r.angles.iter().map(|&v| opt(v)));
            fields.extend(r.concordance.iter().map(|&v| opt(v)));
            s.push_str(&fields.join(","));
            s.push('\n');
        }
        s
    }

    /// Validation accuracy of every completed epoch, in order.
    pub fn epoch_val_accuracies(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.val_acc).collect()
    }
}

pub struct TrainOutcome {
    /// Highest validation accuracy seen; the initialization if no epoch ran.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: MetricsTable,
}

/// Index of the largest entry; the first one on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: Vec<bool>,
    pub predictions: Vec<usize>,
    /// `[n, classes]`.
    pub logits: Tensor<f32>,
}

/// Center-crop evaluation of every sample in `dataset`, in order.
pub fn evaluate(net: &Network<f32>, dataset: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptySubset("cannot evaluate on an empty dataset".into()));
    }
    let mut scratch = net.clone();
    let classes = net.num_classes();
    let mut logits = Vec::with_capacity(dataset.len() * classes);
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut correct = Vec::with_capacity(dataset.len());
    for batch in BatchIterator::eval(dataset, batch_size.max(1)) {
        let out = scratch.forward(&batch.images)?;
        for (i, &label) in batch.labels.iter().enumerate() {
            let p = argmax(out.row(i));
            predictions.push(p);
            correct.push(p == label);
        }
        logits.extend_from_slice(out.data());
    }
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    Ok(Evaluation {
        accuracy,
        correct,
        predictions,
        logits: Tensor::new(vec![dataset.len(), classes], logits)?,
    })
}

fn probe_row<T: Scalar>(
    net: &mut Network<T>,
    probe: &Option<(Tensor<T>, Vec<usize>)>,
    rule: FeedbackRule,
) -> Result<(Vec<Option<f64>>, Vec<Option<f64>>)> {
    let concordance = concordance_report(net).into_iter().map(|l| l.value).collect();
    let angles = match probe {
        Some((x, y)) => gradient_angle(net, x, y, rule)?.layers.into_iter().map(|l| l.value).collect(),
        None => Vec::new(),
    };
    Ok((angles, concordance))
}

/// Trains on `splits.train` (or its seeded subset), validating on `splits.val`
/// after every epoch and keeping the best checkpoint.
pub fn train(config: &TrainConfig, splits: &Splits) -> Result<TrainOutcome> {
    let config = config.clone().normalized()?;
    let train_set: Cow<Dataset> = match config.train_subset {
        Some(n) => Cow::Owned(splits.train.sample(n, derive_seed(config.seed, "train-subset"))),
        None => Cow::Borrowed(&splits.train),
    };
    if train_set.is_empty() {
        return Err(Error::EmptySubset("training set is empty".into()));
    }
    let rule = config.rule;
    let mut net = Network::<f32>::new(Architecture::cifar(), rule, &config.init())?;
    let mut adam = Adam::new(config.adam(), net.params());
    let mut run_rng = Rng::for_component(config.seed, "epochs");

    let probes = config.probe_every > 0;
    let probe = (probes && !splits.val.is_empty()).then(|| {
        let idx: Vec<usize> = (0..splits.val.len().min(PROBE_BATCH)).collect();
        let labels = idx.iter().map(|&i| splits.val.label(i)).collect();
        (splits.val.eval_batch(&idx), labels)
    });
    let names = net.layer_names();
    let metrics_shell = MetricsTable {
        angle_layers: if probe.is_some() { names[..names.len() - 1].to_vec() } else { Vec::new() },
        concordance_layers: if probes { names[1..].to_vec() } else { Vec::new() },
        rows: Vec::new(),
    };
    let mut metrics = metrics_shell;

    let snapshot = |net: &Network<f32>, adam: &Adam<f32>, rng: &Rng, epoch: usize, val: Option<f64>| {
        let mut n = net.clone();
        n.clear_cache();
        Checkpoint {
            config: config.clone(),
            network: n,
            adam: adam.clone(),
            epoch,
            val_acc: val,
            rng: rng.state(),
        }
    };
    let mut best = snapshot(&net, &adam, &run_rng, 0, None);
    let mut step: u64 = 0;

    for epoch in 1..=config.epochs {
        let epoch_seed = run_rng.next_u64();
        let (mut loss_sum, mut hits, mut seen) = (0.0f64, 0usize, 0usize);
        for batch in BatchIterator::new(&train_set, config.batch_size, true, Some(epoch_seed)) {
            let logits = net.forward(&batch.images)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &batch.labels)?;
            let diverged = |step| Error::Diverged { step, last_good: Box::new(best.clone()) };
            if !loss.is_finite() {
                return Err(diverged(step));
            }
            let back = net.backward(&dlogits, rule)?;
            let grads: Vec<&Tensor<f32>> = back.grads.iter().flat_map(|g| [&g.weight, &g.bias]).collect();
            match adam.step(&mut net.params_mut(), &grads) {
                Err(Error::NonFinite(_)) => return Err(diverged(step)),
                other => other?,
            }
            step += 1;
            let n = batch.labels.len();
            loss_sum += loss * n as f64;
            hits += batch.labels.iter().enumerate().filter(|&(i, &y)| argmax(logits.row(i)) == y).count();
            seen += n;
            if probes && step.is_multiple_of(config.probe_every as u64) {
                let (angles, concordance) = probe_row(&mut net, &probe, rule)?;
                metrics.rows.push(RunRecord {
                    step,
                    epoch,
                    train_loss: loss_sum / seen as f64,
                    train_acc: hits as f64 / seen as f64,
                    val_acc: None,
                    angles,
                    concordance,
                });
            }
        }
        let val = evaluate(&net, &splits.val, config.batch_size)?.accuracy;
        match metrics.rows.last_mut() {
            Some(r) if r.step == step && probes => r.val_acc = Some(val),
            _ => {
                let (angles, concordance) =
                    if probes { probe_row(&mut net, &probe, rule)? } else { Default::default() };
                metrics.rows.push(RunRecord {
                    step,
                    epoch,
                    train_loss: loss_sum / seen as f64,
                    train_acc: hits as f64 / seen as f64,
                    val_acc: Some(val),
                    angles,
                    concordance,
                });
            }
        }
        if best.val_acc.is_none_or(|b| val > b) {
            best = snapshot(&net, &adam, &run_rng, epoch, Some(val));
        }
    }
    let last_val = metrics.rows.last().and_then(|r| r.val_acc);
    let last = snapshot(&net, &adam, &run_rng, config.epochs, last_val);
    Ok(TrainOutcome { best, last, metrics })
}

/// Values searched per hyperparameter; the product is probed in
/// lr-major, then weight decay, then sigma order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub sigmas: Vec<Option<f64>>,
}

impl Grid {
    /// The published search space for each rule.
    pub fn standard(rule: FeedbackRule) -> Self {
        match rule {
            FeedbackRule::Bp => Grid {
                lrs: vec![5e-4, 1e-3, 3e-3],
                weight_decays: vec![0.0, 1e-4],
                sigmas: vec![None],
            },
            FeedbackRule::UsfSn => Grid {
                lrs: vec![1e-3, 3e-3, 1e-2, 3e-2],
                weight_decays: vec![0.0],
                sigmas: vec![None],
            },
            FeedbackRule::FaRandom | FeedbackRule::FaToeplitz | FeedbackRule::UsfInit => Grid {
                lrs: vec![1e-3, 3e-3, 1e-2],
                weight_decays: vec![0.0],
                sigmas: vec![Some(0.01), Some(0.05), Some(0.1)],
            },
        }
    }

    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &wd in &self.weight_decays {
                for &sigma in &self.sigmas {
                    out.push(TrainConfig { lr, weight_decay: wd, sigma, ..base.clone() });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    /// Position in grid order.
    pub index: usize,
    pub config: TrainConfig,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridReport {
    /// Best first; equal accuracies keep grid order.
    pub ranked: Vec<GridRow>,
}

impl GridReport {
    pub fn best(&self) -> &TrainConfig {
        &self.ranked[0].config
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,grid_index,lr,weight_decay,sigma,val_acc\n");
        for (r, row) in self.ranked.iter().enumerate() {
            let sigma = row.config.sigma.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{sigma},{:.6}\n",
                r + 1,
                row.index,
                row.config.lr,
                row.config.weight_decay,
                row.val_acc
            ));
        }
        s
    }
}

/// Probes every grid point for `probe_epochs` epochs and ranks them by final
/// validation accuracy. `jobs > 1` runs probes on a thread pool; each probe
/// is seeded on its own, so the result does not depend on `jobs`.
pub fn grid_search(
    base: &TrainConfig,
    grid: &Grid,
    splits: &Splits,
    probe_epochs: usize,
    jobs: usize,
) -> Result<GridReport> {
    let configs = grid.configs(base);
    if configs.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    let configs: Vec<TrainConfig> = configs
        .into_iter()
        .map(|c| TrainConfig { epochs: probe_epochs, probe_every: 0, ..c }.normalized())
        .collect::<Result<_>>()?;
    let probe = |c: &TrainConfig| -> Result<f64> {
        let out = train(c, splits)?;
        out.metrics
            .rows
            .last()
            .and_then(|r| r.val_acc)
            .ok_or_else(|| Error::Config("grid probes need at least one epoch".into()))
    };
    let accs: Vec<Result<f64>> = if jobs > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| configs.par_iter().map(probe).collect())
    } else {
        configs.iter().map(probe).collect()
    };
    let mut ranked = configs
        .into_iter()
        .zip(accs)
        .enumerate()
        .map(|(index, (config, acc))| Ok(GridRow { index, config, val_acc: acc? }))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.val_acc.total_cmp(&a.val_acc).then(a.index.cmp(&b.index)));
    Ok(GridReport { ranked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split};

    fn splits(train: usize, val: usize) -> Splits {
        Splits {
            train: synthetic::dataset(train, 1, Split::Train),
            val: synthetic::dataset(val, 2, Split::Val),
            test: synthetic::dataset(10, 3, Split::Test),
        }
    }

    fn quick(rule: FeedbackRule) -> TrainConfig {
        TrainConfig {
            sigma: Some(0.05),
            epochs: 1,
            batch_size: 16,
            probe_every: 2,
            ..TrainConfig::new(rule, 1e-3)
        }
    }

    #[test]
    fn normalization_drops_irrelevant_sigma() {
        let c = quick(FeedbackRule::UsfSn).normalized().unwrap();
        assert_eq!(c.sigma, None);
        let c = quick(FeedbackRule::Bp).normalized().unwrap();
        assert_eq!(c.sigma, None);
        let c = TrainConfig { sigma: None, ..quick(FeedbackRule::UsfInit) };
        assert!(matches!(c.normalized(), Err(Error::Config(_))));
        assert!(TrainConfig { lr: 0.0, ..quick(FeedbackRule::Bp) }.normalized().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let s = splits(20, 10);
        let cfg = TrainConfig { epochs: 0, ..quick(FeedbackRule::FaToeplitz) };
        let out = train(&cfg, &s).unwrap();
        assert!(out.metrics.rows.is_empty());
        let init = Network::<f32>::new(Architecture::cifar(), cfg.rule, &cfg.init()).unwrap();
        assert_eq!(out.best.network, init);
        assert_eq!(out.best.val_acc, None);
        assert_eq!(out.best.adam.step_count(), 0);
    }

    #[test]
    fn runs_are_deterministic_and_track_best() {
        let s = splits(48, 16);
        let cfg = TrainConfig { epochs: 2, ..quick(FeedbackRule::UsfSn) };
        let a = train(&cfg, &s).unwrap();
        let b = train(&cfg, &s).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.best.network, b.best.network);
        let vals = a.metrics.epoch_val_accuracies();
        assert_eq!(vals.len(), 2);
        let max = vals.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(a.best.val_acc, Some(max));
        // 3 steps per epoch, rows at steps 2, 4 and two epoch ends.
        let steps: Vec<u64> = a.metrics.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![2, 3, 4, 6]);
        for r in &a.metrics.rows {
            assert_eq!(r.angles.len(), 4);
            assert_eq!(r.concordance.len(), 4);
            for v in r.angles.iter().flatten() {
                assert!((0.0..=180.0).contains(v));
            }
            for v in r.concordance.iter().flatten() {
                assert!((0.0..=1.0).contains(v));
            }
        }
        let csv = a.metrics.to_csv();
        assert!(csv.starts_with(
            "step,epoch,train_loss,train_acc,val_acc,angle_conv1,angle_conv2,angle_fc1,angle_fc2,\
             concordance_conv2,concordance_fc1,concordance_fc2,concordance_fc3\n"
        ));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let s = splits(32, 8);
        let cfg = TrainConfig { lr: 1e30, epochs: 3, ..quick(FeedbackRule::Bp) };
        match train(&cfg, &s) {
            Err(Error::Diverged { step, last_good }) => {
                assert!(step > 0);
                assert!(last_good.network.params().iter().all(|p| p.is_finite()));
            }
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("lr 1e30 should diverge"),
        }
    }

    #[test]
    fn evaluation_fixture() {
        let ds = synthetic::dataset(10, 4, Split::Test);
        let net = Network::<f32>::new(Architecture::cifar(), FeedbackRule::Bp, &InitConfig { seed: 1, sigma: None }).unwrap();
        let e = evaluate(&net, &ds, 3).unwrap();
        assert_eq!(e.correct.len(), 10);
        assert_eq!(e.logits.shape(), &[10, 10]);
        let mean = e.correct.iter().filter(|&&c| c).count() as f64 / 10.0;
        assert_eq!(e.accuracy, mean);
        assert!(evaluate(&net, &ds.select(&[]), 3).is_err());
    }

    #[test]
    fn evaluation_of_a_memorizer_is_perfect() {
        // Final layer bias dominates toward each sample's label: one class per sample needs
        // distinct samples, so use a dataset of one class and bias that class.
        let ds = crate::data::subset_by_class(&synthetic::dataset(100, 5, Split::Test), 7);
        let mut net = Network::<f32>::skeleton(Architecture::cifar(), FeedbackRule::Bp).unwrap();
        net.param_layers_mut().last().unwrap().bias.data_mut()[7] = 1.0;
        let e = evaluate(&net, &ds, 4).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert!(e.correct.iter().all(|&c| c));
    }

    #[test]
    fn grid_sizes_and_ranking() {
        assert_eq!(Grid::standard(FeedbackRule::Bp).configs(&quick(FeedbackRule::Bp)).len(), 6);
        assert_eq!(Grid::standard(FeedbackRule::UsfSn).configs(&quick(FeedbackRule::UsfSn)).len(), 4);
        assert_eq!(Grid::standard(FeedbackRule::FaRandom).configs(&quick(FeedbackRule::FaRandom)).len(), 9);
        let s = splits(32, 16);
        let empty = Grid { lrs: vec![], weight_decays: vec![0.0], sigmas: vec![None] };
        assert!(matches!(grid_search(&quick(FeedbackRule::Bp), &empty, &s, 1, 1), Err(Error::Config(_))));
        let single = Grid { lrs: vec![2e-3], weight_decays: vec![0.0], sigmas: vec![None] };
        let r = grid_search(&quick(FeedbackRule::Bp), &single, &s, 1, 1).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.best().lr, 2e-3);
        let two = Grid { lrs: vec![1e-3, 1e-2], weight_decays: vec![0.0], sigmas: vec![None] };
        let serial = grid_search(&quick(FeedbackRule::Bp), &two, &s, 1, 1).unwrap();
        let parallel = grid_search(&quick(FeedbackRule::Bp), &two, &s, 1, 2).unwrap();
        assert_eq!(serial, parallel);
        assert!(serial.ranked.windows(2).all(|w| w[0].val_acc >= w[1].val_acc));
    }
}
