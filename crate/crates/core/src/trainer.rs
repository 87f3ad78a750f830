//! The training loop: periodic clustering, label-frame matching, confident
//! set selection, mini-batch losses and head updates, with per-epoch
//! metrics.

use std::fs;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    cosine_kmeans_restarts, estimate_k, select_top_alpha, ClusterState, ConfidentSet,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::data::{augment, GcdDataset};
use crate::error::{Error, Result};
use crate::etf::{build_etf, nearest_prototype, EtfPrototypeSet};
use crate::evaluation::{flip_rate, gcd_accuracy, nc_metrics, GcdAccuracy, NcMetrics};
use crate::head::{backward, embed, forward, init_head, sgd_step, HeadParams};
use crate::losses::{
    etf_combined, etf_sup_loss, etf_unsup_loss, info_nce_unsup, rep_combined, supcon,
    total_loss, LossValue,
};
use crate::numerics::{EmbeddingBatch, Matrix, SeededRng};
use crate::scm::{
    contingency, map_supervised_labels, match_iterations, solve_assignment, PermutationMap,
};

// Substream ids under the run seed.
const STREAM_HEAD: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_ESTIMATE: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_REFRESH_BASE: u64 = 1 << 32;

fn derived_seed(seed: u64, stream: u64) -> u64 {
    SeededRng::substream(seed, stream).next_u64()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    #[serde(rename = "T_cluster")]
    pub t_cluster: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Number of clusters and prototypes; estimated from the data when absent.
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub use_sup_etf: bool,
    pub use_unsup_etf: bool,
    pub use_scm: bool,
    /// Whether labeled samples can be confident-set members.
    pub unsup_includes_labeled: bool,
    pub hidden_dim: usize,
    /// Output dimension; defaults to `max(d_in, K)`.
    pub out_dim: Option<usize>,
    /// Standard deviation of the feature-space augmentation.
    pub aug_sigma: f64,
    pub kmeans_restarts: usize,
    /// Search range when `K` is estimated.
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 1.0,
            gamma: 0.35,
            lambda: 0.35,
            tau: 0.07,
            t_cluster: 2,
            epochs: 50,
            batch_size: 128,
            lr: 0.1,
            weight_decay: 1e-4,
            seed: 0,
            k: None,
            use_sup_etf: true,
            use_unsup_etf: true,
            use_scm: true,
            unsup_includes_labeled: true,
            hidden_dim: 128,
            out_dim: None,
            aug_sigma: 0.1,
            kmeans_restarts: 5,
            k_min: 2,
            k_max: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        for (name, w) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("{name} must lie in [0, 1], got {w}"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", self.tau));
        }
        if self.t_cluster == 0 {
            return bad("T_cluster must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.k.is_some_and(|k| k < 2) {
            return bad(format!("K must be at least 2, got {}", self.k.unwrap()));
        }
        if self.hidden_dim == 0 || self.out_dim == Some(0) {
            return bad("head dimensions must be positive".into());
        }
        if !(self.aug_sigma >= 0.0 && self.aug_sigma.is_finite()) {
            return bad(format!("aug_sigma must be >= 0, got {}", self.aug_sigma));
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be at least 1".into());
        }
        if self.k_min < 2 || self.k_max < self.k_min {
            return bad(format!("invalid K range [{}, {}]", self.k_min, self.k_max));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Fill in `K` (estimating it if needed) and the output dimension.
    pub fn resolve(&self, data: &GcdDataset) -> Result<TrainConfig> {
        self.validate()?;
        let mut out = self.clone();
        let k = match self.k {
            Some(k) => k,
            None => {
                let k_max = self.k_max.min(data.len());
                let rng = SeededRng::substream(self.seed, STREAM_ESTIMATE);
                estimate_k(&data.features, self.k_min.min(k_max), k_max, &rng)?
            }
        };
        out.k = Some(k);
        out.out_dim = Some(self.out_dim.unwrap_or(data.features.cols().max(k)));
        if out.out_dim.unwrap() < k {
            return Err(Error::Config(format!(
                "out_dim {} is smaller than K = {k}",
                out.out_dim.unwrap()
            )));
        }
        Ok(out)
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub loss_total: Option<f64>,
    pub loss_etf_u: Option<f64>,
    pub loss_etf_s: Option<f64>,
    pub loss_rep_u: Option<f64>,
    pub loss_rep_s: Option<f64>,
    pub acc_all: Option<f64>,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
    /// Set on epochs that started with a clustering refresh other than the first.
    pub flip_rate: Option<f64>,
    pub nc1_ratio: Option<f64>,
    pub nc3_self_duality: Option<f64>,
}

pub const METRICS_HEADER: [&str; 12] = [
    "epoch",
    "loss_total",
    "loss_etf_u",
    "loss_etf_s",
    "loss_rep_u",
    "loss_rep_s",
    "acc_all",
    "acc_old",
    "acc_new",
    "flip_rate",
    "nc1_ratio",
    "nc3_self_duality",
];

impl MetricsRecord {
    fn fields(&self) -> Vec<String> {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.epoch.to_string(),
            f(self.loss_total),
            f(self.loss_etf_u),
            f(self.loss_etf_s),
            f(self.loss_rep_u),
            f(self.loss_rep_s),
            f(self.acc_all),
            f(self.acc_old),
            f(self.acc_new),
            f(self.flip_rate),
            f(self.nc1_ratio),
            f(self.nc3_self_duality),
        ]
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for r in records {
        w.write_record(r.fields()).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

/// What a clustering refresh changed.
#[derive(Debug, Clone, PartialEq)]
pub struct RefreshReport {
    pub iteration: usize,
    /// Label changes relative to the previous refresh, in the frame the
    /// labels are used in.
    pub flip_rate: Option<f64>,
    /// Matching applied to bring the new clustering into the stable frame.
    pub sigma: PermutationMap,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub head: HeadParams,
    pub etf: EtfPrototypeSet,
    pub cluster: Option<ClusterState>,
    pub confident: Option<ConfidentSet>,
    /// Matching applied at every refresh; identity at the first.
    pub label_frames: Vec<PermutationMap>,
    /// Known class (by position in the sorted known list) -> prototype.
    pub sigma_l: Option<PermutationMap>,
    pub epoch: usize,
    pub metrics: Vec<MetricsRecord>,
    shuffle_rng: SeededRng,
    augment_rng: SeededRng,
}

impl TrainState {
    /// Build the head and prototypes for a resolved configuration.
    pub fn new(config: &TrainConfig, data: &GcdDataset) -> Result<Self> {
        let config = config.resolve(data)?;
        let k = config.k.expect("resolved");
        let d_out = config.out_dim.expect("resolved");
        let etf = build_etf(d_out, k, config.seed)?;
        let head = init_head(
            data.features.cols(),
            config.hidden_dim,
            d_out,
            &mut SeededRng::substream(config.seed, STREAM_HEAD),
        )?;
        Ok(Self {
            shuffle_rng: SeededRng::substream(config.seed, STREAM_SHUFFLE),
            augment_rng: SeededRng::substream(config.seed, STREAM_AUGMENT),
            config,
            head,
            etf,
            cluster: None,
            confident: None,
            label_frames: Vec::new(),
            sigma_l: None,
            epoch: 0,
            metrics: Vec::new(),
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.etf.num_classes()
    }

    /// Per-sample confident-set targets, in prototype indices.
    pub fn unsup_targets(&self, data: &GcdDataset) -> Vec<Option<usize>> {
        let mut targets = vec![None; data.len()];
        if let (Some(cluster), Some(confident)) = (&self.cluster, &self.confident) {
            for &i in confident.members.iter().flatten() {
                if self.config.unsup_includes_labeled || !data.labeled_mask[i] {
                    targets[i] = Some(cluster.assignments[i]);
                }
            }
        }
        targets
    }

    /// Per-sample supervised prototype targets `σ^l(y)`.
    pub fn sup_targets(&self, data: &GcdDataset) -> Vec<Option<usize>> {
        (0..data.len())
            .map(|i| {
                let y = data.visible_label(i)?;
                self.sigma_l.as_ref()?.get(data.known_index(y)?)
            })
            .collect()
    }
}

/// Embed every sample, cluster, move the labels into the stable frame,
/// remap the supervised labels and rebuild the confident set.
pub fn cluster_refresh(state: &mut TrainState, data: &GcdDataset) -> Result<RefreshReport> {
    let k = state.num_clusters();
    let iteration = state.cluster.as_ref().map_or(0, |c| c.iteration + 1);
    let e = embed(&state.head, &data.features)?;
    let seed = derived_seed(state.config.seed, STREAM_REFRESH_BASE + iteration as u64);
    let mut fresh = cosine_kmeans_restarts(
        &e,
        k,
        seed,
        state.config.kmeans_restarts,
        DEFAULT_MAX_ITER,
        DEFAULT_TOL,
    )?;
    fresh.iteration = iteration;

    let (sigma, flips) = match &state.cluster {
        None => (PermutationMap::identity(k), None),
        Some(prev) => {
            let sigma = if state.config.use_scm {
                match_iterations(&fresh.assignments, &prev.assignments, k)?.0
            } else {
                PermutationMap::identity(k)
            };
            let dense = sigma.to_dense().expect("square matching");
            fresh = fresh.relabel(&dense);
            let flips = flip_rate(&prev.assignments, &fresh.assignments)?;
            (sigma, Some(flips))
        }
    };

    let labeled = data.labeled_indices();
    let pred: Vec<usize> = labeled.iter().map(|&i| fresh.assignments[i]).collect();
    let gt: Vec<usize> = labeled
        .iter()
        .map(|&i| data.known_index(data.gt_labels[i]).expect("labeled samples are known"))
        .collect();
    state.sigma_l = Some(map_supervised_labels(&pred, &gt, k, data.known_classes.len())?);
    state.confident = Some(select_top_alpha(&fresh, state.config.alpha)?);
    state.cluster = Some(fresh);
    state.label_frames.push(sigma.clone());
    Ok(RefreshReport {
        iteration,
        flip_rate: flips,
        sigma,
    })
}

/// Component losses of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLosses {
    pub total: f64,
    pub etf_u: f64,
    pub etf_s: f64,
    pub rep_u: f64,
    pub rep_s: f64,
}

fn check_finite(loss: &LossValue, epoch: usize, batch: usize, component: &'static str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            batch,
            component,
        })
    }
}

/// Losses and head gradient step for one mini-batch of sample indices.
fn train_batch(
    state: &mut TrainState,
    data: &GcdDataset,
    batch: &[usize],
    targets_u: &[Option<usize>],
    targets_s: &[Option<usize>],
    batch_no: usize,
) -> Result<BatchLosses> {
    let cfg = state.config.clone();
    let epoch = state.epoch;
    let x = data.features.select_rows(batch);
    let va = augment(&x, cfg.aug_sigma, &mut state.augment_rng)?;
    let vb = augment(&x, cfg.aug_sigma, &mut state.augment_rng)?;
    let (z, cache) = forward(&state.head, &va.vstack(&vb)?)?;
    let b = batch.len();
    let (rows, cols) = z.shape();
    let twice = |t: &[Option<usize>]| -> Vec<Option<usize>> {
        batch.iter().chain(batch).map(|&i| t[i]).collect()
    };

    let etf_u = if cfg.use_unsup_etf {
        etf_unsup_loss(&z, &twice(targets_u), &state.etf)?
    } else {
        LossValue::zero(rows, cols)
    };
    let sup = twice(targets_s);
    let etf_s = if cfg.use_sup_etf && sup.iter().any(Option::is_some) {
        etf_sup_loss(&z, &sup, &state.etf)?
    } else {
        LossValue::zero(rows, cols)
    };
    let za = z.select_rows(&(0..b).collect::<Vec<_>>());
    let zb = z.select_rows(&(b..2 * b).collect::<Vec<_>>());
    let rep_u = info_nce_unsup(&za, &zb, cfg.tau)?;
    let visible: Vec<Option<usize>> = batch.iter().chain(batch).map(|&i| data.visible_label(i)).collect();
    let rep_s = supcon(&z, &visible, cfg.tau)?;
    for (loss, name) in [
        (&etf_u, "etf_unsup"),
        (&etf_s, "etf_sup"),
        (&rep_u, "rep_unsup"),
        (&rep_s, "rep_sup"),
    ] {
        check_finite(loss, epoch, batch_no, name)?;
    }

    let etf = etf_combined(&etf_u, &etf_s, cfg.gamma)?;
    let rep = rep_combined(&rep_u, &rep_s, cfg.lambda)?;
    let total = total_loss(&etf, &rep, cfg.beta)?;
    check_finite(&total, epoch, batch_no, "total")?;
    let (grads, _) = backward(&state.head, &cache, &total.grad)?;
    sgd_step(&mut state.head, &grads, cfg.lr, cfg.weight_decay)?;
    Ok(BatchLosses {
        total: total.value,
        etf_u: etf_u.value,
        etf_s: etf_s.value,
        rep_u: rep_u.value,
        rep_s: rep_s.value,
    })
}

/// Shuffled mini-batches; a trailing batch of one sample joins the previous one.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().unwrap().len() < 2 {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Run one epoch (refreshing first when scheduled) and evaluate.
pub fn epoch_step(state: &mut TrainState, data: &GcdDataset) -> Result<MetricsRecord> {
    let mut flips = None;
    if state.epoch.is_multiple_of(state.config.t_cluster) || state.cluster.is_none() {
        flips = cluster_refresh(state, data)?.flip_rate;
    }
    let targets_u = state.unsup_targets(data);
    let targets_s = state.sup_targets(data);

    let mut order: Vec<usize> = (0..data.len()).collect();
    state.shuffle_rng.shuffle(&mut order);
    let mut sums = [0.0; 5];
    let parts = batches(&order, state.config.batch_size);
    for (n, batch) in parts.iter().enumerate() {
        let l = train_batch(state, data, batch, &targets_u, &targets_s, n)?;
        for (s, v) in sums.iter_mut().zip([l.total, l.etf_u, l.etf_s, l.rep_u, l.rep_s]) {
            *s += v;
        }
    }
    let mean = |i: usize| Some(sums[i] / parts.len() as f64);

    let report = evaluate(
        &state.head,
        &state.etf,
        data,
        derived_seed(state.config.seed, STREAM_EVAL),
        state.config.kmeans_restarts,
    )?;
    let record = MetricsRecord {
        epoch: state.epoch,
        loss_total: mean(0),
        loss_etf_u: mean(1),
        loss_etf_s: mean(2),
        loss_rep_u: mean(3),
        loss_rep_s: mean(4),
        acc_all: Some(report.accuracy.all),
        acc_old: Some(report.accuracy.old),
        acc_new: Some(report.accuracy.new),
        flip_rate: flips,
        nc1_ratio: report.nc.as_ref().map(|m| m.nc1_ratio),
        nc3_self_duality: report.nc.as_ref().map(|m| m.nc3_self_duality),
    };
    state.metrics.push(record.clone());
    state.epoch += 1;
    Ok(record)
}

/// Full training run.
pub fn train(config: &TrainConfig, data: &GcdDataset) -> Result<TrainState> {
    train_with(config, data, |_| {})
}

/// Full training run, reporting each epoch's record as it is produced.
pub fn train_with(
    config: &TrainConfig,
    data: &GcdDataset,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainState> {
    let mut state = TrainState::new(config, data)?;
    while state.epoch < state.config.epochs {
        let record = epoch_step(&mut state, data)?;
        on_epoch(&record);
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Measured on the unlabeled samples.
    pub accuracy: GcdAccuracy,
    /// `None` when some prototype is not matched to a class with samples.
    pub nc: Option<NcMetrics>,
    /// Cluster of every sample.
    pub assignments: Vec<usize>,
}

/// Cluster the embedded data at `K = prototypes` and score it.
///
/// NC metrics pair each class with the prototype that the most of its
/// samples are nearest to, under a one-to-one matching.
pub fn evaluate(
    head: &HeadParams,
    etf: &EtfPrototypeSet,
    data: &GcdDataset,
    seed: u64,
    restarts: usize,
) -> Result<EvalReport> {
    let e = embed(head, &data.features)?;
    evaluate_embeddings(&e, etf, data, seed, restarts)
}

pub fn evaluate_embeddings(
    e: &EmbeddingBatch,
    etf: &EtfPrototypeSet,
    data: &GcdDataset,
    seed: u64,
    restarts: usize,
) -> Result<EvalReport> {
    let k = etf.num_classes();
    let state = cosine_kmeans_restarts(e, k, seed, restarts, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let unlabeled = data.unlabeled_indices();
    let accuracy = if unlabeled.is_empty() {
        gcd_accuracy(&state.assignments, &data.gt_labels, &data.known_classes)?
    } else {
        let pred: Vec<usize> = unlabeled.iter().map(|&i| state.assignments[i]).collect();
        let gt: Vec<usize> = unlabeled.iter().map(|&i| data.gt_labels[i]).collect();
        gcd_accuracy(&pred, &gt, &data.known_classes)?
    };
    Ok(EvalReport {
        accuracy,
        nc: collapse_metrics(e, etf, data)?,
        assignments: state.assignments,
    })
}

fn collapse_metrics(
    e: &EmbeddingBatch,
    etf: &EtfPrototypeSet,
    data: &GcdDataset,
) -> Result<Option<NcMetrics>> {
    let k = etf.num_classes();
    let classes: Vec<usize> = data.known_classes.iter().chain(&data.novel_classes).copied().collect();
    let mut sorted = classes.clone();
    sorted.sort_unstable();
    if sorted.len() != k {
        return Ok(None);
    }
    let class_index: Vec<usize> = data
        .gt_labels
        .iter()
        .map(|y| sorted.binary_search(y).expect("validated class"))
        .collect();
    let nearest = e
        .row_iter()
        .map(|r| nearest_prototype(r, etf))
        .collect::<Result<Vec<_>>>()?;
    let matching = solve_assignment(&contingency(&class_index, &nearest, k, k)?);
    let dense = matching.to_dense().expect("square matching");
    let labels: Vec<usize> = class_index.iter().map(|&c| dense[c]).collect();
    match nc_metrics(e, &labels, etf) {
        Ok(m) => Ok(Some(m)),
        Err(Error::DegenerateClass { .. } | Error::DegenerateInput(_)) => Ok(None),
        Err(other) => Err(other),
    }
}

/// Embeddings of a frozen head, e.g. for checkpoint evaluation.
pub fn embed_dataset(head: &HeadParams, data: &GcdDataset) -> Result<Matrix> {
    embed(head, &data.features)
}
