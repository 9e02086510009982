//! Regularized objective and nonnegative multiplicative training.
//!
//! One epoch evaluates the prediction of every training entry once, gathers
//! per-parameter numerators `N` and denominators `D` over the entries touching
//! that parameter, and then rescales every parameter by `N / D` at the same
//! time. For a user factor `a[i, m, r]` the sums run over the training entries
//! of user `i`:
//!
//! ```text
//! N = sum y * b[j, m, r] * c[k, r]
//! D = sum (lambda * a[i, m, r] + y_hat * b[j, m, r] * c[k, r])
//! ```
//!
//! and the service, time and bias updates follow the same pattern over their
//! own slices. Every term is a sum of products of nonnegative numbers, so a
//! nonnegative model stays nonnegative.
//!
//! Each parameter's sums are taken over its slice in a fixed order, so the
//! result does not depend on how many worker threads are used.

use std::time::Instant;

use log::debug;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::DatasetSplit;
use crate::model::{EctnModel, ModelConfig, ModelError, ParamHandle};
use crate::tensor::{Dims, Entry, Mode, ModeIndex, ObservedTensor};

/// Entries per block when summing the objective; fixed so the reduction
/// order never depends on the worker count.
const LOSS_BLOCK: usize = 4096;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("model shape {model} does not match tensor shape {tensor}")]
    DimMismatch { model: Dims, tensor: Dims },
    #[error("training position {position} out of range for tensor with {len} entries")]
    BadPosition { position: usize, len: usize },
    #[error("duplicate training position {0}")]
    DuplicatePosition(usize),
    #[error("non-finite update for parameter {0:?}")]
    NonFiniteAccumulator(ParamHandle),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// L2 regularization coefficient.
    pub lambda: f64,
    pub max_epochs: usize,
    /// Training stops once successive objective values differ by less than this.
    pub tol: f64,
    /// Parameters whose denominator falls below this are left unchanged for the epoch.
    pub min_denominator: f64,
    /// Worker threads for the accumulation phase; 1 runs on the calling thread.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lambda: 0.4,
            max_epochs: 1000,
            tol: 1e-5,
            min_denominator: 1e-12,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        self.model.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SolverError::InvalidConfig(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(SolverError::InvalidConfig(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_epochs == 0 {
            return Err(SolverError::InvalidConfig("max_epochs must be at least 1".into()));
        }
        if self.min_denominator.is_nan() || self.min_denominator <= 0.0 {
            return Err(SolverError::InvalidConfig(format!(
                "min_denominator must be positive, got {}",
                self.min_denominator
            )));
        }
        if self.workers == 0 {
            return Err(SolverError::InvalidConfig("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    /// Training objective after each epoch.
    pub loss_trace: Vec<f64>,
    /// Objective of the freshly initialized model.
    pub initial_loss: f64,
    /// `true` when the tolerance rule stopped training, `false` when the epoch cap did.
    pub converged: bool,
    /// Mean wall time of one epoch (update plus objective), in seconds.
    pub wall_time_per_epoch: f64,
}

/// A subset of a tensor's entries with per-mode indexes restricted to it.
///
/// The mode indexes hold local indices into [`positions`](Self::positions).
/// Entries are also copied out in training order and in each mode's bucket
/// order, so every pass of an epoch reads memory sequentially.
#[derive(Debug, Clone)]
pub struct TrainingSet<'a> {
    tensor: &'a ObservedTensor,
    positions: Vec<usize>,
    entries: Vec<Entry>,
    by_user: ModeIndex,
    by_service: ModeIndex,
    by_time: ModeIndex,
    // (local index, entry) in bucket order, one vector per mode
    grouped: [Vec<(usize, Entry)>; 3],
}

impl<'a> TrainingSet<'a> {
    pub fn new(tensor: &'a ObservedTensor, positions: &[usize]) -> Result<Self, SolverError> {
        let len = tensor.len();
        let mut seen = vec![false; len];
        for &p in positions {
            if p >= len {
                return Err(SolverError::BadPosition { position: p, len });
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(SolverError::DuplicatePosition(p));
            }
        }
        let positions = positions.to_vec();
        let local: Vec<usize> = (0..positions.len()).collect();
        let dims = tensor.dims();
        let entry = |l: usize| tensor.entry(positions[l]);
        let by_user = ModeIndex::group(dims.users, &local, |l| entry(l).i);
        let by_service = ModeIndex::group(dims.services, &local, |l| entry(l).j);
        let by_time = ModeIndex::group(dims.times, &local, |l| entry(l).k);
        let entries: Vec<Entry> = positions.iter().map(|&p| *tensor.entry(p)).collect();
        let copy = |index: &ModeIndex| index.flat().iter().map(|&l| (l, entries[l])).collect();
        let grouped = [copy(&by_user), copy(&by_service), copy(&by_time)];
        Ok(TrainingSet {
            tensor,
            positions,
            entries,
            by_user,
            by_service,
            by_time,
            grouped,
        })
    }

    /// Every entry of `tensor`.
    pub fn full(tensor: &'a ObservedTensor) -> Self {
        let all: Vec<usize> = (0..tensor.len()).collect();
        Self::new(tensor, &all).expect("all positions are valid and distinct")
    }

    pub fn tensor(&self) -> &ObservedTensor {
        self.tensor
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of training entries in the given slice.
    pub fn slice_len(&self, mode: Mode, index: usize) -> usize {
        self.mode_index(mode).bucket(index).len()
    }

    fn mode_index(&self, mode: Mode) -> &ModeIndex {
        match mode {
            Mode::User => &self.by_user,
            Mode::Service => &self.by_service,
            Mode::Time => &self.by_time,
        }
    }

    #[inline]
    fn local(&self, l: usize) -> (usize, usize, usize, f64) {
        let e = &self.entries[l];
        (e.i, e.j, e.k, e.value)
    }

    /// Training entries of one slice with their local indices.
    #[inline]
    fn slice_entries(&self, mode: Mode, index: usize) -> &[(usize, Entry)] {
        let slot = match mode {
            Mode::User => 0,
            Mode::Service => 1,
            Mode::Time => 2,
        };
        &self.grouped[slot][self.mode_index(mode).range(index)]
    }

    fn check_model(&self, model: &EctnModel) -> Result<(), SolverError> {
        if model.dims() != self.tensor.dims() {
            return Err(SolverError::DimMismatch {
                model: model.dims(),
                tensor: self.tensor.dims(),
            });
        }
        Ok(())
    }
}

/// Runs `op` on a dedicated pool when more than one worker is requested.
fn with_workers<T: Send>(workers: usize, op: impl FnOnce() -> T + Send) -> T {
    if workers <= 1 {
        return op();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(op),
        Err(_) => op(),
    }
}

/// Applies `f` to every `width`-sized row of `buf`, in parallel when `parallel` is set.
fn for_rows<F>(buf: &mut [f64], width: usize, parallel: bool, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if parallel {
        buf.par_chunks_mut(width)
            .enumerate()
            .for_each(|(x, row)| f(x, row));
    } else {
        buf.chunks_mut(width).enumerate().for_each(|(x, row)| f(x, row));
    }
}

/// Numerators and denominators of the multiplicative update for every parameter.
///
/// Row layouts: users `[N_a (R·M) | D_a (R·M) | N_d | D_d]`, services likewise,
/// time slices `[N_c (R) | D_c (R) | N_f | D_f]`.
#[derive(Debug, Clone)]
pub struct Accumulators {
    rank: usize,
    expansion: usize,
    users: Vec<f64>,
    services: Vec<f64>,
    times: Vec<f64>,
}

impl Accumulators {
    fn slab_width(&self) -> usize {
        2 * self.rank * self.expansion + 2
    }

    fn time_width(&self) -> usize {
        2 * self.rank + 2
    }

    /// `(N, D)` for one parameter.
    pub fn terms(&self, handle: ParamHandle) -> (f64, f64) {
        let (rank, n) = (self.rank, self.rank * self.expansion);
        let (sw, tw) = (self.slab_width(), self.time_width());
        let pick = |buf: &[f64], row: usize, width: usize, num: usize, den: usize| {
            (buf[row * width + num], buf[row * width + den])
        };
        match handle {
            ParamHandle::A { i, m, r } => {
                let off = m * rank + r;
                pick(&self.users, i, sw, off, n + off)
            }
            ParamHandle::B { j, m, r } => {
                let off = m * rank + r;
                pick(&self.services, j, sw, off, n + off)
            }
            ParamHandle::C { k, r } => pick(&self.times, k, tw, r, rank + r),
            ParamHandle::D(i) => pick(&self.users, i, sw, 2 * n, 2 * n + 1),
            ParamHandle::E(j) => pick(&self.services, j, sw, 2 * n, 2 * n + 1),
            ParamHandle::F(k) => pick(&self.times, k, tw, 2 * rank, 2 * rank + 1),
        }
    }
}

/// Gathers the update terms for every parameter using the model's current
/// predictions on the training entries.
pub fn accumulate(
    model: &EctnModel,
    train: &TrainingSet<'_>,
    lambda: f64,
    workers: usize,
) -> Result<Accumulators, SolverError> {
    train.check_model(model)?;
    Ok(with_workers(workers, || {
        let parallel = workers > 1;
        let (_, preds) = loss_and_predictions(model, train, lambda, parallel);
        accumulate_inner(model, train, lambda, parallel, &preds)
    }))
}

fn accumulate_inner(
    model: &EctnModel,
    train: &TrainingSet<'_>,
    lambda: f64,
    parallel: bool,
    preds: &[f64],
) -> Accumulators {
    let dims = model.dims();
    let rank = model.rank();
    let n = rank * model.expansion();

    let slab_width = 2 * n + 2;
    let time_width = 2 * rank + 2;
    let mut users = vec![0.0; dims.users * slab_width];
    let mut services = vec![0.0; dims.services * slab_width];
    let mut times = vec![0.0; dims.times * time_width];

    // A and d over each user's entries.
    for_rows(&mut users, slab_width, parallel, |i, row| {
        let bucket = train.slice_entries(Mode::User, i);
        let (num, rest) = row.split_at_mut(n);
        let (den, bias) = rest.split_at_mut(n);
        for &(l, e) in bucket {
            let (j, k, y) = (e.j, e.k, e.value);
            let yhat = preds[l];
            let c = model.time_row(k);
            for ((bm, nm), dm) in model
                .service_slab(j)
                .chunks_exact(rank)
                .zip(num.chunks_exact_mut(rank))
                .zip(den.chunks_exact_mut(rank))
            {
                for r in 0..rank {
                    let bc = bm[r] * c[r];
                    nm[r] += y * bc;
                    dm[r] += yhat * bc;
                }
            }
            bias[0] += y;
            bias[1] += yhat;
        }
        let reg = lambda * bucket.len() as f64;
        for (dv, a) in den.iter_mut().zip(model.user_slab(i)) {
            *dv += reg * a;
        }
        bias[1] += reg * model.d()[i];
    });

    // B and e over each service's entries.
    for_rows(&mut services, slab_width, parallel, |j, row| {
        let bucket = train.slice_entries(Mode::Service, j);
        let (num, rest) = row.split_at_mut(n);
        let (den, bias) = rest.split_at_mut(n);
        for &(l, e) in bucket {
            let (i, k, y) = (e.i, e.k, e.value);
            let yhat = preds[l];
            let c = model.time_row(k);
            for ((am, nm), dm) in model
                .user_slab(i)
                .chunks_exact(rank)
                .zip(num.chunks_exact_mut(rank))
                .zip(den.chunks_exact_mut(rank))
            {
                for r in 0..rank {
                    let ac = am[r] * c[r];
                    nm[r] += y * ac;
                    dm[r] += yhat * ac;
                }
            }
            bias[0] += y;
            bias[1] += yhat;
        }
        let reg = lambda * bucket.len() as f64;
        for (dv, b) in den.iter_mut().zip(model.service_slab(j)) {
            *dv += reg * b;
        }
        bias[1] += reg * model.e()[j];
    });

    // C and f over each time slice's entries.
    for_rows(&mut times, time_width, parallel, |k, row| {
        let bucket = train.slice_entries(Mode::Time, k);
        let mut z = model.scratch();
        let (num, rest) = row.split_at_mut(rank);
        let (den, bias) = rest.split_at_mut(rank);
        for &(l, e) in bucket {
            let (i, j, y) = (e.i, e.j, e.value);
            let yhat = preds[l];
            model.fill_z(i, j, &mut z);
            for r in 0..rank {
                num[r] += y * z[r];
                den[r] += yhat * z[r];
            }
            bias[0] += y;
            bias[1] += yhat;
        }
        let reg = lambda * bucket.len() as f64;
        for (dv, c) in den.iter_mut().zip(model.time_row(k)) {
            *dv += reg * c;
        }
        bias[1] += reg * model.f()[k];
    });

    Accumulators {
        rank,
        expansion: model.expansion(),
        users,
        services,
        times,
    }
}

fn rescale(
    theta: f64,
    num: f64,
    den: f64,
    min_denominator: f64,
    handle: impl FnOnce() -> ParamHandle,
) -> Result<f64, SolverError> {
    if !(num.is_finite() && den.is_finite()) {
        return Err(SolverError::NonFiniteAccumulator(handle()));
    }
    if den < min_denominator {
        return Ok(theta);
    }
    let next = theta * (num / den);
    if !next.is_finite() {
        return Err(SolverError::NonFiniteAccumulator(handle()));
    }
    Ok(next)
}

/// Rescales every parameter of `model` by its accumulated `N / D`.
pub fn apply(
    model: &EctnModel,
    acc: &Accumulators,
    min_denominator: f64,
) -> Result<EctnModel, SolverError> {
    let rank = model.rank();
    let exp = model.expansion();
    let n = rank * exp;
    let (sw, tw) = (acc.slab_width(), acc.time_width());

    let update_slab = |params: &[f64],
                       rows: &[f64],
                       mk: fn(usize, usize, usize) -> ParamHandle|
     -> Result<Vec<f64>, SolverError> {
        params
            .iter()
            .enumerate()
            .map(|(idx, &theta)| {
                let (ent, off) = (idx / n, idx % n);
                let row = &rows[ent * sw..(ent + 1) * sw];
                rescale(theta, row[off], row[n + off], min_denominator, || {
                    mk(ent, off / rank, off % rank)
                })
            })
            .collect()
    };
    let update_bias = |params: &[f64],
                       rows: &[f64],
                       width: usize,
                       mk: fn(usize) -> ParamHandle|
     -> Result<Vec<f64>, SolverError> {
        params
            .iter()
            .enumerate()
            .map(|(x, &theta)| {
                let row = &rows[x * width..(x + 1) * width];
                rescale(theta, row[width - 2], row[width - 1], min_denominator, || mk(x))
            })
            .collect()
    };

    let a = update_slab(model.a(), &acc.users, |i, m, r| ParamHandle::A { i, m, r })?;
    let b = update_slab(model.b(), &acc.services, |j, m, r| ParamHandle::B { j, m, r })?;
    let c = model
        .c()
        .iter()
        .enumerate()
        .map(|(idx, &theta)| {
            let (k, r) = (idx / rank, idx % rank);
            let row = &acc.times[k * tw..(k + 1) * tw];
            rescale(theta, row[r], row[rank + r], min_denominator, || {
                ParamHandle::C { k, r }
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let d = update_bias(model.d(), &acc.users, sw, ParamHandle::D)?;
    let e = update_bias(model.e(), &acc.services, sw, ParamHandle::E)?;
    let f = update_bias(model.f(), &acc.times, tw, ParamHandle::F)?;
    Ok(EctnModel::from_raw(model, a, b, c, d, e, f))
}

/// One full multiplicative sweep: accumulate with the current model, then
/// apply all updates simultaneously.
pub fn epoch_update(
    model: &EctnModel,
    train: &TrainingSet<'_>,
    lambda: f64,
    min_denominator: f64,
    workers: usize,
) -> Result<EctnModel, SolverError> {
    let acc = accumulate(model, train, lambda, workers)?;
    apply(model, &acc, min_denominator)
}

/// Squared residual plus the per-entry L2 penalty, summed over the training set.
pub fn objective(model: &EctnModel, train: &TrainingSet<'_>, lambda: f64) -> Result<f64, SolverError> {
    train.check_model(model)?;
    Ok(loss_and_predictions(model, train, lambda, false).0)
}

/// Training objective together with the prediction for every training entry.
fn loss_and_predictions(model: &EctnModel, train: &TrainingSet<'_>, lambda: f64, parallel: bool) -> (f64, Vec<f64>) {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let dims = model.dims();
    let rank = model.rank();
    let user_pen: Vec<f64> = (0..dims.users)
        .map(|i| sq(model.user_slab(i)) + model.d()[i] * model.d()[i])
        .collect();
    let service_pen: Vec<f64> = (0..dims.services)
        .map(|j| sq(model.service_slab(j)) + model.e()[j] * model.e()[j])
        .collect();
    let time_pen: Vec<f64> = (0..dims.times)
        .map(|k| sq(&model.c()[k * rank..(k + 1) * rank]) + model.f()[k] * model.f()[k])
        .collect();

    let block = |b: usize, out: &mut [f64]| -> f64 {
        let mut z = model.scratch();
        let mut total = 0.0;
        for (off, slot) in out.iter_mut().enumerate() {
            let (i, j, k, y) = train.local(b * LOSS_BLOCK + off);
            *slot = model.predict_with(i, j, k, &mut z);
            let res = y - *slot;
            total += res * res + lambda * (user_pen[i] + service_pen[j] + time_pen[k]);
        }
        total
    };
    let mut preds = vec![0.0; train.len()];
    let partial: Vec<f64> = if parallel {
        preds
            .par_chunks_mut(LOSS_BLOCK)
            .enumerate()
            .map(|(b, out)| block(b, out))
            .collect()
    } else {
        preds
            .chunks_mut(LOSS_BLOCK)
            .enumerate()
            .map(|(b, out)| block(b, out))
            .collect()
    };
    (partial.iter().sum(), preds)
}

/// Central finite difference of the objective with respect to one parameter.
pub fn gradient_fd(
    model: &EctnModel,
    train: &TrainingSet<'_>,
    lambda: f64,
    handle: ParamHandle,
    h: f64,
) -> Result<f64, SolverError> {
    let theta = model.get(handle)?;
    let mut probe = model.clone();
    probe.set_unchecked(handle, theta + h)?;
    let up = objective(&probe, train, lambda)?;
    probe.set_unchecked(handle, theta - h)?;
    let down = objective(&probe, train, lambda)?;
    Ok((up - down) / (2.0 * h))
}

/// Trains on the split's training positions.
pub fn train(
    tensor: &ObservedTensor,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(EctnModel, TrainReport), SolverError> {
    train_on(tensor, &split.train, cfg)
}

/// Initializes a model and runs epochs until the objective settles or the
/// epoch cap is reached.
pub fn train_on(
    tensor: &ObservedTensor,
    positions: &[usize],
    cfg: &TrainConfig,
) -> Result<(EctnModel, TrainReport), SolverError> {
    cfg.validate()?;
    if positions.is_empty() {
        return Err(SolverError::EmptyTrainSet);
    }
    let set = TrainingSet::new(tensor, positions)?;
    let model = EctnModel::init_random(tensor.dims(), &cfg.model)?;
    fit(model, &set, cfg)
}

/// Runs the training loop from a given starting model.
pub fn fit(
    mut model: EctnModel,
    train: &TrainingSet<'_>,
    cfg: &TrainConfig,
) -> Result<(EctnModel, TrainReport), SolverError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SolverError::EmptyTrainSet);
    }
    train.check_model(&model)?;
    let parallel = cfg.workers > 1;
    let run = move || -> Result<(EctnModel, TrainReport), SolverError> {
        let (initial_loss, mut preds) = loss_and_predictions(&model, train, cfg.lambda, parallel);
        let mut previous = initial_loss;
        let mut trace = Vec::with_capacity(cfg.max_epochs.min(4096));
        let mut converged = false;
        let started = Instant::now();
        while trace.len() < cfg.max_epochs {
            let acc = accumulate_inner(&model, train, cfg.lambda, parallel, &preds);
            model = apply(&model, &acc, cfg.min_denominator)?;
            let loss;
            (loss, preds) = loss_and_predictions(&model, train, cfg.lambda, parallel);
            trace.push(loss);
            debug!("epoch {} loss {loss:.6e}", trace.len());
            if (previous - loss).abs() < cfg.tol {
                converged = true;
                break;
            }
            previous = loss;
        }
        let epochs_run = trace.len();
        let report = TrainReport {
            epochs_run,
            loss_trace: trace,
            initial_loss,
            converged,
            wall_time_per_epoch: started.elapsed().as_secs_f64() / epochs_run as f64,
        };
        Ok((model, report))
    };
    with_workers(cfg.workers, run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Entry;

    fn one_entry_setup() -> (ObservedTensor, EctnModel) {
        let t = ObservedTensor::build(Dims::new(1, 1, 1), vec![Entry::new(0, 0, 0, 2.0)]).unwrap();
        let mut m = EctnModel::zeros(Dims::new(1, 1, 1), 1, 1).unwrap();
        m.set(ParamHandle::A { i: 0, m: 0, r: 0 }, 1.0).unwrap();
        m.set(ParamHandle::B { j: 0, m: 0, r: 0 }, 1.0).unwrap();
        m.set(ParamHandle::C { k: 0, r: 0 }, 1.0).unwrap();
        (t, m)
    }

    #[test]
    fn objective_simple_cases() {
        let t = ObservedTensor::build(Dims::new(1, 1, 1), vec![Entry::new(0, 0, 0, 2.0)]).unwrap();
        let m = EctnModel::zeros(Dims::new(1, 1, 1), 1, 1).unwrap();
        let set = TrainingSet::full(&t);
        assert_eq!(objective(&m, &set, 0.0).unwrap(), 4.0);

        let (t, m) = one_entry_setup();
        let set = TrainingSet::full(&t);
        // residual 1, penalty lambda * (1 + 1 + 1)
        assert_eq!(objective(&m, &set, 0.5).unwrap(), 1.0 + 1.5);
    }

    #[test]
    fn single_entry_hand_update() {
        let (t, m) = one_entry_setup();
        let set = TrainingSet::full(&t);
        let acc = accumulate(&m, &set, 0.0, 1).unwrap();
        assert_eq!(acc.terms(ParamHandle::A { i: 0, m: 0, r: 0 }), (2.0, 1.0));
        assert_eq!(acc.terms(ParamHandle::C { k: 0, r: 0 }), (2.0, 1.0));
        assert_eq!(acc.terms(ParamHandle::D(0)), (2.0, 1.0));
        let next = apply(&m, &acc, 1e-12).unwrap();
        assert_eq!(next.a(), &[2.0]);
        assert_eq!(next.b(), &[2.0]);
        assert_eq!(next.c(), &[2.0]);
        // ratio for the biases is 2 as well, but they start at zero
        assert_eq!(next.d(), &[0.0]);
        assert_eq!(next.e(), &[0.0]);
        assert_eq!(next.f(), &[0.0]);
    }

    #[test]
    fn hand_gradient() {
        let (t, m) = one_entry_setup();
        let set = TrainingSet::full(&t);
        let g = gradient_fd(&m, &set, 0.0, ParamHandle::A { i: 0, m: 0, r: 0 }, 1e-5).unwrap();
        assert!((g - -2.0).abs() < 1e-4);
    }

    #[test]
    fn unobserved_entities_are_frozen() {
        let dims = Dims::new(3, 2, 2);
        let t = ObservedTensor::build(dims, vec![Entry::new(0, 0, 0, 1.0), Entry::new(1, 1, 1, 3.0)]).unwrap();
        let m = EctnModel::init_random(dims, &ModelConfig { rank: 2, expansion: 2, init_scale: 0.5, seed: 1 }).unwrap();
        let set = TrainingSet::full(&t);
        let next = epoch_update(&m, &set, 0.4, 1e-12, 1).unwrap();
        for mm in 0..2 {
            for r in 0..2 {
                let h = ParamHandle::A { i: 2, m: mm, r };
                assert_eq!(next.get(h).unwrap(), m.get(h).unwrap());
            }
        }
        assert_eq!(next.d()[2], m.d()[2]);
        assert_ne!(next.d()[0], m.d()[0]);
    }

    #[test]
    fn regularization_pulls_zero_signal_to_zero() {
        // y = 0 means every numerator is zero.
        let dims = Dims::new(2, 2, 1);
        let t = ObservedTensor::build(dims, vec![Entry::new(0, 0, 0, 0.0), Entry::new(1, 1, 0, 0.0)]).unwrap();
        let m = EctnModel::init_random(dims, &ModelConfig { rank: 1, expansion: 1, init_scale: 1.0, seed: 4 }).unwrap();
        let next = epoch_update(&m, &TrainingSet::full(&t), 0.4, 1e-12, 1).unwrap();
        assert!(next.values().all(|v| v == 0.0));
    }

    #[test]
    fn dim_mismatch_and_bad_positions() {
        let t = ObservedTensor::build(Dims::new(2, 2, 2), vec![Entry::new(0, 0, 0, 1.0)]).unwrap();
        let m = EctnModel::zeros(Dims::new(3, 2, 2), 1, 1).unwrap();
        let set = TrainingSet::full(&t);
        assert!(matches!(objective(&m, &set, 0.0), Err(SolverError::DimMismatch { .. })));
        assert!(matches!(
            epoch_update(&m, &set, 0.0, 1e-12, 1),
            Err(SolverError::DimMismatch { .. })
        ));
        assert!(matches!(TrainingSet::new(&t, &[1]), Err(SolverError::BadPosition { .. })));
        assert!(matches!(TrainingSet::new(&t, &[0, 0]), Err(SolverError::DuplicatePosition(0))));
        assert!(matches!(
            train_on(&t, &[], &TrainConfig::default()),
            Err(SolverError::EmptyTrainSet)
        ));
    }

    #[test]
    fn overflow_is_reported() {
        let t = ObservedTensor::build(Dims::new(1, 1, 1), vec![Entry::new(0, 0, 0, f64::MAX)]).unwrap();
        let mut m = EctnModel::zeros(Dims::new(1, 1, 1), 1, 1).unwrap();
        for h in m.handles() {
            m.set(h, 1e300).unwrap();
        }
        let err = epoch_update(&m, &TrainingSet::full(&t), 0.0, 1e-12, 1).unwrap_err();
        assert!(matches!(err, SolverError::NonFiniteAccumulator(_)));
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { lambda: -1.0, ..TrainConfig::default() },
            TrainConfig { tol: 0.0, ..TrainConfig::default() },
            TrainConfig { max_epochs: 0, ..TrainConfig::default() },
            TrainConfig { min_denominator: 0.0, ..TrainConfig::default() },
            TrainConfig { workers: 0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!(TrainConfig::default().validate().is_ok());
    }
}
