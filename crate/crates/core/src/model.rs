//! ECTN parameterization.
//!
//! Each rank component `r` pairs an `|I| × M` user slab `A_r` and a `|J| × M`
//! service slab `B_r` with a time column `c_r`. The core prediction is
//!
//! ```text
//! core(i, j, k) = sum_r c[k, r] * z[i, j, r],   z[i, j, r] = sum_m a[i, m, r] * b[j, m, r]
//! ```
//!
//! and the full prediction adds the user, service and time biases
//! `d[i] + e[j] + f[k]`. With `M = 1` the model is exactly a biased CP model.

use std::io::{self, Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Dims;

const MAGIC: &[u8; 8] = b"ECTNMDL1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("index ({i}, {j}, {k}) out of range for model of shape {dims}")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        k: usize,
        dims: Dims,
    },
    #[error("rank index {r} out of range (rank {rank})")]
    RankOutOfRange { r: usize, rank: usize },
    #[error("parameter {0:?} out of range")]
    ParamOutOfRange(ParamHandle),
    #[error("parameter {handle:?} must be finite and nonnegative, got {value}")]
    InvalidValue { handle: ParamHandle, value: f64 },
    #[error("biased CP comparison needs expansion 1, model has {0}")]
    ExpansionNotOne(usize),
    #[error("{0}")]
    Shape(String),
    #[error("malformed model dump: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Shape and initialization settings of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub rank: usize,
    pub expansion: usize,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            rank: 5,
            expansion: 5,
            init_scale: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.rank == 0 {
            return Err(ModelError::InvalidConfig("rank must be at least 1".into()));
        }
        if self.expansion == 0 {
            return Err(ModelError::InvalidConfig("expansion must be at least 1".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "init_scale must be positive and finite, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }
}

/// Addresses a single scalar parameter of an [`EctnModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamHandle {
    A { i: usize, m: usize, r: usize },
    B { j: usize, m: usize, r: usize },
    C { k: usize, r: usize },
    D(usize),
    E(usize),
    F(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EctnModel {
    dims: Dims,
    rank: usize,
    expansion: usize,
    // (entity, m, r) with r fastest
    a: Vec<f64>,
    b: Vec<f64>,
    // (k, r)
    c: Vec<f64>,
    d: Vec<f64>,
    e: Vec<f64>,
    f: Vec<f64>,
}

impl EctnModel {
    /// Draws every parameter independently from `(0, init_scale]`.
    pub fn init_random(dims: Dims, cfg: &ModelConfig) -> Result<Self, ModelError> {
        if !dims.is_valid() {
            return Err(ModelError::InvalidConfig(format!(
                "dimensions must be positive, got {dims}"
            )));
        }
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = cfg.init_scale;
        let mut draw = |n: usize| -> Vec<f64> {
            // random::<f64>() is in [0, 1); flipping it gives (0, 1].
            (0..n).map(|_| scale * (1.0 - rng.random::<f64>())).collect()
        };
        let slab = cfg.expansion * cfg.rank;
        let a = draw(dims.users * slab);
        let b = draw(dims.services * slab);
        let c = draw(dims.times * cfg.rank);
        let d = draw(dims.users);
        let e = draw(dims.services);
        let f = draw(dims.times);
        Ok(EctnModel {
            dims,
            rank: cfg.rank,
            expansion: cfg.expansion,
            a,
            b,
            c,
            d,
            e,
            f,
        })
    }

    /// All-zero model; useful as a starting point for hand-built instances.
    pub fn zeros(dims: Dims, rank: usize, expansion: usize) -> Result<Self, ModelError> {
        if !dims.is_valid() || rank == 0 || expansion == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "shape {dims} with rank {rank}, expansion {expansion}"
            )));
        }
        let slab = rank * expansion;
        Ok(EctnModel {
            dims,
            rank,
            expansion,
            a: vec![0.0; dims.users * slab],
            b: vec![0.0; dims.services * slab],
            c: vec![0.0; dims.times * rank],
            d: vec![0.0; dims.users],
            e: vec![0.0; dims.services],
            f: vec![0.0; dims.times],
        })
    }

    /// Builds a model from flat parameter arrays in the storage layout
    /// (`a[(i * M + m) * R + r]`, `c[k * R + r]`).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dims: Dims,
        rank: usize,
        expansion: usize,
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<f64>,
        e: Vec<f64>,
        f: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let shell = Self::zeros(dims, rank, expansion)?;
        let check = |name: &str, got: &[f64], want: usize| -> Result<(), ModelError> {
            if got.len() != want {
                return Err(ModelError::Shape(format!(
                    "{name} has {} values, expected {want}",
                    got.len()
                )));
            }
            if let Some(v) = got.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(ModelError::Shape(format!(
                    "{name} contains invalid value {v}"
                )));
            }
            Ok(())
        };
        check("A", &a, shell.a.len())?;
        check("B", &b, shell.b.len())?;
        check("C", &c, shell.c.len())?;
        check("d", &d, shell.d.len())?;
        check("e", &e, shell.e.len())?;
        check("f", &f, shell.f.len())?;
        Ok(EctnModel {
            a,
            b,
            c,
            d,
            e,
            f,
            ..shell
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn expansion(&self) -> usize {
        self.expansion
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn e(&self) -> &[f64] {
        &self.e
    }

    pub fn f(&self) -> &[f64] {
        &self.f
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len() + self.c.len() + self.d.len() + self.e.len() + self.f.len()
    }

    /// Iterates over every parameter value in declaration order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.a
            .iter()
            .chain(&self.b)
            .chain(&self.c)
            .chain(&self.d)
            .chain(&self.e)
            .chain(&self.f)
            .copied()
    }

    /// Handles for every parameter, in the same order as [`values`](Self::values).
    pub fn handles(&self) -> Vec<ParamHandle> {
        let (rank, exp, dims) = (self.rank, self.expansion, self.dims);
        let mut out = Vec::with_capacity(self.param_count());
        for i in 0..dims.users {
            for m in 0..exp {
                for r in 0..rank {
                    out.push(ParamHandle::A { i, m, r });
                }
            }
        }
        for j in 0..dims.services {
            for m in 0..exp {
                for r in 0..rank {
                    out.push(ParamHandle::B { j, m, r });
                }
            }
        }
        for k in 0..dims.times {
            for r in 0..rank {
                out.push(ParamHandle::C { k, r });
            }
        }
        out.extend((0..dims.users).map(ParamHandle::D));
        out.extend((0..dims.services).map(ParamHandle::E));
        out.extend((0..dims.times).map(ParamHandle::F));
        out
    }

    fn slot(&self, handle: ParamHandle) -> Option<(&Vec<f64>, usize)> {
        let (rank, exp, dims) = (self.rank, self.expansion, self.dims);
        match handle {
            ParamHandle::A { i, m, r } if i < dims.users && m < exp && r < rank => {
                Some((&self.a, (i * exp + m) * rank + r))
            }
            ParamHandle::B { j, m, r } if j < dims.services && m < exp && r < rank => {
                Some((&self.b, (j * exp + m) * rank + r))
            }
            ParamHandle::C { k, r } if k < dims.times && r < rank => Some((&self.c, k * rank + r)),
            ParamHandle::D(i) if i < dims.users => Some((&self.d, i)),
            ParamHandle::E(j) if j < dims.services => Some((&self.e, j)),
            ParamHandle::F(k) if k < dims.times => Some((&self.f, k)),
            _ => None,
        }
    }

    pub fn get(&self, handle: ParamHandle) -> Result<f64, ModelError> {
        self.slot(handle)
            .map(|(v, idx)| v[idx])
            .ok_or(ModelError::ParamOutOfRange(handle))
    }

    /// Sets one parameter; negative or non-finite values are rejected.
    pub fn set(&mut self, handle: ParamHandle, value: f64) -> Result<(), ModelError> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(ModelError::InvalidValue { handle, value });
        }
        self.set_unchecked(handle, value)
    }

    /// Like [`set`](Self::set) without the sign check. Only used to probe the
    /// objective on either side of a parameter.
    pub(crate) fn set_unchecked(&mut self, handle: ParamHandle, value: f64) -> Result<(), ModelError> {
        let idx = self
            .slot(handle)
            .map(|(_, idx)| idx)
            .ok_or(ModelError::ParamOutOfRange(handle))?;
        let target = match handle {
            ParamHandle::A { .. } => &mut self.a,
            ParamHandle::B { .. } => &mut self.b,
            ParamHandle::C { .. } => &mut self.c,
            ParamHandle::D(_) => &mut self.d,
            ParamHandle::E(_) => &mut self.e,
            ParamHandle::F(_) => &mut self.f,
        };
        target[idx] = value;
        Ok(())
    }

    fn check_index(&self, i: usize, j: usize, k: usize) -> Result<(), ModelError> {
        if self.dims.contains(i, j, k) {
            Ok(())
        } else {
            Err(ModelError::IndexOutOfRange {
                i,
                j,
                k,
                dims: self.dims,
            })
        }
    }

    #[inline]
    pub(crate) fn user_slab(&self, i: usize) -> &[f64] {
        let n = self.rank * self.expansion;
        &self.a[i * n..(i + 1) * n]
    }

    #[inline]
    pub(crate) fn service_slab(&self, j: usize) -> &[f64] {
        let n = self.rank * self.expansion;
        &self.b[j * n..(j + 1) * n]
    }

    #[inline]
    pub(crate) fn time_row(&self, k: usize) -> &[f64] {
        &self.c[k * self.rank..(k + 1) * self.rank]
    }

    /// Fills `z[r] = sum_m a[i, m, r] * b[j, m, r]`.
    #[inline]
    pub(crate) fn fill_z(&self, i: usize, j: usize, z: &mut [f64]) {
        let rank = self.rank;
        z.fill(0.0);
        for (ar, br) in self
            .user_slab(i)
            .chunks_exact(rank)
            .zip(self.service_slab(j).chunks_exact(rank))
        {
            for ((zr, a), b) in z.iter_mut().zip(ar).zip(br) {
                *zr += a * b;
            }
        }
    }

    #[inline]
    pub(crate) fn core_with(&self, i: usize, j: usize, k: usize, z: &mut [f64]) -> f64 {
        self.fill_z(i, j, z);
        self.time_row(k).iter().zip(z.iter()).map(|(c, z)| c * z).sum()
    }

    #[inline]
    pub(crate) fn predict_with(&self, i: usize, j: usize, k: usize, z: &mut [f64]) -> f64 {
        self.core_with(i, j, k, z) + self.d[i] + self.e[j] + self.f[k]
    }

    /// Scratch buffer sized for [`predict_with`](Self::predict_with).
    pub(crate) fn scratch(&self) -> Vec<f64> {
        vec![0.0; self.rank]
    }

    /// Factor part of the prediction, without biases.
    pub fn predict_core(&self, i: usize, j: usize, k: usize) -> Result<f64, ModelError> {
        self.check_index(i, j, k)?;
        Ok(self.core_with(i, j, k, &mut self.scratch()))
    }

    /// Full prediction: factor part plus `d[i] + e[j] + f[k]`.
    pub fn predict(&self, i: usize, j: usize, k: usize) -> Result<f64, ModelError> {
        self.check_index(i, j, k)?;
        Ok(self.predict_with(i, j, k, &mut self.scratch()))
    }

    /// The user × service matrix `A_r B_r^T` of rank component `r`.
    pub fn intermediate_z(&self, r: usize) -> Result<Array2<f64>, ModelError> {
        if r >= self.rank {
            return Err(ModelError::RankOutOfRange { r, rank: self.rank });
        }
        let (rank, exp) = (self.rank, self.expansion);
        let users = Array2::from_shape_fn((self.dims.users, exp), |(i, m)| {
            self.a[(i * exp + m) * rank + r]
        });
        let services = Array2::from_shape_fn((self.dims.services, exp), |(j, m)| {
            self.b[(j * exp + m) * rank + r]
        });
        Ok(users.dot(&services.t()))
    }

    /// For an `M = 1` model, compares every prediction with a biased CP model
    /// whose factor columns are `a[·, 0, r]`, `b[·, 0, r]` and `c[·, r]`.
    pub fn as_biased_cp_check(&self) -> Result<bool, ModelError> {
        if self.expansion != 1 {
            return Err(ModelError::ExpansionNotOne(self.expansion));
        }
        let rank = self.rank;
        let u = |i: usize, r: usize| self.a[i * rank + r];
        let v = |j: usize, r: usize| self.b[j * rank + r];
        let w = |k: usize, r: usize| self.c[k * rank + r];
        let dims = self.dims;
        for i in 0..dims.users {
            for j in 0..dims.services {
                for k in 0..dims.times {
                    let cp: f64 = (0..rank).map(|r| w(k, r) * (u(i, r) * v(j, r))).sum::<f64>()
                        + self.d[i]
                        + self.e[j]
                        + self.f[k];
                    if cp != self.predict(i, j, k)? {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }

    /// Smallest parameter value.
    pub fn min_param(&self) -> f64 {
        self.values().fold(f64::INFINITY, f64::min)
    }

    pub(crate) fn from_raw(
        template: &EctnModel,
        a: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
        d: Vec<f64>,
        e: Vec<f64>,
        f: Vec<f64>,
    ) -> Self {
        EctnModel {
            dims: template.dims,
            rank: template.rank,
            expansion: template.expansion,
            a,
            b,
            c,
            d,
            e,
            f,
        }
    }

    /// Writes a binary dump: magic, `|I| |J| |K| R M` as little-endian u64,
    /// then A, B, C, d, e, f as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        for n in [
            self.dims.users,
            self.dims.services,
            self.dims.times,
            self.rank,
            self.expansion,
        ] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for v in self.values() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *h = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| ModelError::Format("header value overflows usize".into()))?;
        }
        let [users, services, times, rank, expansion] = header;
        let shell = Self::zeros(Dims::new(users, services, times), rank, expansion)
            .map_err(|e| ModelError::Format(e.to_string()))?;
        let mut read_vec = |n: usize| -> Result<Vec<f64>, ModelError> {
            let mut out = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                out.push(f64::from_le_bytes(buf));
            }
            Ok(out)
        };
        let a = read_vec(shell.a.len())?;
        let b = read_vec(shell.b.len())?;
        let c = read_vec(shell.c.len())?;
        let d = read_vec(shell.d.len())?;
        let e = read_vec(shell.e.len())?;
        let f = read_vec(shell.f.len())?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(ModelError::Format("trailing bytes after parameters".into()));
        }
        Self::from_parts(shell.dims, rank, expansion, a, b, c, d, e, f)
            .map_err(|e| ModelError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(rank: usize, expansion: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            rank,
            expansion,
            init_scale: 1.0,
            seed,
        }
    }

    /// Dense reconstruction by explicit triple loop over handles.
    fn dense_oracle(m: &EctnModel, i: usize, j: usize, k: usize, with_bias: bool) -> f64 {
        let mut s = 0.0;
        for r in 0..m.rank() {
            for mm in 0..m.expansion() {
                s += m.get(ParamHandle::A { i, m: mm, r }).unwrap()
                    * m.get(ParamHandle::B { j, m: mm, r }).unwrap()
                    * m.get(ParamHandle::C { k, r }).unwrap();
            }
        }
        if with_bias {
            s += m.get(ParamHandle::D(i)).unwrap()
                + m.get(ParamHandle::E(j)).unwrap()
                + m.get(ParamHandle::F(k)).unwrap();
        }
        s
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn init_is_deterministic_and_in_range() {
        let dims = Dims::new(4, 5, 6);
        let c = ModelConfig {
            init_scale: 0.01,
            ..cfg(3, 2, 99)
        };
        let m1 = EctnModel::init_random(dims, &c).unwrap();
        let m2 = EctnModel::init_random(dims, &c).unwrap();
        assert_eq!(m1, m2);
        let max = m1.values().fold(0.0, f64::max);
        assert!(max <= 0.01);
        assert!(m1.min_param() > 0.0);
    }

    #[test]
    fn init_rejects_bad_config() {
        let dims = Dims::new(2, 2, 2);
        assert!(EctnModel::init_random(Dims::new(0, 2, 2), &cfg(1, 1, 0)).is_err());
        let zero_scale = ModelConfig {
            init_scale: 0.0,
            ..cfg(1, 1, 0)
        };
        assert!(matches!(
            EctnModel::init_random(dims, &zero_scale),
            Err(ModelError::InvalidConfig(_))
        ));
        assert!(EctnModel::init_random(dims, &cfg(0, 1, 0)).is_err());
        assert!(EctnModel::init_random(dims, &cfg(1, 0, 0)).is_err());
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let m = EctnModel::init_random(Dims::new(3, 4, 5), &cfg(2, 3, 1)).unwrap();
        assert_eq!(m.param_count(), 3 * 3 * 2 + 4 * 3 * 2 + 5 * 2 + 3 + 4 + 5);
        assert_eq!(m.param_count(), 64);
        assert_eq!(m.handles().len(), 64);
        let via_handles: Vec<f64> = m.handles().iter().map(|h| m.get(*h).unwrap()).collect();
        assert_eq!(via_handles, m.values().collect::<Vec<_>>());
    }

    #[test]
    fn constant_factors_give_rank_times_expansion() {
        let dims = Dims::new(2, 2, 2);
        let (rank, exp) = (2, 3);
        let n = |x: usize| vec![1.0; x];
        let m = EctnModel::from_parts(
            dims,
            rank,
            exp,
            n(2 * 6),
            n(2 * 6),
            n(2 * 2),
            vec![0.0; 2],
            vec![0.0; 2],
            vec![0.0; 2],
        )
        .unwrap();
        assert_eq!(m.predict_core(1, 0, 1).unwrap(), 6.0);
        let z = m.intermediate_z(1).unwrap();
        assert!(z.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn single_product_and_pure_bias() {
        let dims = Dims::new(1, 1, 1);
        let mut m = EctnModel::zeros(dims, 1, 1).unwrap();
        m.set(ParamHandle::A { i: 0, m: 0, r: 0 }, 2.0).unwrap();
        m.set(ParamHandle::B { j: 0, m: 0, r: 0 }, 3.0).unwrap();
        m.set(ParamHandle::C { k: 0, r: 0 }, 0.5).unwrap();
        assert_eq!(m.predict_core(0, 0, 0).unwrap(), 3.0);

        let mut m = EctnModel::zeros(Dims::new(2, 2, 2), 2, 2).unwrap();
        for x in 0..2 {
            m.set(ParamHandle::D(x), 1.0).unwrap();
            m.set(ParamHandle::E(x), 2.0).unwrap();
            m.set(ParamHandle::F(x), 3.0).unwrap();
        }
        assert_eq!(m.predict(1, 0, 1).unwrap(), 6.0);
    }

    #[test]
    fn predictions_match_dense_oracle() {
        let m = EctnModel::init_random(Dims::new(3, 3, 3), &cfg(3, 2, 5)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let core = m.predict_core(i, j, k).unwrap();
                    let full = m.predict(i, j, k).unwrap();
                    assert!(rel_close(core, dense_oracle(&m, i, j, k, false), 1e-12));
                    assert!(rel_close(full, dense_oracle(&m, i, j, k, true), 1e-12));
                }
            }
        }
    }

    #[test]
    fn zero_bias_reduces_to_core() {
        let mut m = EctnModel::init_random(Dims::new(3, 2, 2), &cfg(2, 2, 8)).unwrap();
        for h in m.handles() {
            if matches!(h, ParamHandle::D(_) | ParamHandle::E(_) | ParamHandle::F(_)) {
                m.set(h, 0.0).unwrap();
            }
        }
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(m.predict(i, j, k).unwrap(), m.predict_core(i, j, k).unwrap());
                }
            }
        }
    }

    #[test]
    fn intermediate_outer_product() {
        let dims = Dims::new(2, 2, 1);
        let mut m = EctnModel::zeros(dims, 1, 1).unwrap();
        for x in 0..2 {
            m.set(ParamHandle::A { i: x, m: 0, r: 0 }, (x + 1) as f64).unwrap();
            m.set(ParamHandle::B { j: x, m: 0, r: 0 }, (x + 1) as f64).unwrap();
        }
        let z = m.intermediate_z(0).unwrap();
        assert_eq!(z, ndarray::array![[1.0, 2.0], [2.0, 4.0]]);
        assert!(matches!(
            m.intermediate_z(1),
            Err(ModelError::RankOutOfRange { .. })
        ));
    }

    #[test]
    fn intermediate_consistent_with_core() {
        let m = EctnModel::init_random(Dims::new(3, 3, 3), &cfg(3, 3, 21)).unwrap();
        let zs: Vec<_> = (0..3).map(|r| m.intermediate_z(r).unwrap()).collect();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let via_z: f64 = (0..3)
                        .map(|r| zs[r][[i, j]] * m.get(ParamHandle::C { k, r }).unwrap())
                        .sum();
                    assert!(rel_close(via_z, m.predict_core(i, j, k).unwrap(), 1e-12));
                }
            }
        }
    }

    #[test]
    fn biased_cp_reduction() {
        let m = EctnModel::init_random(Dims::new(4, 4, 4), &cfg(3, 1, 2)).unwrap();
        assert!(m.as_biased_cp_check().unwrap());

        // rank-1 hand check on (2,2,2)
        let m = EctnModel::init_random(Dims::new(2, 2, 2), &cfg(1, 1, 3)).unwrap();
        assert!(m.as_biased_cp_check().unwrap());
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    let hand = m.a()[i] * m.b()[j] * m.c()[k] + m.d()[i] + m.e()[j] + m.f()[k];
                    assert!(rel_close(hand, m.predict(i, j, k).unwrap(), 1e-15));
                }
            }
        }

        let m = EctnModel::init_random(Dims::new(2, 2, 2), &cfg(1, 2, 3)).unwrap();
        assert!(matches!(
            m.as_biased_cp_check(),
            Err(ModelError::ExpansionNotOne(2))
        ));
    }

    #[test]
    fn out_of_range_errors() {
        let mut m = EctnModel::init_random(Dims::new(2, 2, 2), &cfg(1, 1, 0)).unwrap();
        assert!(matches!(
            m.predict(2, 0, 0),
            Err(ModelError::IndexOutOfRange { .. })
        ));
        assert!(m.predict_core(0, 0, 5).is_err());
        assert!(m.get(ParamHandle::C { k: 0, r: 1 }).is_err());
        assert!(matches!(
            m.set(ParamHandle::D(0), -1.0),
            Err(ModelError::InvalidValue { .. })
        ));
    }

    #[test]
    fn dump_round_trip_is_bit_exact() {
        let m = EctnModel::init_random(Dims::new(3, 4, 5), &cfg(2, 3, 77)).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 5 * 8 + m.param_count() * 8);
        let back = EctnModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, m);

        buf.push(0);
        assert!(matches!(
            EctnModel::read_from(buf.as_slice()),
            Err(ModelError::Format(_))
        ));
        assert!(EctnModel::read_from(&b"NOTAMODEL"[..]).is_err());
    }

    proptest! {
        #[test]
        fn nonnegative_closure(seed in any::<u64>(), rank in 1usize..4, exp in 1usize..4) {
            let m = EctnModel::init_random(Dims::new(3, 2, 3), &cfg(rank, exp, seed)).unwrap();
            for i in 0..3 { for j in 0..2 { for k in 0..3 {
                prop_assert!(m.predict_core(i, j, k).unwrap() >= 0.0);
                prop_assert!(m.predict(i, j, k).unwrap() >= 0.0);
            }}}
        }

        #[test]
        fn rank_permutation_leaves_predictions(seed in any::<u64>(), shift in 1usize..3) {
            let (rank, exp) = (3, 2);
            let dims = Dims::new(3, 3, 2);
            let m = EctnModel::init_random(dims, &cfg(rank, exp, seed)).unwrap();
            let mut p = m.clone();
            for h in m.handles() {
                let moved = match h {
                    ParamHandle::A { i, m, r } => ParamHandle::A { i, m, r: (r + shift) % rank },
                    ParamHandle::B { j, m, r } => ParamHandle::B { j, m, r: (r + shift) % rank },
                    ParamHandle::C { k, r } => ParamHandle::C { k, r: (r + shift) % rank },
                    other => other,
                };
                p.set(moved, m.get(h).unwrap()).unwrap();
            }
            for i in 0..3 { for j in 0..3 { for k in 0..2 {
                prop_assert!(rel_close(m.predict(i, j, k).unwrap(), p.predict(i, j, k).unwrap(), 1e-12));
            }}}
        }

        #[test]
        fn dump_round_trip(seed in any::<u64>()) {
            let m = EctnModel::init_random(Dims::new(2, 3, 2), &cfg(2, 2, seed)).unwrap();
            let mut buf = Vec::new();
            m.write_to(&mut buf).unwrap();
            prop_assert_eq!(EctnModel::read_from(buf.as_slice()).unwrap(), m);
        }
    }
}
