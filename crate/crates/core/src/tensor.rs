//! Coordinate-format storage for incomplete third-order tensors.
//!
//! An [`ObservedTensor`] holds the known entries of a user × service × time
//! tensor together with three precomputed mode indexes, so that the entries
//! touching a given user, service or time slice can be visited without
//! scanning the whole entry list.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor dimensions must be positive, got {0}")]
    InvalidDims(Dims),
    #[error("entry ({i}, {j}, {k}) lies outside tensor of shape {dims}")]
    IndexOutOfRange {
        i: usize,
        j: usize,
        k: usize,
        dims: Dims,
    },
    #[error("{mode} index {index} out of range (dimension {dim})")]
    SliceOutOfRange { mode: Mode, index: usize, dim: usize },
    #[error("duplicate coordinate ({i}, {j}, {k})")]
    DuplicateCoordinate { i: usize, j: usize, k: usize },
    #[error("entry ({i}, {j}, {k}) has negative value {value}")]
    NegativeValue {
        i: usize,
        j: usize,
        k: usize,
        value: f64,
    },
    #[error("entry ({i}, {j}, {k}) has non-finite value")]
    NonFiniteValue { i: usize, j: usize, k: usize },
}

/// Shape of a user × service × time tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub users: usize,
    pub services: usize,
    pub times: usize,
}

impl Dims {
    pub const fn new(users: usize, services: usize, times: usize) -> Self {
        Dims {
            users,
            services,
            times,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.users > 0 && self.services > 0 && self.times > 0
    }

    /// Number of cells in the full tensor.
    pub fn cells(&self) -> usize {
        self.users * self.services * self.times
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        i < self.users && j < self.services && k < self.times
    }

    pub fn along(&self, mode: Mode) -> usize {
        match mode {
            Mode::User => self.users,
            Mode::Service => self.services,
            Mode::Time => self.times,
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.users, self.services, self.times)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    User,
    Service,
    Time,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::User, Mode::Service, Mode::Time];
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::User => "user",
            Mode::Service => "service",
            Mode::Time => "time",
        })
    }
}

/// One observed QoS measurement at (user, service, time).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub value: f64,
}

impl Entry {
    pub const fn new(i: usize, j: usize, k: usize, value: f64) -> Self {
        Entry { i, j, k, value }
    }

    pub fn coord(&self, mode: Mode) -> usize {
        match mode {
            Mode::User => self.i,
            Mode::Service => self.j,
            Mode::Time => self.k,
        }
    }
}

/// Grouping of entry positions by their coordinate along one mode,
/// stored in compressed form: bucket `x` is `positions[offsets[x]..offsets[x + 1]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeIndex {
    offsets: Vec<usize>,
    positions: Vec<usize>,
}

impl ModeIndex {
    /// Groups `positions` by `key(position)`, preserving the input order inside each bucket.
    pub fn group<F>(buckets: usize, positions: &[usize], key: F) -> Self
    where
        F: Fn(usize) -> usize,
    {
        let mut offsets = vec![0usize; buckets + 1];
        for &p in positions {
            offsets[key(p) + 1] += 1;
        }
        for x in 0..buckets {
            offsets[x + 1] += offsets[x];
        }
        let mut cursor = offsets.clone();
        let mut grouped = vec![0usize; positions.len()];
        for &p in positions {
            let b = key(p);
            grouped[cursor[b]] = p;
            cursor[b] += 1;
        }
        ModeIndex {
            offsets,
            positions: grouped,
        }
    }

    pub fn buckets(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn bucket(&self, index: usize) -> &[usize] {
        &self.positions[self.range(index)]
    }

    /// Span of bucket `index` within the flattened grouping.
    pub fn range(&self, index: usize) -> std::ops::Range<usize> {
        self.offsets[index]..self.offsets[index + 1]
    }

    /// All positions, bucket after bucket.
    pub fn flat(&self) -> &[usize] {
        &self.positions
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.buckets()).map(move |x| self.bucket(x))
    }
}

/// Immutable incomplete third-order tensor in coordinate format.
#[derive(Debug, Clone)]
pub struct ObservedTensor {
    dims: Dims,
    entries: Vec<Entry>,
    by_user: ModeIndex,
    by_service: ModeIndex,
    by_time: ModeIndex,
}

impl ObservedTensor {
    /// Validates `raw` against `dims` and builds the three mode indexes.
    pub fn build(dims: Dims, raw: Vec<Entry>) -> Result<Self, TensorError> {
        if !dims.is_valid() {
            return Err(TensorError::InvalidDims(dims));
        }
        let mut seen = HashSet::with_capacity(raw.len());
        for e in &raw {
            let Entry { i, j, k, value } = *e;
            if !dims.contains(i, j, k) {
                return Err(TensorError::IndexOutOfRange { i, j, k, dims });
            }
            if !value.is_finite() {
                return Err(TensorError::NonFiniteValue { i, j, k });
            }
            if value < 0.0 {
                return Err(TensorError::NegativeValue { i, j, k, value });
            }
            if !seen.insert((i, j, k)) {
                return Err(TensorError::DuplicateCoordinate { i, j, k });
            }
        }

        let all: Vec<usize> = (0..raw.len()).collect();
        let by_user = ModeIndex::group(dims.users, &all, |p| raw[p].i);
        let by_service = ModeIndex::group(dims.services, &all, |p| raw[p].j);
        let by_time = ModeIndex::group(dims.times, &all, |p| raw[p].k);
        Ok(ObservedTensor {
            dims,
            entries: raw,
            by_user,
            by_service,
            by_time,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entry(&self, position: usize) -> &Entry {
        &self.entries[position]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fraction of the full tensor that is observed.
    pub fn density(&self) -> f64 {
        self.entries.len() as f64 / self.dims.cells() as f64
    }

    /// Positions of all entries whose coordinate along `mode` equals `index`.
    pub fn slice(&self, mode: Mode, index: usize) -> Result<&[usize], TensorError> {
        let dim = self.dims.along(mode);
        if index >= dim {
            return Err(TensorError::SliceOutOfRange { mode, index, dim });
        }
        Ok(self.mode_index(mode).bucket(index))
    }

    pub fn mode_index(&self, mode: Mode) -> &ModeIndex {
        match mode {
            Mode::User => &self.by_user,
            Mode::Service => &self.by_service,
            Mode::Time => &self.by_time,
        }
    }

    /// Mean of the observed values over `positions`, or `None` if empty.
    pub fn mean_value(&self, positions: &[usize]) -> Option<f64> {
        if positions.is_empty() {
            return None;
        }
        let sum: f64 = positions.iter().map(|&p| self.entries[p].value).sum();
        Some(sum / positions.len() as f64)
    }
}
