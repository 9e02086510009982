//! QoS log ingestion, synthetic data, and train/validation/test splits.
//!
//! The log format is one measurement per line:
//!
//! ```text
//! # optional comments; "# dims: 142 4500 64" declares the tensor shape
//! user_id service_id time_slice value
//! ```
//!
//! Indices are 0-based. Negative values mark missing measurements and are
//! skipped.

use std::io::{self, BufRead, Write};

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::model::{EctnModel, ModelConfig, ModelError};
use crate::tensor::{Dims, Entry, ObservedTensor, TensorError};

const RATIO_TOL: f64 = 1e-9;
const TRUTH_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const SAMPLE_STREAM: u64 = 0x5EED_DA7A_C0FF_EE00;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("split ratios must be nonnegative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("requested {requested} entries but the tensor only has {cells} cells")]
    DensityTooHigh { requested: usize, cells: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("split manifest: {0}")]
    Manifest(String),
    #[error("no entries in input")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parsed QoS log.
#[derive(Debug, Clone, PartialEq)]
pub struct QosLog {
    pub dims: Dims,
    /// `true` when the shape came from a `# dims:` header rather than the data.
    pub declared_dims: bool,
    pub entries: Vec<Entry>,
    /// Lines holding a negative (missing) measurement.
    pub skipped: usize,
}

impl QosLog {
    pub fn into_tensor(self) -> Result<ObservedTensor, DataError> {
        Ok(ObservedTensor::build(self.dims, self.entries)?)
    }

    /// Replaces the shape, checking every entry fits.
    pub fn with_dims(mut self, dims: Dims) -> Result<Self, DataError> {
        if let Some(e) = self.entries.iter().find(|e| !dims.contains(e.i, e.j, e.k)) {
            return Err(TensorError::IndexOutOfRange {
                i: e.i,
                j: e.j,
                k: e.k,
                dims,
            }
            .into());
        }
        self.dims = dims;
        self.declared_dims = true;
        Ok(self)
    }
}

fn parse_dims_header(body: &str, line: usize) -> Result<Option<Dims>, DataError> {
    let Some(rest) = body.trim().strip_prefix("dims:") else {
        return Ok(None);
    };
    let nums: Result<Vec<usize>, _> = rest.split_whitespace().map(str::parse).collect();
    match nums.as_deref() {
        Ok([u, s, t]) if *u > 0 && *s > 0 && *t > 0 => Ok(Some(Dims::new(*u, *s, *t))),
        _ => Err(DataError::MalformedLine {
            line,
            reason: format!("bad dims header {:?}", body.trim()),
        }),
    }
}

/// Reads a QoS log. Shape comes from a `# dims:` header when present,
/// otherwise from the largest index seen along each mode.
pub fn parse_qos_log<R: BufRead>(reader: R) -> Result<QosLog, DataError> {
    let mut entries = Vec::new();
    let mut skipped = 0;
    let mut declared = None;
    let mut max = (0usize, 0usize, 0usize);
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(comment) = text.strip_prefix('#') {
            if let Some(d) = parse_dims_header(comment, line_no)? {
                declared = Some(d);
            }
            continue;
        }
        let fields: Vec<&str> = text.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(DataError::MalformedLine {
                line: line_no,
                reason: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let idx = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| DataError::MalformedLine {
                line: line_no,
                reason: format!("bad {what} index {s:?}"),
            })
        };
        let i = idx(fields[0], "user")?;
        let j = idx(fields[1], "service")?;
        let k = idx(fields[2], "time")?;
        let value: f64 = fields[3].parse().map_err(|_| DataError::MalformedLine {
            line: line_no,
            reason: format!("bad value {:?}", fields[3]),
        })?;
        if !value.is_finite() {
            return Err(DataError::MalformedLine {
                line: line_no,
                reason: format!("non-finite value {:?}", fields[3]),
            });
        }
        if value < 0.0 {
            skipped += 1;
            continue;
        }
        max = (max.0.max(i), max.1.max(j), max.2.max(k));
        entries.push(Entry::new(i, j, k, value));
    }

    match declared {
        Some(dims) => QosLog {
            dims: Dims::new(1, 1, 1),
            declared_dims: false,
            entries,
            skipped,
        }
        .with_dims(dims),
        None => {
            if entries.is_empty() {
                return Err(DataError::Empty);
            }
            let dims = Dims::new(max.0 + 1, max.1 + 1, max.2 + 1);
            warn!("no dims declared, inferred {dims} from the largest indices");
            Ok(QosLog {
                dims,
                declared_dims: false,
                entries,
                skipped,
            })
        }
    }
}

/// Writes entries in the four-field format read by [`parse_qos_log`].
pub fn write_qos_log<W: Write>(entries: &[Entry], mut sink: W) -> io::Result<()> {
    for e in entries {
        // `{}` on f64 prints the shortest string that parses back to the same value.
        writeln!(sink, "{} {} {} {}", e.i, e.j, e.k, e.value)?;
    }
    sink.flush()
}

/// Writes a `# dims:` header followed by the entries.
pub fn write_qos_log_with_dims<W: Write>(dims: Dims, entries: &[Entry], mut sink: W) -> io::Result<()> {
    writeln!(sink, "# dims: {} {} {}", dims.users, dims.services, dims.times)?;
    write_qos_log(entries, sink)
}

/// Disjoint partition of entry positions into train, validation and test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

fn check_ratios(ratios: [f64; 3]) -> Result<(), DataError> {
    let ok = ratios.iter().all(|r| r.is_finite() && *r >= 0.0)
        && (ratios.iter().sum::<f64>() - 1.0).abs() <= RATIO_TOL;
    if ok {
        Ok(())
    } else {
        Err(DataError::BadRatios(ratios))
    }
}

/// `floor(fraction * n)`, tolerant of products like `0.29 * 100 = 28.999…`.
fn floor_share(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let nudged = (exact + exact.abs() * 1e-12).floor();
    (nudged as usize).min(n)
}

/// Uniformly random partition of all entry positions.
///
/// Train and validation sizes are `floor(ratio * |entries|)`; the test set
/// takes the rest. Each set is sorted ascending.
pub fn split(tensor: &ObservedTensor, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit, DataError> {
    split_positions(tensor.len(), ratios, seed)
}

pub fn split_positions(n: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit, DataError> {
    check_ratios(ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = floor_share(ratios[0], n);
    let n_val = floor_share(ratios[1], n).min(n - n_train);
    let mut test = order.split_off(n_train + n_val);
    let mut validation = order.split_off(n_train);
    let mut train = order;
    train.sort_unstable();
    validation.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit {
        train,
        validation,
        test,
        seed,
        ratios,
    })
}

/// `n` splits with seeds `base_seed, base_seed + 1, …`.
pub fn repeated_splits(
    tensor: &ObservedTensor,
    ratios: [f64; 3],
    base_seed: u64,
    n: usize,
) -> Result<Vec<DatasetSplit>, DataError> {
    (0..n as u64)
        .map(|r| split(tensor, ratios, base_seed.wrapping_add(r)))
        .collect()
}

impl DatasetSplit {
    /// Writes the split as text: a header line, then `[train]`, `[validation]`
    /// and `[test]` sections with one position per line.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "# seed={} ratios={},{},{}",
            self.seed, self.ratios[0], self.ratios[1], self.ratios[2]
        )?;
        for (name, set) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            writeln!(w, "[{name}]")?;
            for p in set {
                writeln!(w, "{p}")?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self, DataError> {
        let bad = |line: usize, msg: &str| DataError::Manifest(format!("line {line}: {msg}"));
        let mut seed = None;
        let mut ratios = None;
        let mut sections: [Option<Vec<usize>>; 3] = [None, None, None];
        let mut current: Option<usize> = None;
        for (n, line) in r.lines().enumerate() {
            let line_no = n + 1;
            let line = line?;
            let text = line.trim();
            if text.is_empty() {
                continue;
            }
            if let Some(header) = text.strip_prefix('#') {
                for field in header.split_whitespace() {
                    if let Some(v) = field.strip_prefix("seed=") {
                        seed = Some(v.parse::<u64>().map_err(|_| bad(line_no, "bad seed"))?);
                    } else if let Some(v) = field.strip_prefix("ratios=") {
                        let parts: Result<Vec<f64>, _> = v.split(',').map(str::parse).collect();
                        match parts.as_deref() {
                            Ok([a, b, c]) => ratios = Some([*a, *b, *c]),
                            _ => return Err(bad(line_no, "bad ratios")),
                        }
                    }
                }
                continue;
            }
            let section = match text {
                "[train]" => Some(0),
                "[validation]" => Some(1),
                "[test]" => Some(2),
                _ => None,
            };
            if let Some(s) = section {
                if sections[s].is_some() {
                    return Err(bad(line_no, "repeated section"));
                }
                sections[s] = Some(Vec::new());
                current = Some(s);
                continue;
            }
            let s = current.ok_or_else(|| bad(line_no, "position outside a section"))?;
            let p = text
                .parse::<usize>()
                .map_err(|_| bad(line_no, "bad position"))?;
            sections[s].as_mut().expect("section opened").push(p);
        }
        let [train, validation, test] = sections;
        let missing = || DataError::Manifest("missing section".into());
        Ok(DatasetSplit {
            train: train.ok_or_else(missing)?,
            validation: validation.ok_or_else(missing)?,
            test: test.ok_or_else(missing)?,
            seed: seed.ok_or_else(|| DataError::Manifest("missing seed".into()))?,
            ratios: ratios.ok_or_else(|| DataError::Manifest("missing ratios".into()))?,
        })
    }

    /// Checks the three sets are disjoint and together cover `0..n`.
    pub fn validate_against(&self, n: usize) -> Result<(), DataError> {
        let mut seen = vec![false; n];
        for &p in self.train.iter().chain(&self.validation).chain(&self.test) {
            if p >= n {
                return Err(DataError::Manifest(format!(
                    "position {p} out of range for {n} entries"
                )));
            }
            if std::mem::replace(&mut seen[p], true) {
                return Err(DataError::Manifest(format!("position {p} appears twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(DataError::Manifest("split does not cover every entry".into()));
        }
        Ok(())
    }
}

/// Settings for drawing a dataset from a random ground-truth model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub dims: Dims,
    pub rank: usize,
    pub expansion: usize,
    pub density: f64,
    pub noise_sigma: f64,
    pub bias_scale: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Number of entries the spec asks for.
    pub fn entry_count(&self) -> usize {
        floor_share(self.density, self.dims.cells())
    }
}

/// Draws a nonnegative truth model with factors in `(0, 1]` and biases in
/// `(0, bias_scale]`, samples distinct coordinates, and sets each value to the
/// model's prediction plus Gaussian noise clipped at zero.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ObservedTensor, EctnModel), DataError> {
    if !spec.dims.is_valid() {
        return Err(DataError::InvalidSpec(format!("dims {}", spec.dims)));
    }
    if spec.density.is_nan() || spec.density <= 0.0 || !spec.density.is_finite() {
        return Err(DataError::InvalidSpec(format!("density {}", spec.density)));
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(DataError::InvalidSpec(format!("noise_sigma {}", spec.noise_sigma)));
    }
    if !(spec.bias_scale >= 0.0 && spec.bias_scale.is_finite()) {
        return Err(DataError::InvalidSpec(format!("bias_scale {}", spec.bias_scale)));
    }
    let cells = spec.dims.cells();
    let requested = floor_share(spec.density, cells);
    if spec.density > 1.0 || requested > cells {
        return Err(DataError::DensityTooHigh {
            requested: (spec.density * cells as f64).floor() as usize,
            cells,
        });
    }

    // Derived seeds keep the truth model independent of a trained model that
    // happens to be initialized with the same seed.
    let cfg = ModelConfig {
        rank: spec.rank,
        expansion: spec.expansion,
        init_scale: 1.0,
        seed: spec.seed ^ TRUTH_STREAM,
    };
    let unit = EctnModel::init_random(spec.dims, &cfg)?;
    let scale = |v: &[f64]| v.iter().map(|x| x * spec.bias_scale).collect::<Vec<_>>();
    let truth = EctnModel::from_parts(
        spec.dims,
        spec.rank,
        spec.expansion,
        unit.a().to_vec(),
        unit.b().to_vec(),
        unit.c().to_vec(),
        scale(unit.d()),
        scale(unit.e()),
        scale(unit.f()),
    )?;

    // Separate stream so coordinates do not shift when the model shape changes.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ SAMPLE_STREAM);
    let mut cells_drawn = index::sample(&mut rng, cells, requested).into_vec();
    cells_drawn.sort_unstable();
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::InvalidSpec(e.to_string()))?)
    } else {
        None
    };
    let per_user = spec.dims.services * spec.dims.times;
    let mut entries = Vec::with_capacity(requested);
    for cell in cells_drawn {
        let i = cell / per_user;
        let j = (cell % per_user) / spec.dims.times;
        let k = cell % spec.dims.times;
        let mut value = truth.predict(i, j, k)?;
        if let Some(n) = &noise {
            value = (value + n.sample(&mut rng)).max(0.0);
        }
        entries.push(Entry::new(i, j, k, value));
    }
    Ok((ObservedTensor::build(spec.dims, entries)?, truth))
}

/// Random entries at distinct coordinates with values uniform in `[0, max_value)`.
pub fn random_entries(dims: Dims, count: usize, max_value: f64, seed: u64) -> Result<Vec<Entry>, DataError> {
    let cells = dims.cells();
    if count > cells {
        return Err(DataError::DensityTooHigh {
            requested: count,
            cells,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_user = dims.services * dims.times;
    Ok(index::sample(&mut rng, cells, count)
        .into_iter()
        .map(|cell| {
            Entry::new(
                cell / per_user,
                (cell % per_user) / dims.times,
                cell % dims.times,
                rng.random::<f64>() * max_value,
            )
        })
        .collect())
}
