use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ectn_core::data::{generate_synthetic, split, write_qos_log_with_dims};
use ectn_core::eval::{aggregate, evaluate, friedman_rank, ResultTable};
use ectn_core::solver::{fit, train};
use ectn_core::{DatasetSplit, EctnModel, Metrics, ObservedTensor, TrainConfig, TrainReport, TrainingSet};
use log::info;

use crate::error::CliError;
use crate::manifest::{load_log, load_source, DataSource, ExperimentManifest, SynthSettings};

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn metrics_csv(rows: &[(&str, Metrics)]) -> String {
    let mut out = String::from("set,rmse,mae,count\n");
    for (name, m) in rows {
        writeln!(out, "{name},{},{},{}", m.rmse, m.mae, m.count).unwrap();
    }
    out
}

fn loss_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,loss\n");
    writeln!(out, "0,{}", report.initial_loss).unwrap();
    for (e, loss) in report.loss_trace.iter().enumerate() {
        writeln!(out, "{},{loss}", e + 1).unwrap();
    }
    out
}

fn save_model(model: &EctnModel, path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    model.write_to(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn save_split(s: &DatasetSplit, path: &Path) -> Result<(), CliError> {
    s.write_to(create(path)?).map_err(|e| CliError::io(path, e))
}

/// Copy of the manifest with an absolute data path, so it works from any directory.
fn portable(manifest: &ExperimentManifest) -> Result<ExperimentManifest, CliError> {
    let mut m = manifest.clone();
    if let DataSource::File { path, .. } = &mut m.data {
        *path = fs::canonicalize(&*path).map_err(|e| CliError::io(path, e))?;
    }
    Ok(m)
}

fn checked_split(tensor: &ObservedTensor, manifest: &ExperimentManifest, seed: u64) -> Result<DatasetSplit, CliError> {
    let s = split(tensor, manifest.ratios, seed)?;
    if s.train.is_empty() {
        return Err(CliError::Usage(format!(
            "ratios {:?} leave no training entries out of {}",
            manifest.ratios,
            tensor.len()
        )));
    }
    if s.test.is_empty() {
        return Err(CliError::Usage(format!(
            "ratios {:?} leave no test entries out of {}",
            manifest.ratios,
            tensor.len()
        )));
    }
    Ok(s)
}

/// Trains one model per repeat and writes a run directory for each, plus
/// `summary.csv` and `aggregate.csv` over all repeats.
pub fn cmd_train(manifest: &ExperimentManifest) -> Result<Metrics, CliError> {
    manifest.validate()?;
    let tensor = manifest.load_tensor()?;
    let out = &manifest.output_dir;
    create_dir(out)?;
    write_file(&out.join("manifest.toml"), &portable(manifest)?.to_toml())?;

    let mut runs = Vec::with_capacity(manifest.repeats);
    let mut summary = String::from("run,seed,epochs_run,converged,rmse,mae,count\n");
    for r in 0..manifest.repeats {
        let seed = manifest.seed.wrapping_add(r as u64);
        let s = checked_split(&tensor, manifest, seed)?;
        let cfg = manifest.train.config(seed);
        let (model, report) = train(&tensor, &s, &cfg)?;
        let test = evaluate(&model, &tensor, &s.test)?;
        let mut rows = Vec::new();
        if !s.validation.is_empty() {
            rows.push(("validation", evaluate(&model, &tensor, &s.validation)?));
        }
        rows.push(("test", test));

        let dir = out.join(format!("run_{r:03}"));
        create_dir(&dir)?;
        save_model(&model, &dir.join("model.bin"))?;
        save_split(&s, &dir.join("split.txt"))?;
        write_file(&dir.join("loss.csv"), &loss_csv(&report))?;
        write_file(&dir.join("metrics.csv"), &metrics_csv(&rows))?;
        write_file(
            &dir.join("timing.csv"),
            &format!("seconds_per_epoch\n{}\n", report.wall_time_per_epoch),
        )?;
        info!(
            "run {r} seed {seed}: {} epochs (converged: {}), test RMSE {:.4} MAE {:.4}",
            report.epochs_run, report.converged, test.rmse, test.mae
        );
        writeln!(
            summary,
            "{r},{seed},{},{},{},{},{}",
            report.epochs_run, report.converged, test.rmse, test.mae, test.count
        )
        .unwrap();
        runs.push(test);
    }
    let agg = aggregate(&runs)?;
    write_file(&out.join("summary.csv"), &summary)?;
    write_file(&out.join("aggregate.csv"), &metrics_csv(&[("test", agg)]))?;
    Ok(agg)
}

/// `lo:hi:step` (inclusive) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, String> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    let mut values = if let [lo, hi, step] = spec.split(':').collect::<Vec<_>>()[..] {
        let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
        if !(step > 0.0 && lo <= hi) {
            return Err(format!("bad range {spec:?}"));
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        // round away the drift of repeated addition (0.1 * 3 = 0.30000000000000004)
        (0..=n).map(|x| ((lo + x as f64 * step) * 1e9).round() / 1e9).collect::<Vec<_>>()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(format!("grid {spec:?} must list nonnegative values"));
    }
    values.sort_by(f64::total_cmp);
    values.dedup();
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridRow {
    pub lambda: f64,
    pub validation: Metrics,
    pub test: Metrics,
}

/// Trains every λ on every repeat's training set and picks the λ with the
/// lowest mean validation RMSE; ties go to the smaller λ.
pub fn cmd_grid_lambda(manifest: &ExperimentManifest, grid: &[f64]) -> Result<(f64, Vec<GridRow>), CliError> {
    manifest.validate()?;
    if grid.is_empty() {
        return Err(CliError::Usage("empty lambda grid".into()));
    }
    let tensor = manifest.load_tensor()?;
    let splits = (0..manifest.repeats)
        .map(|r| checked_split(&tensor, manifest, manifest.seed.wrapping_add(r as u64)))
        .collect::<Result<Vec<_>, _>>()?;
    if splits[0].validation.is_empty() {
        return Err(CliError::Usage(format!(
            "ratios {:?} leave no validation entries for selecting lambda",
            manifest.ratios
        )));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let (mut val, mut test) = (Vec::new(), Vec::new());
        for s in &splits {
            let cfg = TrainConfig {
                lambda,
                ..manifest.train.config(s.seed)
            };
            let (model, _) = train(&tensor, s, &cfg)?;
            val.push(evaluate(&model, &tensor, &s.validation)?);
            test.push(evaluate(&model, &tensor, &s.test)?);
        }
        let row = GridRow {
            lambda,
            validation: aggregate(&val)?,
            test: aggregate(&test)?,
        };
        info!("lambda {lambda}: validation RMSE {:.4}", row.validation.rmse);
        rows.push(row);
    }
    let mut best = rows[0];
    for row in &rows[1..] {
        if row.validation.rmse < best.validation.rmse {
            best = *row;
        }
    }

    let out = &manifest.output_dir;
    create_dir(out)?;
    let mut table = String::from("lambda,validation_rmse,validation_mae,test_rmse,test_mae\n");
    for r in &rows {
        writeln!(
            table,
            "{},{},{},{},{}",
            r.lambda, r.validation.rmse, r.validation.mae, r.test.rmse, r.test.mae
        )
        .unwrap();
    }
    write_file(&out.join("grid.csv"), &table)?;
    let mut chosen = portable(manifest)?;
    chosen.train.lambda = best.lambda;
    write_file(&out.join("best.toml"), &chosen.to_toml())?;
    Ok((best.lambda, rows))
}

pub enum EvalData {
    File { path: PathBuf, dims: Option<ectn_core::Dims> },
    Manifest(PathBuf),
}

/// Metrics of a saved model on one set of a saved split.
pub fn cmd_eval(model_path: &Path, data: &EvalData, split_path: &Path, set: &str) -> Result<Metrics, CliError> {
    let file = File::open(model_path).map_err(|e| CliError::io(model_path, e))?;
    let model = EctnModel::read_from(BufReader::new(file))?;
    let tensor = match data {
        EvalData::File { path, dims } => load_log(path, *dims)?,
        EvalData::Manifest(path) => load_source(&ExperimentManifest::load(path)?.data)?,
    };
    let file = File::open(split_path).map_err(|e| CliError::io(split_path, e))?;
    let s = DatasetSplit::read_from(BufReader::new(file))?;
    s.validate_against(tensor.len())?;
    let all: Vec<usize>;
    let positions: &[usize] = match set {
        "train" => &s.train,
        "validation" => &s.validation,
        "test" => &s.test,
        "all" => {
            all = (0..tensor.len()).collect();
            &all
        }
        other => return Err(CliError::Usage(format!("unknown set {other:?}"))),
    };
    Ok(evaluate(&model, &tensor, positions)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Entries,
    RankExpansion,
}

/// Mean seconds per epoch at the base spec and at each scaled spec.
/// Columns: factor, entries, rank, expansion, seconds_per_epoch.
pub fn cmd_bench_scaling(
    base: &SynthSettings,
    factors: &[f64],
    scale: Scale,
    epochs: usize,
    repeats: usize,
) -> Result<String, CliError> {
    if let Some(f) = factors.iter().find(|f| !(f.is_finite() && **f >= 1.0)) {
        return Err(CliError::Usage(format!("scaling factors must be at least 1, got {f}")));
    }
    if epochs == 0 || repeats == 0 {
        return Err(CliError::Usage("epochs and repeats must be at least 1".into()));
    }
    let mut out = String::from("factor,entries,rank,expansion,seconds_per_epoch\n");
    for &factor in std::iter::once(&1.0).chain(factors) {
        let mut spec = *base;
        match scale {
            Scale::Entries => spec.density *= factor,
            Scale::RankExpansion => {
                if factor.fract() != 0.0 {
                    return Err(CliError::Usage(format!(
                        "expansion can only be scaled by whole factors, got {factor}"
                    )));
                }
                spec.expansion *= factor as usize;
            }
        }
        // scaling the fitted model keeps the data fixed
        let data = if scale == Scale::Entries { spec.spec() } else { base.spec() };
        let (tensor, _) = generate_synthetic(&data)?;
        let set = TrainingSet::full(&tensor);
        let cfg = TrainConfig {
            model: ectn_core::ModelConfig {
                rank: spec.rank,
                expansion: spec.expansion,
                init_scale: 0.1,
                seed: spec.seed,
            },
            max_epochs: epochs,
            tol: f64::MIN_POSITIVE,
            ..TrainConfig::default()
        };
        let mut best = f64::INFINITY;
        for _ in 0..repeats {
            let model = EctnModel::init_random(tensor.dims(), &cfg.model)?;
            best = best.min(fit(model, &set, &cfg)?.1.wall_time_per_epoch);
        }
        info!("factor {factor}: {} entries, {best:.6} s/epoch", tensor.len());
        writeln!(
            out,
            "{factor},{},{},{},{best}",
            tensor.len(),
            spec.rank,
            spec.expansion
        )
        .unwrap();
    }
    Ok(out)
}

/// Writes a synthetic QoS log and optionally the model that generated it.
pub fn cmd_gen_synth(settings: &SynthSettings, out: &Path, truth: Option<&Path>) -> Result<usize, CliError> {
    let (tensor, model) = generate_synthetic(&settings.spec())?;
    let mut w = create(out)?;
    write_qos_log_with_dims(tensor.dims(), tensor.entries(), &mut w).map_err(|e| CliError::io(out, e))?;
    w.flush().map_err(|e| CliError::io(out, e))?;
    if let Some(path) = truth {
        save_model(&model, path)?;
    }
    Ok(tensor.len())
}

/// Friedman mean ranks of a result table, returned as CSV with an `F-Rank` row.
pub fn cmd_rank(input: &Path, higher_is_better: bool) -> Result<String, CliError> {
    let file = File::open(input).map_err(|e| CliError::io(input, e))?;
    let table = ResultTable::read_csv(BufReader::new(file))?;
    let ranks = friedman_rank(&table, !higher_is_better)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf, Some(&ranks))?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_specs() {
        let g = parse_grid("0.1:1.0:0.1").unwrap();
        assert_eq!(g.len(), 10);
        assert_eq!(g[2], 0.3);
        assert_eq!(g[9], 1.0);
        assert_eq!(parse_grid("0.8,0.4,0.4").unwrap(), vec![0.4, 0.8]);
        assert_eq!(parse_grid("0.5").unwrap(), vec![0.5]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1:0").is_err());
        assert!(parse_grid("-1").is_err());
        assert!(parse_grid("a,b").is_err());
    }

    #[test]
    fn metrics_rows_round_trip_floats() {
        let m = Metrics { rmse: 0.1 + 0.2, mae: 1.0 / 3.0, count: 4 };
        let text = metrics_csv(&[("test", m)]);
        let line = text.lines().nth(1).unwrap();
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields[1].parse::<f64>().unwrap(), m.rmse);
        assert_eq!(fields[2].parse::<f64>().unwrap(), m.mae);
    }
}
