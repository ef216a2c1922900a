use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use eened::checkpoint::{load_checkpoint, save_checkpoint};
use eened::data::cache::save_cache;
use eened::data::csv::{parse_csv, CsvOptions};
use eened::data::toy::{toy_dataset, TOY_ROWS, TOY_T_IN};
use eened::data::{Dataset, SplitPlan, SplitTag};
use eened::gradcheck::{run_suite, GradcheckOptions};
use eened::train::{evaluate_with, train_with};
use eened::{EenedModel, Execution, OpKind};

use crate::settings::{merge, read_config_file, CliError, CliResult, EXIT_GRADCHECK};
use crate::{DataArgs, EvalArgs, EvalSplit, GradcheckArgs, IngestArgs, Preset, PredictArgs, SplitMode, TrainArgs};

fn check_threshold(t: f64) -> CliResult<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(CliError::config(format!("threshold must lie in [0, 1], got {t}")))
    }
}

fn check_output(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(CliError::config(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_output(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

fn validate_data_args(args: &DataArgs) -> CliResult<()> {
    if args.data.is_none() && !args.toy {
        return Err(CliError::config("one of --data or --toy is required"));
    }
    if !(0.0..1.0).contains(&args.test_fraction) {
        return Err(CliError::config(format!(
            "test_fraction must lie in [0, 1), got {}",
            args.test_fraction
        )));
    }
    Ok(())
}

/// Loads the requested dataset and assigns its train/test split (unless
/// it came from a cache that already carries one).
fn load_data(args: &DataArgs, seed: u64) -> CliResult<Dataset> {
    let mut ds = match &args.data {
        Some(path) => Dataset::load(
            path,
            CsvOptions {
                has_header: !args.no_header,
                id_column: !args.no_id_column,
            },
        )?,
        None => toy_dataset(TOY_ROWS, TOY_T_IN, seed)?,
    };
    if ds.tags().iter().any(|&t| t != SplitTag::Unassigned) {
        return Ok(ds);
    }
    let pos = ds.positives();
    let neg = ds.len() - pos;
    let published = SplitPlan::PUBLISHED;
    let fits_published = pos >= published.train_pos + published.test_pos && neg >= published.train_neg + published.test_neg;
    let plan = match args.split {
        SplitMode::Published => published,
        SplitMode::Auto if args.data.is_some() && fits_published => published,
        _ => SplitPlan::proportional(pos, neg, args.test_fraction),
    };
    ds.split(plan, seed)?;
    Ok(ds)
}

pub fn train(a: TrainArgs) -> CliResult<()> {
    let preset = a.preset.unwrap_or(if a.data.toy { Preset::Toy } else { Preset::Full });
    let file = match &a.config {
        Some(p) => read_config_file(p)?,
        None => Vec::new(),
    };
    let (mut mcfg, tcfg, explicit_t_in) = merge(preset, &file, a.data.seed, &a.model, &a.train)?;
    validate_data_args(&a.data)?;
    let log_path = a.log.clone().unwrap_or_else(|| with_extension(&a.out, "log"));
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_extension(&a.out, "metrics"));
    for p in [&a.out, &log_path, &metrics_path] {
        check_output(p)?;
    }

    let ds = load_data(&a.data, tcfg.seed)?;
    if explicit_t_in && mcfg.t_in != ds.t_in() {
        return Err(CliError::data(format!(
            "config sets t_in = {} but the data has {} samples per row",
            mcfg.t_in,
            ds.t_in()
        )));
    }
    mcfg.t_in = ds.t_in();
    let model = EenedModel::init(mcfg)?;
    let (train_pos, train_neg) = ds.class_counts(SplitTag::Train);
    let (test_pos, test_neg) = ds.class_counts(SplitTag::Test);
    eprintln!(
        "training {} parameters on {} rows ({train_pos} pos / {train_neg} neg), evaluating on {} rows ({test_pos} pos / {test_neg} neg), {} execution",
        model.param_count(),
        train_pos + train_neg,
        test_pos + test_neg,
        tcfg.execution
    );

    let mut log = String::new();
    let out = train_with(model, &ds, &tcfg, |entry| {
        println!("{entry}");
        let _ = std::io::stdout().flush();
        log.push_str(&format!("{entry}\n"));
    })
    .map_err(|e| match e {
        eened::Error::Data(_) | eened::Error::Config(_) => CliError::from(e),
        other => CliError::runtime(other),
    })?;
    let best = format!(
        "best epoch={} acc={:.6} f1_pos={:.6} f1_neg={:.6}",
        out.best.epoch, out.best.metrics.accuracy, out.best.metrics.f1_positive, out.best.metrics.f1_negative
    );
    println!("{best}");
    log.push_str(&best);
    log.push('\n');

    save_checkpoint(&out.model, &a.out).map_err(|e| CliError::runtime(format!("writing {}: {e}", a.out.display())))?;
    write_output(&log_path, log.as_bytes())?;
    write_output(&metrics_path, out.best.metrics.report().as_bytes())?;
    eprintln!(
        "wrote {}, {}, {}",
        a.out.display(),
        log_path.display(),
        metrics_path.display()
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult<()> {
    check_threshold(a.threshold)?;
    validate_data_args(&a.data)?;
    if let Some(p) = &a.metrics {
        check_output(p)?;
    }
    let model = load_checkpoint(&a.checkpoint)
        .map_err(|e| CliError::data(format!("{}: {e}", a.checkpoint.display())))?;
    let ds = load_data(&a.data, a.data.seed.unwrap_or(0))?;
    let (tag, name) = match a.on {
        EvalSplit::Train => (SplitTag::Train, "train"),
        EvalSplit::Test => (SplitTag::Test, "test"),
    };
    let m = evaluate_with(&model, &ds, tag, a.threshold, Execution::default())?;
    println!("split={name} rows={} threshold={}", m.total(), a.threshold);
    println!("{m}");
    if let Some(p) = &a.metrics {
        write_output(p, m.report().as_bytes())?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    if !(a.tolerance > 0.0) || !(a.step > 0.0) {
        return Err(CliError::config("tolerance and step must be positive"));
    }
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            CliError::config(format!("unknown op `{name}` (expected one of {})", names.join(", ")))
        })?),
        None => None,
    };
    let opts = GradcheckOptions {
        step: a.step,
        tolerance: a.tolerance,
        max_coords: (a.max_coords > 0).then_some(a.max_coords),
        seed: a.seed,
        fault,
    };
    let reports = run_suite(a.module.as_deref(), &opts)?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.label.as_str()).collect();
    if failed.is_empty() {
        println!("gradcheck passed ({} checks)", reports.len());
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_GRADCHECK,
            message: format!("gradcheck failed for: {}", failed.join(", ")),
        })
    }
}

fn parse_features(text: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::data(format!("invalid feature value `{s}`")))
        })
        .collect()
}

pub fn predict(a: PredictArgs) -> CliResult<()> {
    check_threshold(a.threshold)?;
    let features = match (&a.features, &a.csv) {
        (Some(text), None) => parse_features(text)?,
        (None, Some(path)) if a.bare => {
            let text = fs::read_to_string(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            let line = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .nth(a.row)
                .ok_or_else(|| CliError::data(format!("{} has no row {}", path.display(), a.row)))?;
            parse_features(line)?
        }
        (None, Some(path)) => {
            let records = parse_csv(path, CsvOptions::default())?;
            records
                .into_iter()
                .nth(a.row)
                .ok_or_else(|| CliError::data(format!("{} has no row {}", path.display(), a.row)))?
                .features
        }
        _ => return Err(CliError::config("one of --features or --csv is required")),
    };
    let model = load_checkpoint(&a.checkpoint)
        .map_err(|e| CliError::data(format!("{}: {e}", a.checkpoint.display())))?;
    if features.len() != model.config.t_in {
        return Err(CliError::data(format!(
            "expected {} feature values, got {}",
            model.config.t_in,
            features.len()
        )));
    }
    let p = model.predict(&model.normalize_input(&features)).map_err(CliError::runtime)?;
    println!("probability={p:.6} label={}", u8::from(p >= a.threshold));
    Ok(())
}

pub fn ingest(a: IngestArgs) -> CliResult<()> {
    validate_data_args(&a.data)?;
    check_output(&a.out)?;
    let ds = load_data(&a.data, a.data.seed.unwrap_or(0))?;
    save_cache(&ds, &a.out).map_err(|e| CliError::runtime(format!("writing {}: {e}", a.out.display())))?;
    let (train_pos, train_neg) = ds.class_counts(SplitTag::Train);
    let (test_pos, test_neg) = ds.class_counts(SplitTag::Test);
    println!(
        "rows={} t_in={} train={} test={} test_neg={} train_pos={train_pos} test_pos={test_pos}",
        ds.len(),
        ds.t_in(),
        train_pos + train_neg,
        test_pos + test_neg,
        test_neg
    );
    Ok(())
}
