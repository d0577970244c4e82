//! The four experiment commands. Each writes only inside `output_dir`.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sar_core::data::{self, LongTailDataset};
use sar_core::metrics::{self, ConsistencyScore, MetricsReport};
use sar_core::train::{self, TrainOutput};
use sar_core::{generate_anchors, AnchorSet, Mode, Tensor2D};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const CONFIG_ECHO: &str = "config.txt";
pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const ANCHORS_CSV: &str = "anchors.csv";
pub const ANCHOR_COSINE_CSV: &str = "anchor_cosine.csv";
pub const ANCHOR_SUMMARY_JSON: &str = "anchor_summary.json";
pub const SEMANTIC_ANCHORS_CSV: &str = "semantic_anchors.csv";
pub const PROTOTYPES_CSV: &str = "prototypes.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const CONSISTENCY_JSON: &str = "consistency.json";
pub const DELTAS_CSV: &str = "deltas_sar_minus_ce.csv";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(CliError::io(format!("cannot write {}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(CliError::io(format!("cannot create {}", path.display())))
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `class_id,<extra>,dim_0..` rows.
fn matrix_csv(m: &Tensor2D, extra: Option<(&str, &[bool])>) -> String {
    let mut s = String::from("class_id");
    if let Some((name, _)) = extra {
        let _ = write!(s, ",{name}");
    }
    for k in 0..m.cols() {
        let _ = write!(s, ",dim_{k}");
    }
    s.push('\n');
    for r in 0..m.rows() {
        let _ = write!(s, "{r}");
        if let Some((_, flags)) = extra {
            let _ = write!(s, ",{}", flags[r]);
        }
        for v in m.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<(), CliError> {
    create_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join(CONFIG_ECHO), cfg.echo())
}

// ---------------------------------------------------------------- gen-data

#[derive(Clone, Debug)]
pub struct GenDataOutcome {
    pub train_path: PathBuf,
    pub test_path: PathBuf,
    pub class_counts: Vec<usize>,
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<GenDataOutcome, CliError> {
    let (train, test) = data::train_test(&cfg.data, cfg.test_per_class)?;
    prepare_output(cfg)?;
    let train_path = cfg.output_dir.join(TRAIN_CSV);
    let test_path = cfg.output_dir.join(TEST_CSV);
    for (ds, path) in [(&train, &train_path), (&test, &test_path)] {
        data::save_csv(ds, path).map_err(|e| match e {
            sar_core::Error::Io(source) => CliError::Io {
                context: format!("cannot write {}", path.display()),
                source,
            },
            other => other.into(),
        })?;
    }
    Ok(GenDataOutcome {
        train_path,
        test_path,
        class_counts: train.class_counts,
    })
}

/// Loads `data_dir` when set, otherwise samples the configured mixture.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(LongTailDataset, LongTailDataset), CliError> {
    let Some(dir) = &cfg.data_dir else {
        return Ok(data::train_test(&cfg.data, cfg.test_per_class)?);
    };
    let load = |name: &str| {
        let path = dir.join(name);
        data::load_csv(&path).map_err(|e| match e {
            sar_core::Error::Io(source) => CliError::Io {
                context: format!("cannot read {}", path.display()),
                source,
            },
            other => other.into(),
        })
    };
    let (train, test) = (load(TRAIN_CSV)?, load(TEST_CSV)?);
    if train.spec != cfg.data {
        return Err(CliError::Config(format!(
            "{} was generated with a different data spec; pass the same data keys \
             (classes, input_dim, n_max, beta, class_separation, noise_sigma, data_seed)",
            dir.display()
        )));
    }
    Ok((train, test))
}

pub fn anchor_set(cfg: &ExperimentConfig) -> Result<AnchorSet, CliError> {
    Ok(generate_anchors(
        cfg.anchor_source,
        cfg.data.classes,
        cfg.feature_dim,
        cfg.anchor_seed,
    )?)
}

// ---------------------------------------------------------------- anchors

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnchorSummary {
    pub source: String,
    pub classes: usize,
    pub dim: usize,
    pub seed: u64,
    pub min_cosine: f64,
    pub max_cosine: f64,
    pub mean_cosine: f64,
}

pub fn anchors(cfg: &ExperimentConfig) -> Result<AnchorSummary, CliError> {
    let set = anchor_set(cfg)?;
    let cos = set.pairwise_cosine()?;
    let c = set.classes();
    let off: Vec<f64> = (0..c)
        .flat_map(|i| (0..c).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| cos.get(i, j))
        .collect();
    let summary = AnchorSummary {
        source: set.source().to_string(),
        classes: c,
        dim: set.dim(),
        seed: set.seed(),
        min_cosine: off.iter().copied().fold(f64::INFINITY, f64::min),
        max_cosine: off.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_cosine: off.iter().sum::<f64>() / off.len() as f64,
    };
    prepare_output(cfg)?;
    write_file(
        &cfg.output_dir.join(ANCHORS_CSV),
        matrix_csv(set.matrix(), None),
    )?;
    let mut cos_csv = String::from("class_id");
    for j in 0..c {
        let _ = write!(cos_csv, ",c_{j}");
    }
    cos_csv.push('\n');
    for i in 0..c {
        let _ = write!(cos_csv, "{i}");
        for v in cos.row(i) {
            let _ = write!(cos_csv, ",{v}");
        }
        cos_csv.push('\n');
    }
    write_file(&cfg.output_dir.join(ANCHOR_COSINE_CSV), cos_csv)?;
    write_file(&cfg.output_dir.join(ANCHOR_SUMMARY_JSON), json(&summary))?;
    Ok(summary)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub mode: Mode,
    pub seed: u64,
    pub dir: PathBuf,
    pub report: MetricsReport,
}

/// Rows used for the dependency matrix: semantic anchors for `sar`, the
/// prototype bank for `proto`, test-feature centroids otherwise.
fn representation(
    out: &TrainOutput,
    test: &LongTailDataset,
) -> (Vec<Option<Vec<f64>>>, &'static str) {
    if let Some(s) = &out.semantic {
        let rows = (0..s.classes())
            .map(|c| s.initialized[c].then(|| s.anchors_hat.row(c).to_vec()))
            .collect();
        return (rows, "semantic_anchors");
    }
    if let Some(b) = &out.bank {
        let rows = (0..b.classes())
            .map(|c| b.present[c].then(|| b.prototypes.row(c).to_vec()))
            .collect();
        return (rows, "prototype_bank");
    }
    (
        metrics::centroids(&out.eval.features, &test.y, test.classes()),
        "test_centroids",
    )
}

/// Trains one `(mode, seed)` run and writes its artifacts into `dir`.
pub fn run_one(
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
    train_ds: &LongTailDataset,
    test_ds: &LongTailDataset,
    anchors: Option<&AnchorSet>,
    dir: &Path,
) -> Result<RunOutcome, CliError> {
    let mut tc = cfg.train_config(mode, seed);
    if matches!(mode, Mode::Cr | Mode::Sar) {
        tc.anchors = anchors.cloned();
    }
    tc.validate(train_ds.classes())?;

    let mut echo_cfg = cfg.clone();
    echo_cfg.mode = mode;
    echo_cfg.seed = seed;
    echo_cfg.output_dir = dir.to_path_buf();
    create_dir(dir)?;
    write_file(&dir.join(CONFIG_ECHO), echo_cfg.echo())?;
    if let Some(a) = &tc.anchors {
        write_file(&dir.join(ANCHORS_CSV), matrix_csv(a.matrix(), None))?;
    }

    let log_path = dir.join(TRAIN_LOG);
    let file = File::create(&log_path).map_err(CliError::io(format!(
        "cannot create {}",
        log_path.display()
    )))?;
    let mut log = BufWriter::new(file);
    let result = train::train_observed(tc, train_ds, test_ds, |line| {
        log.write_all(line.as_bytes())?;
        log.write_all(b"\n")?;
        Ok(())
    });
    // Keep whatever was logged, also when training aborted.
    log.flush()
        .map_err(CliError::io(format!("cannot write {}", log_path.display())))?;
    let out = result?;

    let (rows, source) = representation(&out, test_ds);
    let report = metrics::report(
        &out.eval.predictions,
        &test_ds.y,
        &out.eval.features,
        &train_ds.class_counts,
        &rows,
        source,
    );
    write_file(&dir.join(METRICS_JSON), json(&report))?;
    if let Some(s) = &out.semantic {
        write_file(
            &dir.join(SEMANTIC_ANCHORS_CSV),
            matrix_csv(&s.anchors_hat, Some(("initialized", &s.initialized))),
        )?;
    }
    if let Some(b) = &out.bank {
        write_file(
            &dir.join(PROTOTYPES_CSV),
            matrix_csv(&b.prototypes, Some(("present", &b.present))),
        )?;
    }
    Ok(RunOutcome {
        mode,
        seed,
        dir: dir.to_path_buf(),
        report,
    })
}

pub fn train(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let (train_ds, test_ds) = datasets(cfg)?;
    let anchors = match cfg.mode {
        Mode::Cr | Mode::Sar => Some(anchor_set(cfg)?),
        Mode::Ce | Mode::Proto => None,
    };
    create_dir(&cfg.output_dir)?;
    run_one(
        cfg,
        cfg.mode,
        cfg.seed,
        &train_ds,
        &test_ds,
        anchors.as_ref(),
        &cfg.output_dir,
    )
}

// ---------------------------------------------------------------- compare

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: String,
    pub runs: usize,
    /// `(mean, sample sd)` per metric; sd is `None` for a single run.
    pub overall: (f64, Option<f64>),
    pub head: (f64, Option<f64>),
    pub body: (f64, Option<f64>),
    pub tail: (f64, Option<f64>),
    pub compactness: (f64, Option<f64>),
    pub separability: (f64, Option<f64>),
    pub consistency: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeConsistency {
    pub mode: String,
    pub dependency_source: String,
    pub seeds: Vec<u64>,
    pub mean: Option<f64>,
    /// `(run a, run b, correlation)` with runs indexed into `seeds`.
    pub pairs: Vec<(usize, usize, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedDelta {
    pub seed: u64,
    pub overall: f64,
    pub head: Option<f64>,
    pub body: Option<f64>,
    pub tail: Option<f64>,
    pub compactness: f64,
    pub separability: f64,
}

#[derive(Clone, Debug)]
pub struct CompareOutcome {
    pub runs: Vec<RunOutcome>,
    pub summary: Vec<ModeSummary>,
    pub consistency: Vec<ModeConsistency>,
    pub deltas: Vec<PairedDelta>,
}

fn mean_sd(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1)
        .then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, sd)
}

fn run_dir(cfg: &ExperimentConfig, mode: Mode, index: usize, seed: u64) -> PathBuf {
    cfg.output_dir
        .join("runs")
        .join(mode.to_string())
        .join(format!("{index:02}_seed{seed}"))
}

fn sub(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

pub fn compare(cfg: &ExperimentConfig) -> Result<CompareOutcome, CliError> {
    if cfg.consistency && cfg.seeds.len() < 2 {
        return Err(CliError::Config(
            "cross-seed consistency needs at least two seeds (set consistency = false)".into(),
        ));
    }
    let (train_ds, test_ds) = datasets(cfg)?;
    let anchors = if cfg.modes.iter().any(|m| matches!(m, Mode::Cr | Mode::Sar)) {
        Some(anchor_set(cfg)?)
    } else {
        None
    };
    prepare_output(cfg)?;

    let tasks: Vec<(Mode, usize, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().enumerate().map(move |(i, &s)| (m, i, s)))
        .collect();
    let slots: Vec<Mutex<Option<Result<RunOutcome, CliError>>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let t = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(mode, i, seed)) = tasks.get(t) else {
            break;
        };
        let dir = run_dir(cfg, mode, i, seed);
        let r = run_one(cfg, mode, seed, &train_ds, &test_ds, anchors.as_ref(), &dir);
        *slots[t].lock().expect("unpoisoned") = Some(r);
    };
    std::thread::scope(|s| {
        for _ in 1..cfg.jobs.min(tasks.len()) {
            s.spawn(worker);
        }
        worker();
    });
    let runs: Vec<RunOutcome> = slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every task ran"))
        .collect::<Result<_, _>>()?;

    let mut table = String::from("mode,seed,overall,head,body,tail,compactness,separability\n");
    for r in &runs {
        let m = &r.report;
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            r.mode,
            r.seed,
            m.overall_acc,
            opt(m.head_acc),
            opt(m.body_acc),
            opt(m.tail_acc),
            m.compactness,
            m.separability
        );
    }
    write_file(&cfg.output_dir.join(COMPARISON_CSV), table)?;

    let mut summary = Vec::new();
    let mut consistency = Vec::new();
    for &mode in &cfg.modes {
        let rs: Vec<&RunOutcome> = runs.iter().filter(|r| r.mode == mode).collect();
        let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            let xs: Vec<f64> = rs.iter().filter_map(|r| f(&r.report)).collect();
            mean_sd(&xs)
        };
        let score = cfg.consistency.then(|| {
            let mats: Vec<_> = rs.iter().map(|r| r.report.dependency.clone()).collect();
            metrics::cross_seed_consistency(&mats)
        });
        if let Some(ConsistencyScore { mean, pairs }) = &score {
            consistency.push(ModeConsistency {
                mode: mode.to_string(),
                dependency_source: rs[0].report.dependency_source.clone(),
                seeds: cfg.seeds.clone(),
                mean: *mean,
                pairs: pairs.clone(),
            });
        }
        summary.push(ModeSummary {
            mode: mode.to_string(),
            runs: rs.len(),
            overall: col(&|m| Some(m.overall_acc)),
            head: col(&|m| m.head_acc),
            body: col(&|m| m.body_acc),
            tail: col(&|m| m.tail_acc),
            compactness: col(&|m| Some(m.compactness)),
            separability: col(&|m| Some(m.separability)),
            consistency: score.and_then(|s| s.mean),
        });
    }
    let mut s = String::from("mode,runs");
    for name in [
        "overall",
        "head",
        "body",
        "tail",
        "compactness",
        "separability",
    ] {
        let _ = write!(s, ",{name}_mean,{name}_sd");
    }
    s.push_str(",consistency\n");
    for m in &summary {
        let _ = write!(s, "{},{}", m.mode, m.runs);
        for (mean, sd) in [
            m.overall,
            m.head,
            m.body,
            m.tail,
            m.compactness,
            m.separability,
        ] {
            let _ = write!(s, ",{mean},{}", opt(sd));
        }
        let _ = writeln!(s, ",{}", opt(m.consistency));
    }
    write_file(&cfg.output_dir.join(SUMMARY_CSV), s)?;
    if cfg.consistency {
        write_file(&cfg.output_dir.join(CONSISTENCY_JSON), json(&consistency))?;
    }

    let mut deltas = Vec::new();
    if cfg.modes.contains(&Mode::Sar) && cfg.modes.contains(&Mode::Ce) {
        let of = |mode| runs.iter().filter(move |r: &&RunOutcome| r.mode == mode);
        for (a, b) in of(Mode::Sar).zip(of(Mode::Ce)) {
            let (x, y) = (&a.report, &b.report);
            deltas.push(PairedDelta {
                seed: a.seed,
                overall: x.overall_acc - y.overall_acc,
                head: sub(x.head_acc, y.head_acc),
                body: sub(x.body_acc, y.body_acc),
                tail: sub(x.tail_acc, y.tail_acc),
                compactness: x.compactness - y.compactness,
                separability: x.separability - y.separability,
            });
        }
        let mut s = String::from("seed,overall,head,body,tail,compactness,separability\n");
        for d in &deltas {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                d.seed,
                d.overall,
                opt(d.head),
                opt(d.body),
                opt(d.tail),
                d.compactness,
                d.separability
            );
        }
        write_file(&cfg.output_dir.join(DELTAS_CSV), s)?;
    }

    Ok(CompareOutcome {
        runs,
        summary,
        consistency,
        deltas,
    })
}
