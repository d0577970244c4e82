//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sar_cli::commands;
use sar_cli::{ConfigBuilder, ExperimentConfig};
use sar_core::anchors::simplex_etf;
use sar_core::data::{self, LongTailDataset};
use sar_core::grad::finite_diff_check;
use sar_core::proto::compute_prototypes;
use sar_core::sar::compute_reweights;
use sar_core::train::{step_objective, TrainLog};
use sar_core::{generate_anchors, AnchorSource, GmmSpec, Mode, Tensor2D, Trainer};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn config(dir: &Path) -> ExperimentConfig {
    ConfigBuilder::new()
        .set("output_dir", dir.to_str().expect("utf-8 path"))
        .build()
        .expect("default config")
}

// 1 ------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let spec = GmmSpec {
        classes: 3,
        input_dim: 4,
        n_max: 4,
        beta: 1.0,
        seed: 11,
        ..GmmSpec::default()
    };
    let ds = data::sample_gmm(&spec).map_err(|e| e.to_string())?;
    check(
        ds.len() == 12,
        format!("toy instance has {} samples", ds.len()),
    )?;
    let anchors = generate_anchors(AnchorSource::Nd, 3, 4, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut details = Vec::new();
    for mode in Mode::ALL {
        let mut cfg = config(Path::new("unused")).train_config(mode, 3);
        cfg.hidden = vec![6];
        cfg.feature_dim = 4;
        cfg.head_hidden = Some(5);
        cfg.batch_size = 12;
        cfg.log_anchors = false;
        // A low gate so every class has a semantic anchor after one step
        // (the zero classifier starts all confidences at 1/3).
        cfg.sar.delta = 0.1;
        if matches!(mode, Mode::Cr | Mode::Sar) {
            cfg.anchors = Some(anchors.clone());
        }
        let mut trainer = Trainer::new(cfg, &ds).map_err(|e| e.to_string())?;
        trainer.step().map_err(|e| e.to_string())?;

        let random = |t: &Tensor2D, rng: &mut ChaCha8Rng| {
            let data = (0..t.data().len())
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect();
            Tensor2D::from_vec(t.rows(), t.cols(), data).expect("shape")
        };
        let model_p: Vec<Tensor2D> = trainer
            .model()
            .tensors()
            .into_iter()
            .map(|t| random(t, &mut rng))
            .collect();
        let head_p: Vec<Tensor2D> = trainer
            .head()
            .map(|h| {
                h.mlp
                    .tensors()
                    .into_iter()
                    .map(|t| random(t, &mut rng))
                    .collect()
            })
            .unwrap_or_default();
        trainer
            .load_params(&model_p, &head_p)
            .map_err(|e| e.to_string())?;

        let frozen = trainer
            .frozen_step(&ds.x, &ds.y)
            .map_err(|e| e.to_string())?;
        if let Some((_, mask)) = &frozen.reg_targets {
            check(
                mask.iter().any(|&m| m),
                format!("{mode}: regularizer mask is empty"),
            )?;
        }
        if let Some((w, _)) = &frozen.aux {
            check(
                w.iter().any(|&v| v > 0.0),
                format!("{mode}: all aux weights are zero"),
            )?;
        }
        let model = trainer.model().clone();
        let head = trainer.head().cloned();
        let a = trainer.config().anchors.clone();
        let (_, analytic) =
            step_objective(&model, head.as_ref(), a.as_ref(), &ds.x, &ds.y, &frozen)
                .map_err(|e| e.to_string())?;
        let params: Vec<Tensor2D> = model_p.iter().chain(&head_p).cloned().collect();
        let nm = model_p.len();
        let err = finite_diff_check(
            |p| {
                let mut m = model.clone();
                m.load(&p[..nm])?;
                let mut h = head.clone();
                if let Some(h) = &mut h {
                    for (dst, src) in h.mlp.tensors_mut().into_iter().zip(&p[nm..]) {
                        *dst = src.clone();
                    }
                }
                Ok(step_objective(&m, h.as_ref(), a.as_ref(), &ds.x, &ds.y, &frozen)?.0)
            },
            &params,
            &analytic,
            1e-4,
        )
        .map_err(|e| e.to_string())?;
        check(
            err <= 1e-4,
            format!("{mode}: max relative error {err:.3e} > 1e-4"),
        )?;
        details.push(format!("{mode} {err:.1e}"));
    }
    Ok(format!("max rel err: {}", details.join(", ")))
}

// 2 ------------------------------------------------------------------------

fn anchor_geometry() -> Outcome {
    let mut worst_mes = 0.0f64;
    for (c, d) in [(2, 2), (2, 16), (3, 3), (3, 16), (10, 10), (10, 16)] {
        let a = generate_anchors(AnchorSource::Mes, c, d, 7).map_err(|e| e.to_string())?;
        let cos = a.pairwise_cosine().map_err(|e| e.to_string())?;
        let target = -1.0 / (c as f64 - 1.0);
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    worst_mes = worst_mes.max((cos.get(i, j) - target).abs());
                }
            }
        }
    }
    check(
        worst_mes <= 1e-9,
        format!("MES cosine off by {worst_mes:.3e}"),
    )?;
    let etf = simplex_etf(10);
    let etf_cos = sar_core::anchors::pairwise_cosine(&etf).map_err(|e| e.to_string())?;
    check(
        (etf_cos.get(0, 1) + 1.0 / 9.0).abs() <= 1e-12,
        "raw ETF cosine is not -1/9",
    )?;

    let mut worst_om = 0.0f64;
    for (c, d) in [(3, 4), (10, 16), (16, 16)] {
        let a = generate_anchors(AnchorSource::Om, c, d, 9).map_err(|e| e.to_string())?;
        let gram = a
            .matrix()
            .matmul(&a.matrix().transpose())
            .map_err(|e| e.to_string())?;
        for i in 0..c {
            for j in 0..c {
                let want = if i == j { 1.0 } else { 0.0 };
                worst_om = worst_om.max((gram.get(i, j) - want).abs());
            }
        }
    }
    check(
        worst_om <= 1e-9,
        format!("OM Gram off identity by {worst_om:.3e}"),
    )?;

    for source in [AnchorSource::Nd, AnchorSource::Om, AnchorSource::Mes] {
        let a = generate_anchors(source, 10, 16, 42).map_err(|e| e.to_string())?;
        let b = generate_anchors(source, 10, 16, 42).map_err(|e| e.to_string())?;
        let same = a
            .matrix()
            .data()
            .iter()
            .zip(b.matrix().data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        check(same, format!("{source} regeneration differs"))?;
    }
    Ok(format!(
        "MES max dev {worst_mes:.1e}, OM Gram max dev {worst_om:.1e}, regeneration bitwise"
    ))
}

// 3 ------------------------------------------------------------------------

#[allow(clippy::approx_constant)] // hand-computed expectation, not log10(2)
fn reweighting() -> Outcome {
    let w = compute_reweights(&[0.95, 0.5, 0.2], 0.9);
    let want = [0.0, 0.3010, 0.6990];
    for (a, b) in w.iter().zip(want) {
        check((a - b).abs() <= 1e-4, format!("worked example gives {w:?}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cases = 2000;
    for case in 0..cases {
        let c = rng.random_range(1..=20);
        let tau = rng.random_range(0.5..0.99);
        let conf: Vec<f64> = (0..c).map(|_| rng.random_range(1e-6..1.0 - 1e-9)).collect();
        let w = compute_reweights(&conf, tau);
        check(w.len() == c, format!("case {case}: length"))?;
        let kept: Vec<usize> = (0..c).filter(|&i| conf[i] <= tau).collect();
        for i in 0..c {
            if conf[i] > tau {
                check(
                    w[i] == 0.0,
                    format!("case {case}: filtered weight {}", w[i]),
                )?;
            }
        }
        if kept.is_empty() {
            continue;
        }
        let sum: f64 = kept.iter().map(|&i| w[i]).sum();
        check(
            (sum - 1.0).abs() <= 1e-9,
            format!("case {case}: weights sum to {sum}"),
        )?;
        for &i in &kept {
            for &j in &kept {
                if conf[i] < conf[j] {
                    check(w[i] > w[j], format!("case {case}: not strictly decreasing"))?;
                }
            }
        }
    }
    Ok(format!(
        "worked example {:.4}/{:.4}/{:.4}; {cases} random cases",
        w[0], w[1], w[2]
    ))
}

// 4 ------------------------------------------------------------------------

fn ema_replay(tmp: &Path) -> Outcome {
    let cfg = config(&tmp.join("ema"));
    let run = commands::train(&cfg).map_err(|e| e.to_string())?;
    let text = fs::read_to_string(run.dir.join(commands::TRAIN_LOG)).map_err(|e| e.to_string())?;
    let log = TrainLog::from_jsonl(&text).map_err(|e| e.to_string())?;
    let (c, d) = (cfg.data.classes, cfg.feature_dim);
    let alpha = cfg.sar.alpha;
    let mut replay = vec![vec![0.0; d]; c];
    let mut init = vec![false; c];
    let mut prev: Option<Vec<Vec<f64>>> = None;
    let (mut updates, mut gated) = (0usize, 0usize);
    for r in &log.records {
        let aux = r.aux.as_ref().ok_or("sar record without aux data")?;
        let h = aux.embedded.as_ref().ok_or("embedded anchors not logged")?;
        let logged = aux
            .anchors_hat
            .as_ref()
            .ok_or("semantic anchors not logged")?;
        for k in 0..c {
            if aux.ema_conf[k] > cfg.sar.delta {
                if init[k] {
                    for (a, &x) in replay[k].iter_mut().zip(&h[k]) {
                        *a = alpha * *a + (1.0 - alpha) * x;
                    }
                } else {
                    replay[k].clone_from(&h[k]);
                    init[k] = true;
                }
                updates += 1;
            } else if let Some(p) = &prev {
                let same = p[k]
                    .iter()
                    .zip(&logged[k])
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                check(same, format!("step {}: gated class {k} changed", r.step))?;
                gated += 1;
            }
        }
        let exact = replay
            .iter()
            .flatten()
            .zip(logged.iter().flatten())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        check(
            exact,
            format!("step {}: replayed anchors differ from the log", r.step),
        )?;
        prev = Some(logged.clone());
    }
    check(updates > 0, "no EMA update happened")?;
    Ok(format!(
        "{} logged steps replayed bitwise; {updates} class updates, {gated} gated class-steps unchanged",
        log.records.len()
    ))
}

// 5 ------------------------------------------------------------------------

// Indexed loops on purpose: this is the naive reference.
#[allow(clippy::needless_range_loop)]
fn prototype_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let n = rng.random_range(1..=100);
        let c = rng.random_range(1..=10);
        let d = rng.random_range(1..=8);
        let feats: Vec<f64> = (0..n * d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let x = Tensor2D::from_vec(n, d, feats.clone()).expect("shape");
        let got = compute_prototypes(&x, &labels, c).map_err(|e| e.to_string())?;
        for class in 0..c {
            let mut count = 0usize;
            let mut sum = vec![0.0; d];
            for i in 0..n {
                if labels[i] == class {
                    count += 1;
                    for k in 0..d {
                        sum[k] += feats[i * d + k];
                    }
                }
            }
            check(
                got.present[class] == (count > 0),
                format!("case {case}: presence"),
            )?;
            check(got.counts[class] == count, format!("case {case}: count"))?;
            if count > 0 {
                for k in 0..d {
                    let want = sum[k] / count as f64;
                    check(
                        got.prototypes.get(class, k).to_bits() == want.to_bits(),
                        format!("case {case}: class {class} dim {k}"),
                    )?;
                }
            }
        }
    }
    Ok("200 random instances equal the double loop bitwise".into())
}

// 6 ------------------------------------------------------------------------

fn train_set(cfg: &ExperimentConfig) -> Result<LongTailDataset, String> {
    Ok(commands::datasets(cfg).map_err(|e| e.to_string())?.0)
}

fn degenerate_modes(tmp: &Path) -> Outcome {
    let base = config(tmp);
    let ds = train_set(&base)?;
    let anchors = commands::anchor_set(&base).map_err(|e| e.to_string())?;

    let mut ce = Trainer::new(base.train_config(Mode::Ce, 4), &ds).map_err(|e| e.to_string())?;
    let mut sc = base.train_config(Mode::Sar, 4);
    sc.sar.lambda1 = 0.0;
    sc.sar.lambda2 = 0.0;
    sc.anchors = Some(anchors.clone());
    sc.log_anchors = false;
    let mut sar = Trainer::new(sc, &ds).map_err(|e| e.to_string())?;
    let mut steps = 0;
    while !ce.is_done() {
        ce.step().map_err(|e| e.to_string())?;
        sar.step().map_err(|e| e.to_string())?;
        let same = ce
            .model()
            .tensors()
            .iter()
            .zip(sar.model().tensors())
            .all(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
        check(same, format!("parameters diverge at step {steps}"))?;
        steps += 1;
    }
    check(sar.is_done(), "sar run has a different length")?;

    let mut cc = base.train_config(Mode::Cr, 4);
    cc.anchors = Some(anchors.clone());
    let lambda2 = cc.sar.lambda2;
    let mut cr = Trainer::new(cc, &ds).map_err(|e| e.to_string())?;
    let a = anchors.matrix();
    let mut worst = 0.0f64;
    while !cr.is_done() {
        let batch = cr.peek_batch().expect("not done").to_vec();
        let x = ds.x.select_rows(&batch);
        let y: Vec<usize> = batch.iter().map(|&i| ds.y[i]).collect();
        let f = cr.model().embed(&x).map_err(|e| e.to_string())?;
        let z = cr.model().logits(&x).map_err(|e| e.to_string())?;
        let mut ce_sum = 0.0;
        let mut sq = 0.0;
        for (i, &label) in y.iter().enumerate() {
            let row = z.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            ce_sum += lse - row[label];
            sq += f
                .row(i)
                .iter()
                .zip(a.row(label))
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>();
        }
        let n = y.len() as f64;
        let expected = ce_sum / n + lambda2 * sq / (n * f.cols() as f64);
        let rec = cr.step().map_err(|e| e.to_string())?;
        let line = sar_core::train::step_line(&rec);
        let logged = TrainLog::from_jsonl(&line)
            .map_err(|e| e.to_string())?
            .records[0]
            .total;
        worst = worst.max((logged - expected).abs());
    }
    check(worst <= 1e-9, format!("cr loss deviates by {worst:.3e}"))?;
    Ok(format!(
        "sar(λ1=λ2=0) == ce bitwise over {steps} steps; cr loss max dev {worst:.1e}"
    ))
}

// 7, 8, 10 -----------------------------------------------------------------

fn tree_digest(root: &Path) -> BTreeMap<PathBuf, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, String>) {
        let mut entries: Vec<_> = fs::read_dir(dir).expect("readable").flatten().collect();
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let bytes = fs::read(&p).expect("readable");
                let digest = Sha256::digest(&bytes);
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(root).expect("inside").to_path_buf(), hex);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

struct Comparison {
    outcome: commands::CompareOutcome,
    seconds: f64,
    digest: BTreeMap<PathBuf, String>,
}

fn run_compare(dir: &Path) -> Result<Comparison, String> {
    let cfg = config(dir);
    let start = Instant::now();
    let outcome = commands::compare(&cfg).map_err(|e| e.to_string())?;
    let seconds = start.elapsed().as_secs_f64();
    Ok(Comparison {
        outcome,
        seconds,
        digest: tree_digest(dir),
    })
}

fn long_tail(cmp: &Comparison) -> Outcome {
    let o = &cmp.outcome;
    let by = |m: &str| {
        o.summary
            .iter()
            .find(|s| s.mode == m)
            .ok_or(format!("no {m} summary"))
    };
    let (sar, ce) = (by("sar")?, by("ce")?);
    check(
        o.deltas.len() >= 5,
        format!("only {} paired seeds", o.deltas.len()),
    )?;
    let tail_wins = o
        .deltas
        .iter()
        .filter(|d| d.tail.is_some_and(|t| t > 0.0))
        .count();
    let comp_wins = o.deltas.iter().filter(|d| d.compactness < 0.0).count();
    let detail = format!(
        "tail sar {:.3} vs ce {:.3} (wins {tail_wins}/{}); compactness sar {:.3} vs ce {:.3} \
         (wins {comp_wins}/{}); {:.0} s",
        sar.tail.0,
        ce.tail.0,
        o.deltas.len(),
        sar.compactness.0,
        ce.compactness.0,
        o.deltas.len(),
        cmp.seconds
    );
    let n = o.deltas.len();
    let enough = |wins: usize| wins * 5 >= n * 4;
    check(
        sar.tail.0 > ce.tail.0,
        format!("mean tail not higher: {detail}"),
    )?;
    check(
        sar.compactness.0 < ce.compactness.0,
        format!("mean compactness not lower: {detail}"),
    )?;
    check(
        enough(tail_wins) && enough(comp_wins),
        format!("too few paired wins: {detail}"),
    )?;
    check(cmp.seconds <= 600.0, format!("over budget: {detail}"))?;
    Ok(detail)
}

fn consistency(cmp: &Comparison) -> Outcome {
    let o = &cmp.outcome;
    let get = |m: &str| {
        o.consistency
            .iter()
            .find(|c| c.mode == m)
            .and_then(|c| c.mean)
            .ok_or(format!("no {m} consistency"))
    };
    let (sar, proto) = (get("sar")?, get("proto")?);
    let detail = format!(
        "sar {sar:.4} vs proto {proto:.4} over {} seeds",
        o.consistency[0].seeds.len()
    );
    check(sar >= proto, detail.clone())?;
    Ok(detail)
}

fn reproducible(first: &Comparison, dir: &Path) -> Outcome {
    fs::remove_dir_all(dir).map_err(|e| e.to_string())?;
    let second = run_compare(dir)?;
    check(!first.digest.is_empty(), "empty output tree")?;
    let differing: Vec<_> = first
        .digest
        .iter()
        .filter(|(p, h)| second.digest.get(*p) != Some(*h))
        .map(|(p, _)| p.display().to_string())
        .collect();
    check(
        first.digest.len() == second.digest.len() && differing.is_empty(),
        format!("trees differ: {differing:?}"),
    )?;
    Ok(format!(
        "{} files checksum-identical across two invocations",
        first.digest.len()
    ))
}

// 9 ------------------------------------------------------------------------

fn aux_freeze(tmp: &Path) -> Outcome {
    let cfg = config(tmp);
    let ds = train_set(&cfg)?;
    let mut tc = cfg.train_config(Mode::Sar, cfg.seed);
    tc.anchors = Some(commands::anchor_set(&cfg).map_err(|e| e.to_string())?);
    tc.log_anchors = false;
    let tau = tc.sar.tau;
    let mut t = Trainer::new(tc, &ds).map_err(|e| e.to_string())?;
    let mut frozen = Vec::new();
    while !t.is_done() {
        let before: Vec<Tensor2D> = t
            .head()
            .expect("head")
            .mlp
            .tensors()
            .into_iter()
            .cloned()
            .collect();
        let rec = t.step().map_err(|e| e.to_string())?;
        let aux = rec.aux.as_ref().ok_or("missing aux record")?;
        let all_above = aux.conf.iter().all(|&c| c > tau);
        if all_above {
            let after = t.head().expect("head").mlp.tensors();
            let same = before.iter().zip(after).all(|(a, b)| {
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
            check(same, format!("head changed on frozen step {}", rec.step))?;
        }
        frozen.push(all_above);
    }
    let total = frozen.len();
    // Earliest step from which the frozen fraction over the rest of the run
    // stays above 0.9.
    let mut from = None;
    let mut count = 0usize;
    for s in (0..total).rev() {
        count += frozen[s] as usize;
        if count as f64 / (total - s) as f64 > 0.9 {
            from = Some(s);
        }
    }
    let from = from.ok_or("frozen fraction never exceeds 0.9")?;
    let tail = &frozen[from..];
    let frac = tail.iter().filter(|&&f| f).count() as f64 / tail.len() as f64;
    let last_open = frozen.iter().rposition(|&f| !f);
    let detail = format!(
        "from step {from} of {total} the frozen fraction is {frac:.3}; last unfrozen step {last_open:?}; \
         head bit-identical on all {} frozen steps",
        frozen.iter().filter(|&&f| f).count()
    );
    check(
        from * 2 <= total,
        format!("freeze starts only in the second half: {detail}"),
    )?;
    Ok(detail)
}

// --------------------------------------------------------------------------

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &res {
        Ok(d) => println!("criterion {n:>2} [PRIMARY] {name}: PASS ({d}) [{secs:.1}s]"),
        Err(d) => println!("criterion {n:>2} [PRIMARY] {name}: FAIL ({d}) [{secs:.1}s]"),
    }
    res.is_ok()
}

fn main() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path();
    let mut ok = true;
    ok &= report(1, "gradient correctness", || {
        let start = Instant::now();
        let r = gradient_correctness()?;
        let s = start.elapsed().as_secs_f64();
        check(s < 30.0, format!("took {s:.1} s"))?;
        Ok(r)
    });
    ok &= report(2, "anchor geometry", anchor_geometry);
    ok &= report(3, "reweighting", reweighting);
    ok &= report(4, "EMA recurrence", || ema_replay(root));
    ok &= report(5, "prototype oracle", prototype_oracle);
    ok &= report(6, "degenerate-mode equivalence", || degenerate_modes(root));

    let cmp_dir = root.join("compare");
    let cmp = run_compare(&cmp_dir);
    ok &= report(7, "long-tail direction", || {
        long_tail(cmp.as_ref().map_err(Clone::clone)?)
    });
    ok &= report(8, "cross-seed consistency", || {
        consistency(cmp.as_ref().map_err(Clone::clone)?)
    });
    ok &= report(9, "aux freeze", || aux_freeze(root));
    ok &= report(10, "reproducibility", || {
        reproducible(cmp.as_ref().map_err(Clone::clone)?, &cmp_dir)
    });

    if !ok {
        println!("acceptance: FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
