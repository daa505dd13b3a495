//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any of them does.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use waveunetd::disc::{DiscOutput, WaveUNet, WaveUNetConfig};
use waveunetd::ensemble::{Ensemble, EnsembleConfig};
use waveunetd::gradcheck;
use waveunetd::kernels;
use waveunetd::losses::{adv_loss_d_value, adv_loss_g_value, feature_matching_value};
use waveunetd::train::metrics::{read_metrics, trailing_mean};
use waveunetd::train::trainer::METRICS_FILE;
use waveunetd::train::{adamw_step, benchmark_disc, AdamState, AdamWHyper, TrainConfig, Trainer};
use waveunetd::{Shape, Tensor3};

type Outcome = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn cli(args: &[&str]) -> (String, Duration) {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_waveunetd"))
        .args(args)
        .output()
        .expect("spawn cli");
    let took = start.elapsed();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (String::from_utf8_lossy(&out.stdout).trim().to_string(), took)
}

fn param_count() -> Outcome {
    let (text, took) = cli(&["params", "--model", "waveunet"]);
    let n: f64 = text.parse().map_err(|e| format!("{text:?}: {e}"))?;
    let api = WaveUNet::<f32>::new(WaveUNetConfig::default(), 0).unwrap().param_count();
    let rel = n / 4.9e6 - 1.0;
    ensure(
        rel.abs() <= 0.05 && api as f64 == n && took < Duration::from_secs(1),
        format!("{n} params ({:+.2}% vs 4.9M), {:.3} s", 100.0 * rel, took.as_secs_f64()),
    )
}

fn ensemble_count() -> Outcome {
    let (text, took) = cli(&["params", "--model", "ensemble"]);
    let n: f64 = text.parse().map_err(|e| format!("{text:?}: {e}"))?;
    let w = WaveUNet::<f32>::new(WaveUNetConfig::default(), 0).unwrap().param_count() as f64;
    let rel = n / 70.7e6 - 1.0;
    let ratio = n / w;
    ensure(
        rel.abs() <= 0.02 && (13.0..=16.0).contains(&ratio) && took < Duration::from_secs(1),
        format!(
            "{n} params ({:+.2}% vs 70.7M), ratio {ratio:.2}, {:.3} s",
            100.0 * rel,
            took.as_secs_f64()
        ),
    )
}

fn speed() -> Outcome {
    let start = Instant::now();
    let w = WaveUNet::<f32>::new(WaveUNetConfig::default(), 0).unwrap();
    let e = Ensemble::<f32>::new(EnsembleConfig::default(), 0).unwrap();
    let rw = benchmark_disc(&w, 16, 8192, 1, 3, 0).map_err(|e| e.to_string())?;
    let re = benchmark_disc(&e, 16, 8192, 1, 3, 0).map_err(|e| e.to_string())?;
    let ratio = re.median / rw.median;
    let took = start.elapsed();
    ensure(
        ratio > 1.3 && took < Duration::from_secs(300),
        format!(
            "waveunet {:.3} s, ensemble {:.3} s, ratio {ratio:.2}, {:.0} s total",
            rw.median,
            re.median,
            took.as_secs_f64()
        ),
    )
}

fn resolution() -> Outcome {
    let d = WaveUNet::<f32>::new(WaveUNetConfig::default(), 0).unwrap();
    let mut seen = Vec::new();
    for time in [256, 4096, 8192] {
        let out = d.infer(&Tensor3::zeros(Shape::new(1, 1, time))).map_err(|e| e.to_string())?;
        let got = out.score_map.shape().time;
        if got != time {
            return Err(format!("input {time} gave score map {got}"));
        }
        seen.push(got);
    }
    Ok(format!("score map lengths {seen:?}"))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let report = gradcheck::run_suite(0).map_err(|e| e.to_string())?;
    let worst = report.worst().map(|r| r.name.clone()).unwrap_or_default();
    let took = start.elapsed();
    ensure(
        report.max_rel_err() < 1e-4 && took < Duration::from_secs(120),
        format!(
            "{} checks, max rel err {:.2e} ({worst}), {:.1} s",
            report.results.len(),
            report.max_rel_err(),
            took.as_secs_f64()
        ),
    )
}

fn global_norm() -> Outcome {
    let (zero, _) = kernels::global_norm(&Tensor3::<f64>::zeros(Shape::new(1, 1, 8)));
    if zero.data().iter().any(|&v| v != 0.0) {
        return Err("zero input gave nonzero output".into());
    }
    let (y, _) = kernels::global_norm(&Tensor3::from_signal(&[3.0f64, 4.0]));
    if (y.data()[0] - 0.848528).abs() > 1e-5 || (y.data()[1] - 1.131371).abs() > 1e-5 {
        return Err(format!("[3, 4] -> {:?}", y.data()));
    }
    // unit RMS input passes through
    let unit = Tensor3::from_signal(&[1.0f64, -1.0, 1.0, -1.0]);
    let (same, _) = kernels::global_norm(&unit);
    if same.data().iter().zip(unit.data()).any(|(a, b)| (a - b).abs() > 1e-5) {
        return Err(format!("unit RMS changed to {:?}", same.data()));
    }
    let x = Tensor3::from_signal(&[0.3f64, -1.2, 2.5, 0.0, -0.7, 1.1]);
    let (base, _) = kernels::global_norm(&x);
    for c in [0.5, 2.0, 100.0] {
        let (s, _) = kernels::global_norm(&x.map(|v| v * c));
        let dev = s.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if dev > 1e-5 {
            return Err(format!("scale {c} moved output by {dev:e}"));
        }
    }
    Ok(format!("[3, 4] -> [{:.6}, {:.6}]", y.data()[0], y.data()[1]))
}

fn constant_output(v: f64) -> DiscOutput<f64> {
    DiscOutput {
        score_map: Tensor3::full(Shape::new(2, 1, 16), v),
        features: Vec::new(),
    }
}

fn loss_oracles() -> Outcome {
    let d = |r: f64, f: f64| adv_loss_d_value(&constant_output(r), &constant_output(f)).unwrap();
    let g = |f: f64| adv_loss_g_value(&constant_output(f));
    let got = [d(1.0, 0.0), d(0.5, 0.5), d(0.0, 1.0), g(0.5), g(0.0)];
    let want = [0.0, 0.5, 2.0, 0.25, 1.0];
    if got != want {
        return Err(format!("adversarial losses {got:?}, expected {want:?}"));
    }
    let feats = vec![
        Tensor3::new(Shape::new(1, 2, 3), vec![0.1f64, -2.0, 3.0, 0.5, 0.0, 1.0]).unwrap(),
        Tensor3::full(Shape::new(1, 1, 4), 0.7),
    ];
    let identity = feature_matching_value(&feats, &feats).unwrap();
    let one = feature_matching_value(
        &[Tensor3::full(Shape::new(1, 1, 2), 1.0f64)],
        &[Tensor3::zeros(Shape::new(1, 1, 2))],
    )
    .unwrap();
    ensure(
        identity == 0.0 && one == 1.0,
        format!("adversarial {got:?}, feature matching identity {identity}, [1,1] vs [0,0] {one}"),
    )
}

/// Plain scalar AdamW, written out term by term.
fn reference_adamw(w0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, wd: f64) -> Vec<f64> {
    let (mut w, mut m, mut v) = (w0, 0.0f64, 0.0f64);
    let mut trace = Vec::new();
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        w -= lr * wd * w;
        w -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        trace.push(w);
    }
    trace
}

fn optimizer() -> Outcome {
    let hyper = AdamWHyper {
        lr: 2e-4,
        beta1: 0.8,
        beta2: 0.99,
        weight_decay: 0.01,
    };
    let starts = [1.0f64, -0.4, 2.5];
    let grads = [[1.0f64, -0.3, 0.02], [0.5, 0.9, -1.5], [-2.0, 0.0, 0.7]];
    let mut params = vec![Tensor3::from_signal(&starts)];
    let mut state = AdamState::zeros_like(&params);
    let mut worst = 0.0f64;
    let mut first = f64::NAN;
    for (step, g) in grads.iter().enumerate() {
        adamw_step(&mut params, &[g.to_vec()], &mut state, hyper).map_err(|e| e.to_string())?;
        if step == 0 {
            first = params[0].data()[0];
        }
        for (i, &w0) in starts.iter().enumerate() {
            let per_step: Vec<f64> = grads.iter().map(|gs| gs[i]).collect();
            let r = reference_adamw(w0, &per_step[..=step], 2e-4, 0.8, 0.99, 0.01);
            worst = worst.max((params[0].data()[i] - r[step]).abs());
        }
    }
    ensure(
        worst <= 1e-12 && (first - 0.999798).abs() <= 1e-9,
        format!("max deviation {worst:.1e} over 3 steps, first step w' = {first:.9}"),
    )
}

fn smoke_run() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let config = TrainConfig::desk();
    let steps = config.steps;
    let mut trainer = Trainer::new(config).map_err(|e| e.to_string())?;
    let summary = trainer.run(Some(dir.path()), false).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let records = read_metrics(dir.path().join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let finite = records.iter().all(|r| r.all_finite());
    let mel: Vec<f64> = records.iter().map(|r| r.g_mel).collect();
    let early = trailing_mean(&mel, 50, 50);
    let late = trailing_mean(&mel, mel.len(), 50);
    ensure(
        records.len() as u64 == steps
            && finite
            && late < 0.5 * early
            && summary.saturation_tripped_at.is_none()
            && took < Duration::from_secs(30 * 60),
        format!(
            "{} steps, finite {finite}, g_mel {early:.3} -> {late:.3} ({:.0}%), saturation {:?}, {:.1} min",
            records.len(),
            100.0 * late / early,
            summary.saturation_tripped_at,
            took.as_secs_f64() / 60.0
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = TrainConfig::desk();
    config.steps = 4;
    config.checkpoint_every = 2;
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, config.to_json()).map_err(|e| e.to_string())?;
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_waveunetd"))
            .args(["train", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .env("WAVEUNETD_DETERMINISTIC", "1")
            .output()
            .expect("spawn cli");
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    let files = |p: &Path| {
        let mut names: Vec<_> = std::fs::read_dir(p)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        names
    };
    let names = files(&a);
    if names != files(&b) {
        return Err(format!("different files: {names:?} vs {:?}", files(&b)));
    }
    for n in &names {
        if std::fs::read(a.join(n)).unwrap() != std::fs::read(b.join(n)).unwrap() {
            return Err(format!("{} differs", n.to_string_lossy()));
        }
    }
    Ok(format!("{} files identical: {names:?}", names.len()))
}

/// Writes straight to stdout so the lines show up without `--nocapture`.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("1 waveunet parameter count", param_count),
        ("2 ensemble parameter count", ensemble_count),
        ("3 forward speed", speed),
        ("4 score map resolution", resolution),
        ("5 gradient suite", gradients),
        ("6 global normalization", global_norm),
        ("7 loss oracles", loss_oracles),
        ("8 optimizer trace", optimizer),
        ("9 adversarial smoke run", smoke_run),
        ("10 run determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(msg) => report(&format!("PASS {name}: {msg}")),
            Err(msg) => {
                report(&format!("FAIL {name}: {msg}"));
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
