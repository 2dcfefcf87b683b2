//! End-to-end acceptance: one PASS/FAIL line per criterion, tolerances
//! pinned below. Criteria 6-11 drive the `ifgmi` binary through the
//! default pipeline and take tens of minutes on one core.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use ifgmi_core::attack::{poincare_loss, project_l1_ball};
use ifgmi_core::gradcheck::{self, primitive_suite, run_case};
use ifgmi_core::metrics::{self, Prdc};
use ifgmi_core::models::{Generator, GeneratorArch, SynthesisStack};
use ifgmi_core::{io, seed, Graph, Tensor};
use nalgebra::{DMatrix, DVector};
use serde_json::Value;

const GRAD_TOL: f64 = 1e-5;
const GRAD_STEP: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const GRAD_SECONDS: f64 = 30.0;
const PROJ_INSTANCES: usize = 1000;
const PROJ_TOL: f64 = 1e-6;
const COMPOSE_TOL: f64 = 1e-5;
const COMPOSE_SAMPLES: usize = 100;
const FID_REL_TOL: f64 = 0.05;
const FID_SAMPLES: usize = 5000;
const FID_EXACT_TOL: f64 = 1e-6;
const TARGET_ACC: f64 = 0.90;
const MILD_ACC1: f64 = 0.5;
const SWEEP_SEEDS: usize = 5;
const SIGN_AGREEMENT: usize = 4;
const PIPELINE_SECONDS: f64 = 1800.0;
const ATTACK_SECONDS: f64 = 600.0;
const SEED: &str = "7";

type Check = Result<(bool, String), String>;

fn line(id: usize, name: &str, outcome: Check) -> bool {
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("{} {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// 1
fn gradient_suite() -> Check {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_name = "";
    let mut cases = 0;
    for case in primitive_suite() {
        let e = run_case(&case, GRAD_INSTANCES, GRAD_STEP, 1).map_err(err)?;
        if !(e <= worst) {
            worst = e;
            worst_name = case.name;
        }
        cases += 1;
    }
    let f = gradcheck::expr(|g, v| Ok(poincare_loss(g, v[0], &[1, 4, 0])?.sum()));
    for i in 0..GRAD_INSTANCES as u64 {
        let logits = Tensor::randn(&[3, 6], 1.5, &mut seed::rng(seed::derive_indexed(2, "acceptance-poincare", i)));
        let e = gradcheck::check(&[logits], GRAD_STEP, &f).map_err(err)?;
        if !(e <= worst) {
            worst = e;
            worst_name = "poincare_loss";
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        worst < GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "{cases} primitives + poincare x{GRAD_INSTANCES}, worst rel err {worst:.2e} ({worst_name}) < {GRAD_TOL:e}, {secs:.1}s < {GRAD_SECONDS}s"
        ),
    ))
}

/// Projection found by scanning θ then bisecting; shares nothing with the sort-based routine.
fn dense_theta(x: &[f64], c: &[f64], r: f64) -> Vec<f64> {
    let d: Vec<f64> = x.iter().zip(c).map(|(a, b)| a - b).collect();
    let mass = |t: f64| d.iter().map(|v| (v.abs() - t).max(0.0)).sum::<f64>();
    if mass(0.0) <= r {
        return x.to_vec();
    }
    let top = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let (mut lo, mut hi) = (0.0, top);
    let grid = 10_000;
    for i in 1..=grid {
        let t = top * i as f64 / grid as f64;
        if mass(t) <= r {
            lo = top * (i - 1) as f64 / grid as f64;
            hi = t;
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > r {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    d.iter().zip(c).map(|(v, cc)| cc + v.signum() * (v.abs() - t).max(0.0)).collect()
}

// 2
fn projection() -> Check {
    let mut worst = 0.0f64;
    for i in 0..PROJ_INSTANCES as u64 {
        let mut rng = seed::rng(seed::derive_indexed(3, "acceptance-projection", i));
        let dim = 2 + (i as usize % 63);
        let x = Tensor::<f64>::randn(&[dim], 2.0, &mut rng);
        let c = Tensor::<f64>::randn(&[dim], 0.5, &mut rng);
        let r = 0.05 + (i % 17) as f64 * 0.3;
        let mut got = x.data().to_vec();
        project_l1_ball(&mut got, c.data(), r);
        let want = dense_theta(x.data(), c.data(), r);
        worst = got.iter().zip(&want).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    let mut a = vec![3.0, 0.0];
    project_l1_ball(&mut a, &[0.0, 0.0], 1.0);
    let mut b = vec![2.0, 1.0];
    project_l1_ball(&mut b, &[0.0, 0.0], 1.0);
    let exact = a == [1.0, 0.0] && b == [1.0, 0.0];
    Ok((
        worst <= PROJ_TOL && exact,
        format!("{PROJ_INSTANCES} instances dims 2-64, max |Δ| {worst:.2e} <= {PROJ_TOL:e}; (3,0)->{a:?}, (2,1)->{b:?}"),
    ))
}

// 3
fn compositionality() -> Check {
    let gen = Generator::<f32>::new(GeneratorArch::default(), 5);
    let z = Generator::<f32>::sample_z(COMPOSE_SAMPLES, &mut seed::rng(4));
    let w = gen.map_latent(&z).map_err(err)?;
    let g = Graph::new();
    let wv = g.constant(w);
    let full = gen.synthesis.full(&g, wv, false).map_err(err)?.value();
    let mut worst = 0.0f64;
    for split in 0..=SynthesisStack::<f32>::STAGES {
        let f = gen.synthesis.prefix(&g, wv, split, false).map_err(err)?;
        let x = gen.synthesis.suffix(&g, f, wv, split, false).map_err(err)?.value();
        worst = worst.max(x.max_abs_diff(&full) as f64);
    }
    Ok((
        worst <= COMPOSE_TOL,
        format!("{COMPOSE_SAMPLES} w x {} splits, max-abs {worst:.2e} <= {COMPOSE_TOL:e}", SynthesisStack::<f32>::STAGES + 1),
    ))
}

/// Principal square root by the Denman-Beavers iteration.
fn sqrtm_db(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let (mut y, mut z) = (a.clone(), DMatrix::identity(n, n));
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible");
        let zi = z.clone().try_inverse().expect("invertible");
        y = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
    }
    y
}

fn closed_form_fid(ma: &DVector<f64>, ca: &DMatrix<f64>, mb: &DVector<f64>, cb: &DMatrix<f64>) -> f64 {
    let sa = sqrtm_db(ca);
    let cross = sqrtm_db(&(&sa * cb * &sa));
    (ma - mb).norm_squared() + (ca + cb - cross * 2.0).trace()
}

fn gaussian(n: usize, mean: &DVector<f64>, cov: &DMatrix<f64>, s: u64) -> Tensor<f64> {
    let d = mean.len();
    let l = cov.clone().cholesky().expect("SPD").l();
    let z = Tensor::<f64>::randn(&[n, d], 1.0, &mut seed::rng(s));
    let mut out = Tensor::<f64>::zeros(&[n, d]);
    for i in 0..n {
        let x = mean + &l * DVector::from_column_slice(z.row(i));
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(x.as_slice());
    }
    out
}

// 4
fn fid_oracle() -> Check {
    let d = 6;
    let mut rng = seed::rng(9);
    let spd = |rng: &mut seed::StageRng, scale: f64| {
        let m = Tensor::<f64>::randn(&[d, d], scale, rng);
        let m = DMatrix::from_row_slice(d, d, m.data());
        &m * m.transpose() + DMatrix::identity(d, d) * 0.5
    };
    let (ca, cb) = (spd(&mut rng, 0.6), spd(&mut rng, 0.9));
    let ma = DVector::zeros(d);
    let mb = DVector::from_fn(d, |i, _| 0.5 + 0.25 * i as f64);
    let want = closed_form_fid(&ma, &ca, &mb, &cb);
    let a = gaussian(FID_SAMPLES, &ma, &ca, 10);
    let b = gaussian(FID_SAMPLES, &mb, &cb, 11);
    let got = metrics::fid(&a, &b).map_err(err)?;
    let rel = (got - want).abs() / want;
    let self_fid = metrics::fid(&a, &a).map_err(err)?;
    let asym = (got - metrics::fid(&b, &a).map_err(err)?).abs();
    Ok((
        rel <= FID_REL_TOL && self_fid.abs() < FID_EXACT_TOL && asym < FID_EXACT_TOL,
        format!(
            "n={FID_SAMPLES} d={d}: fid {got:.4} vs closed form {want:.4} (rel {rel:.3} <= {FID_REL_TOL}); fid(A,A) {self_fid:.1e}; |fid(A,B)-fid(B,A)| {asym:.1e} < {FID_EXACT_TOL:e}"
        ),
    ))
}

/// Direct transcription of the k-NN manifold definitions.
fn prdc_brute(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Prdc {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let radius = |set: &[Vec<f64>], i: usize| {
        let mut d: Vec<f64> = (0..set.len()).filter(|&j| j != i).map(|j| dist(&set[i], &set[j])).collect();
        d.sort_by(f64::total_cmp);
        d[k - 1]
    };
    let rr: Vec<f64> = (0..real.len()).map(|i| radius(real, i)).collect();
    let rf: Vec<f64> = (0..fake.len()).map(|i| radius(fake, i)).collect();
    let inside_real = |y: &[f64], i: usize| dist(&real[i], y) < rr[i];
    let (n, m) = (real.len() as f64, fake.len() as f64);
    let precision = fake.iter().filter(|y| (0..real.len()).any(|i| inside_real(y, i))).count() as f64 / m;
    let recall = real.iter().filter(|x| (0..fake.len()).any(|j| dist(&fake[j], x) < rf[j])).count() as f64 / n;
    let hits: usize = fake.iter().map(|y| (0..real.len()).filter(|&i| inside_real(y, i)).count()).sum();
    let density = hits as f64 / (k as f64 * m);
    let coverage = (0..real.len()).filter(|&i| fake.iter().any(|y| dist(&real[i], y) < rr[i])).count() as f64 / n;
    Prdc { precision, recall, density, coverage }
}

fn rows(t: &[Vec<f64>]) -> Tensor<f64> {
    let d = t[0].len();
    Tensor::new(vec![t.len(), d], t.concat()).expect("rows")
}

// 5
fn prdc_sanity() -> Check {
    let mut rng = seed::rng(12);
    let real = Tensor::<f64>::randn(&[40, 3], 1.0, &mut rng);
    let same = metrics::prdc(&real, &real, 3).map_err(err)?;
    let far = real.map(|v| v + 1000.0);
    let apart = metrics::prdc(&real, &far, 3).map_err(err)?;
    let hand_real = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 2.0]];
    let hand_fake = vec![vec![0.5, 0.2], vec![3.0, 3.0], vec![0.1, 1.5]];
    let got = metrics::prdc(&rows(&hand_real), &rows(&hand_fake), 1).map_err(err)?;
    let want = prdc_brute(&hand_real, &hand_fake, 1);
    let identical = same.precision == 1.0 && same.recall == 1.0 && same.coverage == 1.0;
    let disjoint = apart.precision == 0.0 && apart.coverage == 0.0;
    Ok((
        identical && disjoint && got == want,
        format!(
            "identical P/R/C {}/{}/{}; disjoint P/C {}/{}; 6-point {:?} vs brute force {:?}",
            same.precision, same.recall, same.coverage, apart.precision, apart.coverage, got, want
        ),
    ))
}

// pipeline helpers

struct Bin {
    exe: PathBuf,
}

impl Bin {
    fn run(&self, cmd: &str, out: &Path, config: Option<&Path>, extra: &[&str]) -> Result<(Value, f64), String> {
        let started = Instant::now();
        let mut c = Command::new(&self.exe);
        c.arg(cmd).arg("--out").arg(out).args(["--seed", SEED, "--threads", "1"]).args(extra);
        if let Some(p) = config {
            c.arg("--config").arg(p);
        }
        let o = c.output().map_err(err)?;
        let secs = started.elapsed().as_secs_f64();
        if !o.status.success() {
            return Err(format!("`{cmd}` failed: {}", String::from_utf8_lossy(&o.stderr).trim()));
        }
        Ok((serde_json::from_slice(&o.stdout).map_err(err)?, secs))
    }
}

fn read(path: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(err)
}

fn copy_tree(from: &Path, to: &Path, keep: &dyn Fn(&str) -> bool) -> Result<(), String> {
    std::fs::create_dir_all(to).map_err(err)?;
    for entry in std::fs::read_dir(from).map_err(err)? {
        let entry = entry.map_err(err)?;
        let name = entry.file_name().to_string_lossy().to_string();
        if keep(&name) {
            std::fs::copy(entry.path(), to.join(&name)).map_err(err)?;
        }
    }
    Ok(())
}

struct Pipeline {
    root: PathBuf,
    stages: Vec<(String, f64)>,
    error: Option<String>,
}

fn default_pipeline(bin: &Bin, root: &Path) -> Pipeline {
    let mut p = Pipeline { root: root.to_path_buf(), stages: Vec::new(), error: None };
    for cmd in ["gen-data", "train", "attack", "evaluate"] {
        match bin.run(cmd, root, None, &[]) {
            Ok((_, secs)) => p.stages.push((cmd.to_string(), secs)),
            Err(e) => {
                p.error = Some(e);
                break;
            }
        }
    }
    p
}

fn stage_secs(p: &Pipeline, name: &str) -> Option<f64> {
    p.stages.iter().find(|(n, _)| n == name).map(|(_, s)| *s)
}

fn pipeline_ok(p: &Pipeline) -> Result<(), String> {
    match &p.error {
        Some(e) => Err(format!("default pipeline: {e}")),
        None => Ok(()),
    }
}

// 6
fn desk_pipeline(p: &Pipeline) -> Check {
    pipeline_ok(p)?;
    let target = read(&p.root.join("models/target.json"))?;
    let acc = target["report"]["test_accuracy"].as_f64().ok_or("no target accuracy")?;
    let report = read(&p.root.join("report/report.json"))?;
    let acc1 = report["summary"]
        .as_array()
        .and_then(|s| s.iter().find(|r| r["method"] == "ifgmi-L3"))
        .and_then(|r| r["acc1"].as_f64())
        .ok_or("no ifgmi-L3 row")?;
    Ok((
        acc >= TARGET_ACC && acc1 >= MILD_ACC1,
        format!("mild σ=0.35: target test acc {acc:.3} >= {TARGET_ACC}; IF-GMI L=3 eval Acc@1 {acc1:.3} >= {MILD_ACC1}"),
    ))
}

/// Strong-shift prior trained next to the mild run's corpora and classifiers,
/// then the L-sweep over [`SWEEP_SEEDS`] seeds.
fn strong_sweep(bin: &Bin, mild: &Pipeline, root: &Path) -> Result<Value, String> {
    pipeline_ok(mild)?;
    copy_tree(&mild.root.join("data"), &root.join("data"), &|_| true)?;
    copy_tree(&mild.root.join("models"), &root.join("models"), &|n| !n.starts_with("prior"))?;
    let cfg = root.join("strong.json");
    let doc = format!(r#"{{"corpus": {{"shift": "strong"}}, "ablation": {{"repeats": {SWEEP_SEEDS}}}}}"#);
    std::fs::write(&cfg, doc).map_err(err)?;
    bin.run("train", root, Some(&cfg), &["--model", "prior"])?;
    bin.run("ablate", root, Some(&cfg), &["--axis", "L"])?;
    read(&root.join("ablate/L.json"))
}

fn acc_by(sweep: &Value, l: f64) -> Vec<f64> {
    let mut rows: Vec<(u64, f64)> = sweep["rows"]
        .as_array()
        .into_iter()
        .flatten()
        .filter(|r| r["value"].as_f64() == Some(l))
        .map(|r| (r["repeat"].as_u64().unwrap_or(0), r["acc1"].as_f64().unwrap_or(f64::NAN)))
        .collect();
    rows.sort_by_key(|r| r.0);
    rows.into_iter().map(|r| r.1).collect()
}

// 7
fn ood_superiority(sweep: &Result<Value, String>) -> Check {
    let sweep = sweep.as_ref().map_err(Clone::clone)?;
    let (l0, l3) = (acc_by(sweep, 0.0), acc_by(sweep, 3.0));
    if l0.len() < SWEEP_SEEDS || l3.len() != l0.len() {
        return Err(format!("expected {SWEEP_SEEDS} paired seeds, got {} / {}", l0.len(), l3.len()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let wins = l0.iter().zip(&l3).filter(|(a, b)| b > a).count();
    Ok((
        mean(&l3) > mean(&l0) && wins >= SIGN_AGREEMENT,
        format!(
            "strong σ=0.9 over {} seeds: mean Acc@1 L=3 {:.3} vs L=0 {:.3}; L=3 ahead on {wins}/{} seeds (need >= {SIGN_AGREEMENT})",
            l0.len(),
            mean(&l3),
            mean(&l0),
            l0.len()
        ),
    ))
}

// 8
fn ablation_shape(sweep: &Result<Value, String>) -> Check {
    let sweep = sweep.as_ref().map_err(Clone::clone)?;
    let table: Vec<(f64, f64)> = sweep["table"]
        .as_array()
        .ok_or("no table")?
        .iter()
        .map(|p| (p["value"].as_f64().unwrap_or(f64::NAN), p["mean_acc1"].as_f64().unwrap_or(f64::NAN)))
        .collect();
    let best = sweep["best"].as_f64().ok_or("no best")?;
    let shown: Vec<String> = table.iter().map(|(l, a)| format!("L{l}={a:.3}")).collect();
    Ok((table.len() == 4 && best >= 1.0, format!("mean Acc@1 {}; argmax L = {best} >= 1", shown.join(" "))))
}

// 9
fn constraint_audit(mild: &Pipeline, sweep: &Result<Value, String>) -> Check {
    pipeline_ok(mild)?;
    let result = read(&mild.root.join("attack/ifgmi-L3/seed_0/result.json"))?;
    let stages = result["audit"]["stages"].as_array().ok_or("no audit")?;
    let mut checks = 0;
    let mut violations = 0;
    let mut ratio = 0.0f64;
    for s in stages {
        checks += s["checks"].as_u64().unwrap_or(0);
        violations += s["violations"].as_u64().unwrap_or(u64::MAX);
        ratio = ratio.max(s["max_feature_ratio"].as_f64().unwrap_or(f64::INFINITY));
        ratio = ratio.max(s["max_style_ratio"].as_f64().unwrap_or(f64::INFINITY));
    }
    let sweep_violations: u64 = match sweep {
        Ok(s) => s["rows"].as_array().into_iter().flatten().map(|r| r["violations"].as_u64().unwrap_or(u64::MAX)).sum(),
        Err(_) => 0,
    };
    Ok((
        checks > 0 && violations == 0 && sweep_violations == 0 && ratio <= 1.0 + 1e-6,
        format!(
            "{checks} post-step checks (f and w), {violations} violations, max ratio {ratio:.9} <= 1+1e-6; strong sweep violations {sweep_violations}"
        ),
    ))
}

// 10
fn determinism(bin: &Bin, mild: &Pipeline, root: &Path) -> Check {
    pipeline_ok(mild)?;
    copy_tree(&mild.root.join("data"), &root.join("data"), &|_| true)?;
    copy_tree(&mild.root.join("models"), &root.join("models"), &|_| true)?;
    bin.run("attack", root, None, &[])?;
    let mut compared = Vec::new();
    for label in ["ifgmi-L3", "latent", "pixel"] {
        let rel = format!("attack/{label}/seed_0/final.ifgt");
        let a = io::load::<f32>(mild.root.join(&rel)).map_err(err)?;
        let b = io::load::<f32>(root.join(&rel)).map_err(err)?;
        let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.shape() == y.1.shape()
            && x.1.data().iter().zip(y.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        compared.push((label, same));
    }
    let all = compared.iter().all(|c| c.1);
    let shown: Vec<String> = compared.iter().map(|(l, s)| format!("{l} {}", if *s { "identical" } else { "DIFFERS" })).collect();
    Ok((all, format!("two single-threaded attack runs, same config+seed: {}", shown.join(", "))))
}

// 11
fn budget(p: &Pipeline) -> Check {
    pipeline_ok(p)?;
    let total: f64 = p.stages.iter().map(|s| s.1).sum();
    let attack = stage_secs(p, "attack").ok_or("no attack stage")?;
    let shown: Vec<String> = p.stages.iter().map(|(n, s)| format!("{n} {s:.0}s")).collect();
    Ok((
        total < PIPELINE_SECONDS && attack < ATTACK_SECONDS,
        format!(
            "default pipeline {total:.0}s < {PIPELINE_SECONDS}s, attack {attack:.0}s < {ATTACK_SECONDS}s on 1 thread ({})",
            shown.join(", ")
        ),
    ))
}

fn main() {
    // `cargo test` passes harness flags; only `--list` needs an answer
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).expect("acceptance dir");
    let bin = Bin { exe: PathBuf::from(env!("CARGO_BIN_EXE_ifgmi")) };

    let mut pass = Vec::new();
    pass.push(line(1, "gradient suite", gradient_suite()));
    pass.push(line(2, "projection oracle", projection()));
    pass.push(line(3, "compositionality", compositionality()));
    pass.push(line(4, "FID oracle", fid_oracle()));
    pass.push(line(5, "PRDC sanity", prdc_sanity()));

    let mild = default_pipeline(&bin, &root.join("mild"));
    let sweep = strong_sweep(&bin, &mild, &root.join("strong"));
    pass.push(line(6, "desk-scale pipeline", desk_pipeline(&mild)));
    pass.push(line(7, "OOD superiority", ood_superiority(&sweep)));
    pass.push(line(8, "ablation shape", ablation_shape(&sweep)));
    pass.push(line(9, "constraint audit", constraint_audit(&mild, &sweep)));
    pass.push(line(10, "determinism", determinism(&bin, &mild, &root.join("rerun"))));
    pass.push(line(11, "budget", budget(&mild)));

    let passed = pass.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} criteria passed", pass.len());
    if passed != pass.len() {
        std::process::exit(1);
    }
}
