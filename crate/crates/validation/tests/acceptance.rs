//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use pfnet_cli::commands::run;
use pfnet_cli::pipeline::{evaluate, generate_scenes, train, MetricReport};
use pfnet_cli::RunConfig;
use pfnet_core::data::Split;
use pfnet_core::gradcheck::suite::{case_names, run_suite};
use pfnet_core::metrics::{boundary_counts, class_f1, miou, ConfusionMatrix};
use pfnet_core::nn::NormalizedPoint;
use pfnet_core::pointflow::{dense_affinity_reference, point_propagate};
use pfnet_core::tensor::{matmul, softmax_rows, transpose};
use pfnet_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const BENCH_SEEDS: &[u64] = &[0, 1, 2];
const BENCH_FPN_CHANNELS: usize = 32;
const BENCH_CROPS_PER_SCENE: usize = 9;

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn pfnet(args: &[&str]) -> Result<(), String> {
    let argv = std::iter::once("pfnet").chain(args.iter().copied()).map(String::from).collect();
    run(argv).map_err(|e| format!("pfnet {args:?}: {e}"))
}

// ---- 1-3: gradients and affinity ----

fn gradients() -> Outcome {
    let start = Instant::now();
    let results = run_suite("all", &[0, 1, 2]).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.outcome.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<String> = results.iter().filter(|r| !r.outcome.passed()).map(|r| format!("{}@{}", r.name, r.seed)).collect();
    let complete = results.len() == 3 * case_names().len();
    let detail = format!("{} checks, worst rel err {worst:.2e}, {secs:.1}s, failed {failed:?}", results.len());
    ensure(complete && failed.is_empty() && secs < 120.0, detail)
}

fn sparse_full_grid(src: &Tensor<f64>, dst: &Tensor<f64>) -> Tensor<f64> {
    let (n, _, h, w) = src.dims4("test").unwrap();
    let pts: Vec<_> = (0..h * w).map(|i| NormalizedPoint::from_flat(i, h, w)).collect();
    let mut t = Tape::<f64>::new();
    let (s, d) = (t.constant(src.clone()), t.constant(dst.clone()));
    let mut out = d;
    for item in 0..n {
        let rows = point_propagate(&mut t, s, d, item, &pts, 1.0).unwrap();
        out = t.scatter_points(out, item, &pts, rows).unwrap();
    }
    t.value(out).clone()
}

fn dense_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..10u64 {
        let c = 1 + seed as usize % 5;
        for (hs, hd) in [(4, 4), (8, 8), (4, 8)] {
            let src = Tensor::<f64>::uniform(&[2, c, hs, hs], 100 + seed, -1.5, 1.5).unwrap();
            let dst = Tensor::<f64>::uniform(&[2, c, hd, hd], 200 + seed, -1.5, 1.5).unwrap();
            let dense = dense_affinity_reference(&src, &dst, 1.0).map_err(|e| e.to_string())?;
            worst = worst.max(sparse_full_grid(&src, &dst).max_abs_diff(&dense));
            cases += 1;
        }
    }
    ensure(worst <= 1e-6, format!("{cases} feature pairs, max abs diff {worst:.2e}"))
}

fn softmax_rows_normalized() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let k = rng.gen_range(1..=256);
        let c = rng.gen_range(1..=32);
        let q = Tensor::<f64>::uniform(&[k, c], 2 * case, -2.0, 2.0).unwrap();
        let kv = Tensor::<f64>::uniform(&[k, c], 2 * case + 1, -2.0, 2.0).unwrap();
        let a = softmax_rows(&matmul(&q, &transpose(&kv).unwrap()).unwrap()).unwrap();
        for row in a.data().chunks(k) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, format!("1000 affinity matrices, max |row sum - 1| {worst:.2e}"))
}

// ---- 4-6: desk-scale benchmark ----

struct BenchRun {
    report: MetricReport,
    secs: f64,
}

struct Bench {
    pfnet: Vec<BenchRun>,
    plain: Vec<BenchRun>,
    no_boundary: Vec<BenchRun>,
}

fn bench_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.network.fpn_channels = BENCH_FPN_CHANNELS;
    cfg.train.crops_per_scene = BENCH_CROPS_PER_SCENE;
    cfg
}

fn bench_run(cfg: &RunConfig, train_set: &[pfnet_core::data::SceneSample], val: &[pfnet_core::data::SceneSample]) -> Result<BenchRun, String> {
    let start = Instant::now();
    let params = train(cfg, train_set, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let totals = evaluate(&params, cfg, val).map_err(|e| e.to_string())?;
    let report = MetricReport::from_totals(&totals, cfg).map_err(|e| e.to_string())?;
    Ok(BenchRun { report, secs: start.elapsed().as_secs_f64() })
}

fn run_bench() -> Result<Bench, String> {
    let mut bench = Bench { pfnet: Vec::new(), plain: Vec::new(), no_boundary: Vec::new() };
    for &seed in BENCH_SEEDS {
        let cfg = bench_config(seed);
        let scenes = generate_scenes(&cfg).map_err(|e| e.to_string())?;
        let pick = |split| scenes.iter().filter(|(s, _)| *s == split).map(|(_, x)| x.clone()).collect::<Vec<_>>();
        let (train_set, val) = (pick(Split::Train), pick(Split::Val));
        if (train_set.len(), val.len()) != (200, 50) {
            return Err(format!("split {}/{} instead of 200/50", train_set.len(), val.len()));
        }

        let mut plain = cfg.clone();
        plain.network = cfg.network.plain_fpn();
        let mut no_boundary = cfg.clone();
        for p in &mut no_boundary.network.pfm {
            p.boundary_k = 0;
        }
        let arms = [
            ("pfnet", &mut bench.pfnet, &cfg),
            ("plain fpn", &mut bench.plain, &plain),
            ("no boundary flow", &mut bench.no_boundary, &no_boundary),
        ];
        for (name, arm, c) in arms {
            let run = bench_run(c, &train_set, &val)?;
            eprintln!(
                "  bench seed {seed} {name}: miou {:.4} tight bF1 {:.4} fg {:?} ({:.0}s)",
                run.report.miou,
                run.report.tightest_boundary_f1(),
                run.report.fg_sample_ratio,
                run.secs
            );
            arm.push(run);
        }
    }
    Ok(bench)
}

fn miou_gain(b: &Bench) -> Outcome {
    let pf = median(b.pfnet.iter().map(|r| r.report.miou).collect());
    let plain = median(b.plain.iter().map(|r| r.report.miou).collect());
    let slowest = b.pfnet.iter().chain(&b.plain).map(|r| r.secs).fold(0.0, f64::max);
    let gain = 100.0 * (pf - plain);
    ensure(
        gain >= 1.0,
        format!("median val mIoU PFNet {:.2} vs FPN {:.2} (gain {gain:+.2} pts, slowest run {slowest:.0}s)", 100.0 * pf, 100.0 * plain),
    )
}

fn boundary_gain(b: &Bench) -> Outcome {
    let on = median(b.pfnet.iter().map(|r| r.report.tightest_boundary_f1()).collect());
    let off = median(b.no_boundary.iter().map(|r| r.report.tightest_boundary_f1()).collect());
    ensure(on > off, format!("median boundary F1 at the tightest threshold: on {on:.4} vs off {off:.4}"))
}

fn foreground_sampling(b: &Bench) -> Outcome {
    let ratios: Vec<f64> = b
        .pfnet
        .iter()
        .map(|r| r.report.fg_sample_ratio.unwrap_or(0.0) / r.report.fg_pixel_ratio)
        .collect();
    let m = median(ratios.clone());
    ensure(m >= 1.5, format!("fg_sample_ratio / fg pixel ratio per seed {ratios:.2?}, median {m:.2}"))
}

// ---- 7-10: defaults, determinism, metrics, ablations ----

fn defaults_fidelity() -> Outcome {
    let cfg = RunConfig::default();
    let golden = include_str!("../../cli/tests/golden/default_config.txt");
    let text = cfg.to_text();
    let pfm_ok = cfg.network.pfm.iter().all(|p| p.boundary_k == 128 && p.salient_kernel == (14, 14));
    let t = &cfg.train.core;
    let weights_ok = t.seg_loss_weight == 1.0 && t.edge_loss_weight == 1.0;
    let expected_stride = (cfg.data.crop_size as f64 * 512.0 / 896.0).round() as usize;
    let checks = [
        ("snapshot", text == golden),
        ("boundary_k/kernel", pfm_ok),
        ("loss weights", weights_ok),
        ("crop/stride", cfg.data.crop_stride == expected_stride),
        ("poly power", t.poly_power == 0.9),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    ensure(failed.is_empty(), format!("crop {} stride {}, mismatched {failed:?}", cfg.data.crop_size, cfg.data.crop_stride))
}

fn dir_digest(dir: &Path) -> BTreeMap<String, u64> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let mut h = DefaultHasher::new();
                fs::read(&p).unwrap().hash(&mut h);
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), h.finish());
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tiny = ["--network.fpn_channels=8", "--network.backbone_channels=4,4,8,8", "--train.crops_per_scene=2", "--train.epochs=2"];
    let mut digests = Vec::new();
    for run in ["a", "b"] {
        let root = tmp.path().join(run);
        let p = |name: &str| root.join(name).display().to_string();
        pfnet(&["gen-data", "--seed=7", "--data.count=10", &p("data")])?;
        let data = format!("--data={}", p("data"));
        let mut args = vec!["train", "--seed=7", &data];
        args.extend(tiny);
        let train_dir = p("train");
        args.push(&train_dir);
        pfnet(&args)?;
        let ck = format!("--checkpoint={}", root.join("train/checkpoint_final.pfc").display());
        pfnet(&["eval", &ck, &data, &p("eval")])?;
        digests.push(dir_digest(&root));
    }
    let mut h = DefaultHasher::new();
    digests[0].hash(&mut h);
    ensure(digests[0] == digests[1], format!("{} files, tree hash {:016x}", digests[0].len(), h.finish()))
}

fn random_mask(rng: &mut ChaCha8Rng, k: u8) -> Vec<u8> {
    let mut m = vec![rng.gen_range(0..k); 256];
    for _ in 0..rng.gen_range(0..6) {
        let (i0, j0) = (rng.gen_range(0..16), rng.gen_range(0..16));
        let (i1, j1) = (rng.gen_range(i0..16) + 1, rng.gen_range(j0..16) + 1);
        let v = rng.gen_range(0..k);
        for i in i0..i1 {
            m[i * 16 + j0..i * 16 + j1].fill(v);
        }
    }
    for _ in 0..rng.gen_range(0..20) {
        m[rng.gen_range(0..256)] = rng.gen_range(0..k);
    }
    m
}

fn oracle_contour(m: &[u8]) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for i in 0..16 {
        for j in 0..16 {
            let v = m[i * 16 + j];
            if (j < 15 && m[i * 16 + j + 1] != v) || (i < 15 && m[(i + 1) * 16 + j] != v) {
                out.push((i as i64, j as i64));
            }
        }
    }
    out
}

fn oracle_matched(from: &[(i64, i64)], to: &[(i64, i64)], t: i64) -> u64 {
    from.iter().filter(|a| to.iter().any(|b| (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2) <= t * t)).count() as u64
}

fn oracle_f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn metric_case(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let k = rng.gen_range(2..=6u8);
    let gt = random_mask(rng, k);
    let pred = if rng.gen_bool(0.5) {
        let mut p = gt.clone();
        for _ in 0..rng.gen_range(0..40) {
            p[rng.gen_range(0..256)] = rng.gen_range(0..k);
        }
        p
    } else {
        random_mask(rng, k)
    };

    let mut cm = ConfusionMatrix::new(k as usize);
    cm.add(&pred, &gt).map_err(|e| e.to_string())?;
    let (iou, f1) = (miou(&cm).map_err(|e| e.to_string())?, class_f1(&cm).map_err(|e| e.to_string())?);
    let (mut iou_sum, mut f1_sum, mut present) = (0.0, 0.0, 0);
    for c in 0..k {
        let tp = (0..256).filter(|&i| pred[i] == c && gt[i] == c).count() as u64;
        let fp = (0..256).filter(|&i| pred[i] == c && gt[i] != c).count() as u64;
        let fneg = (0..256).filter(|&i| pred[i] != c && gt[i] == c).count() as u64;
        if cm.class_counts(c as usize) != (tp, fp, fneg) {
            return Err(format!("class {c} counts {:?} vs {:?}", cm.class_counts(c as usize), (tp, fp, fneg)));
        }
        let union = tp + fp + fneg;
        let expect = (union > 0).then(|| (tp as f64 / union as f64, 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64));
        let got = iou.per_class[c as usize].zip(f1.per_class[c as usize]);
        match (expect, got) {
            (Some(e), Some(g)) if (e.0 - g.0).abs() <= 1e-9 && (e.1 - g.1).abs() <= 1e-9 => {}
            (None, None) => {}
            _ => return Err(format!("class {c}: {expect:?} vs {got:?}")),
        }
        if let Some((i, f)) = expect {
            iou_sum += i;
            f1_sum += f;
            present += 1;
        }
    }
    if (iou.mean - iou_sum / present as f64).abs() > 1e-9 || (f1.mean - f1_sum / present as f64).abs() > 1e-9 {
        return Err("class means differ".into());
    }

    let (bp, bg) = (oracle_contour(&pred), oracle_contour(&gt));
    for t in 1..=3usize {
        let got = boundary_counts(&pred, &gt, 16, 16, t).map_err(|e| e.to_string())?;
        let (pm, gm) = (oracle_matched(&bp, &bg, t as i64), oracle_matched(&bg, &bp, t as i64));
        let counts = (pm, bp.len() as u64, gm, bg.len() as u64);
        if (got.pred_matched, got.pred_total, got.gt_matched, got.gt_total) != counts {
            return Err(format!("boundary counts at {t}px: {got:?} vs {counts:?}"));
        }
        let expect = match (bp.len(), bg.len()) {
            (0, 0) => 1.0,
            (0, _) | (_, 0) => 0.0,
            (np, ng) => oracle_f1(pm as f64 / np as f64, gm as f64 / ng as f64),
        };
        if (got.f1() - expect).abs() > 1e-9 {
            return Err(format!("boundary F1 at {t}px: {} vs {expect}", got.f1()));
        }
    }
    Ok(())
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..100 {
        metric_case(&mut rng).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok("100 random 16x16 masks: class counts, IoU/F1 and boundary F1 at 1-3 px agree".into())
}

fn ablation_tables() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    pfnet(&["gen-data", "--seed=4", "--data.count=10", &data.display().to_string()])?;
    let data_arg = format!("--data={}", data.display());
    let mut shapes = Vec::new();
    for axis in ["direction", "edge_mode"] {
        let out = tmp.path().join(axis);
        let tiny = ["--network.fpn_channels=8", "--network.backbone_channels=4,4,8,8", "--train.crops_per_scene=1", "--train.epochs=1"];
        let out_s = out.display().to_string();
        let mut args = vec!["ablate", axis, &data_arg];
        args.extend(tiny);
        args.push(&out_s);
        pfnet(&args)?;
        let csv = fs::read_to_string(out.join(format!("ablation_{axis}.csv"))).map_err(|e| e.to_string())?;
        let rows: Vec<&str> = csv.lines().skip(1).filter_map(|l| l.split(',').next()).collect();
        shapes.push(format!("{axis}: {rows:?}"));
        if rows.len() != 3 {
            return Err(shapes.join("; "));
        }
    }
    Ok(shapes.join("; "))
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n:>2} {tag}  {name}: {detail} [{secs:.1}s]");
    outcome.is_ok()
}

const CRITERIA: usize = 10;

fn main() {
    if std::env::args().any(|a| a == "--list") {
        for n in 1..=CRITERIA {
            println!("criterion_{n}: test");
        }
        return;
    }
    // panics inside a criterion are reported on its FAIL line
    std::panic::set_hook(Box::new(|_| {}));
    let mut ok = true;
    ok &= report(1, "gradient check", gradients);
    ok &= report(2, "sparse/dense equivalence", dense_equivalence);
    ok &= report(3, "softmax normalization", softmax_rows_normalized);
    let bench = catch_unwind(run_bench).unwrap_or_else(|_| Err("benchmark panicked".into()));
    let bench = &bench;
    let with_bench = |f: fn(&Bench) -> Outcome| move || bench.as_ref().map_err(|e| e.clone()).and_then(f);
    ok &= report(4, "mIoU gain over plain FPN", with_bench(miou_gain));
    ok &= report(5, "boundary F1 with boundary flow", with_bench(boundary_gain));
    ok &= report(6, "foreground sampling", with_bench(foreground_sampling));
    ok &= report(7, "default config", defaults_fidelity);
    ok &= report(8, "determinism", determinism);
    ok &= report(9, "metric oracles", metric_oracles);
    ok &= report(10, "ablation tables", ablation_tables);
    if !ok {
        std::process::exit(1);
    }
}
