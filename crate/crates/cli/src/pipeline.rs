//! Dataset generation and storage, the training loop, sliding-window
//! evaluation and ablation sweeps.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pfnet_core::data::{
    crop_at, crop_origins, format_manifest, load_samples, parse_manifest, random_augment, stitch, synth_scene,
    write_pgm, write_ppm, write_tensor, write_u8_tensor, ManifestEntry, SceneSample, Split,
};
use pfnet_core::learn::{train_step, Batch, LossParts, Sgd, IGNORE_LABEL};
use pfnet_core::metrics::{boundary_counts, class_f1, miou, BoundaryCounts, ConfusionMatrix, PointCounts};
use pfnet_core::network::{init_params, pfnet_forward, NetworkConfig, ParameterSet, GAPS};
use pfnet_core::nn::bilinear_resize;
use pfnet_core::pointflow::{Direction, EdgeMode, SalientSampling};
use pfnet_core::{Tape, Tensor};

use crate::config::{direction_name, edge_mode_name, sampling_name, RunConfig};
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CONFIG_FILE: &str = "config.txt";
pub const OUTPUTS_FILE: &str = "outputs.txt";

// ---- data ----

pub fn split_of(index: usize, val_every: usize) -> Split {
    if val_every > 0 && index % val_every == val_every - 1 {
        Split::Val
    } else {
        Split::Train
    }
}

pub fn generate_scenes(cfg: &RunConfig) -> CliResult<Vec<(Split, SceneSample)>> {
    let scene = cfg.scene_config();
    (0..cfg.data.count)
        .map(|i| Ok((split_of(i, cfg.data.val_every), synth_scene(&scene, i as u64)?)))
        .collect()
}

/// Writes scenes and the manifest under `dir`; returns the written paths
/// relative to `dir`.
pub fn write_dataset(dir: &Path, cfg: &RunConfig, scenes: &[(Split, SceneSample)]) -> CliResult<Vec<String>> {
    let scene_dir = dir.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| CliError::io(&scene_dir, e))?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for (i, (split, s)) in scenes.iter().enumerate() {
        let (h, w) = (s.height(), s.width());
        let image = format!("scenes/scene_{i:05}.image.pft");
        let mask = format!("scenes/scene_{i:05}.mask.pft");
        write_tensor(&s.image, &dir.join(&image))?;
        write_u8_tensor(&[h, w], &s.mask, &dir.join(&mask))?;
        written.extend([image.clone(), mask.clone()]);
        if cfg.data.previews {
            let ppm = format!("scenes/scene_{i:05}.ppm");
            let pgm = format!("scenes/scene_{i:05}.pgm");
            write_ppm(&s.image, &dir.join(&ppm))?;
            write_pgm(&s.mask, h, w, cfg.data.scene.num_classes, &dir.join(&pgm))?;
            written.extend([ppm, pgm]);
        }
        entries.push(ManifestEntry { image, mask, split: *split });
    }
    write_text(&dir.join(MANIFEST_FILE), &format_manifest(&entries))?;
    written.push(MANIFEST_FILE.to_string());
    Ok(written)
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[SceneSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Foreground share of all labelled pixels in `split`.
    pub fn fg_pixel_ratio(&self, split: Split) -> f64 {
        let (fg, all) = fg_pixels(self.split(split));
        fg as f64 / all.max(1) as f64
    }
}

fn fg_pixels(scenes: &[SceneSample]) -> (u64, u64) {
    let mut fg = 0;
    let mut all = 0;
    for l in scenes.iter().flat_map(|s| &s.mask) {
        if *l != IGNORE_LABEL {
            all += 1;
            fg += u64::from(*l != 0);
        }
    }
    (fg, all)
}

pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let mut ds = Dataset::default();
    for (split, s) in load_samples(dir, &parse_manifest(&text)?)? {
        match split {
            Split::Train => ds.train.push(s),
            Split::Val => ds.val.push(s),
        }
    }
    Ok(ds)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

// ---- training ----

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
}

pub const LOG_HEADER: &str = "iter,epoch,lr,ce,bce_total,total";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.iter, self.epoch, self.lr, self.loss.ce, self.loss.bce_total, self.loss.total)
    }
}

/// `(scene, origin)` pairs drawn for one epoch, shuffled.
fn epoch_windows(scenes: &[SceneSample], cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Vec<(usize, (usize, usize))> {
    let (size, stride) = (cfg.data.crop_size, cfg.data.crop_stride);
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let origins = crop_origins(s.height(), s.width(), size, stride);
        if cfg.train.crops_per_scene >= origins.len() {
            out.extend(origins.into_iter().map(|o| (i, o)));
        } else {
            out.extend(sample(rng, origins.len(), cfg.train.crops_per_scene).into_iter().map(|k| (i, origins[k])));
        }
    }
    out.shuffle(rng);
    out
}

pub fn windows_per_epoch(scenes: &[SceneSample], cfg: &RunConfig) -> usize {
    scenes
        .iter()
        .map(|s| crop_origins(s.height(), s.width(), cfg.data.crop_size, cfg.data.crop_stride).len())
        .map(|n| n.min(cfg.train.crops_per_scene))
        .sum()
}

/// Trains from `init_params(seed)`. `hook` sees every logged iteration
/// with the parameters after that update.
pub fn train(
    cfg: &RunConfig,
    scenes: &[SceneSample],
    mut hook: impl FnMut(&LogRow, &ParameterSet<f32>) -> CliResult<()>,
) -> CliResult<ParameterSet<f32>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(CliError::Usage("no training scenes".into()));
    }
    let net = cfg.network_config();
    let tc = cfg.train_config();
    let mut params = init_params::<f32>(&net, cfg.seed)?;
    let mut opt = Sgd::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A11_5EED);
    let per_epoch = windows_per_epoch(scenes, cfg).div_ceil(tc.batch_size);
    let total = per_epoch * tc.epochs;
    let mut iter = 0;
    for epoch in 0..tc.epochs {
        let windows = epoch_windows(scenes, cfg, &mut rng);
        for chunk in windows.chunks(tc.batch_size) {
            let mut crops = Vec::with_capacity(chunk.len());
            for &(i, origin) in chunk {
                let c = crop_at(&scenes[i], origin, cfg.data.crop_size)?.sample;
                crops.push(if cfg.train.augment { random_augment(&c, &mut rng)? } else { c });
            }
            let refs: Vec<(&Tensor<f32>, &[u8])> = crops.iter().map(|c| (&c.image, c.mask.as_slice())).collect();
            let batch = Batch::from_samples(&refs, tc.edge_radius)?;
            let lr = tc.lr_at(iter, total);
            let loss = train_step(&mut params, &mut opt, &batch, &net, &tc, iter, total)?;
            hook(&LogRow { iter, epoch, lr, loss }, &params)?;
            iter += 1;
        }
    }
    Ok(params)
}

// ---- evaluation ----

/// Per-scene prediction: stitched labels and the distinct full-resolution
/// cells hit by any module's points.
pub struct ScenePrediction {
    pub labels: Vec<u8>,
    pub point_cells: HashSet<(usize, usize)>,
}

fn argmax_labels(logits: &Tensor<f32>) -> CliResult<Vec<Vec<u8>>> {
    let (n, k, h, w) = logits.dims4("argmax")?;
    let d = logits.data();
    Ok((0..n)
        .map(|b| {
            (0..h * w)
                .map(|px| {
                    let at = |c: usize| d[(b * k + c) * h * w + px];
                    (0..k).fold(0, |best, c| if at(c) > at(best) { c } else { best }) as u8
                })
                .collect()
        })
        .collect())
}

pub fn predict_scene(params: &ParameterSet<f32>, net: &NetworkConfig, scene: &SceneSample, cfg: &RunConfig) -> CliResult<ScenePrediction> {
    let size = cfg.data.crop_size;
    let origins = crop_origins(scene.height(), scene.width(), size, cfg.data.crop_stride);
    let mut images = Vec::with_capacity(origins.len() * 3 * size * size);
    for &o in &origins {
        images.extend_from_slice(crop_at(scene, o, size)?.sample.image.data());
    }
    let mut tape = Tape::<f32>::new();
    let vars = params.attach(&mut tape, false);
    let image = tape.constant(Tensor::from_vec(&[origins.len(), 3, size, size], images)?);
    let out = pfnet_forward(&mut tape, &vars, image, net, 0)?;
    let up = bilinear_resize(tape.value(out.logits), size, size)?;
    let crop_labels = argmax_labels(&up)?;
    let parts: Vec<((usize, usize), usize, &[u8])> =
        origins.iter().zip(&crop_labels).map(|(&o, l)| (o, size, l.as_slice())).collect();
    let labels = stitch(&parts, scene.height(), scene.width(), net.num_classes)?;
    let mut point_cells = HashSet::new();
    for gp in &out.points {
        for (b, &(r0, c0)) in origins.iter().enumerate() {
            point_cells.extend(gp.points_of(b).map(|p| {
                let (i, j) = p.cell(size, size);
                (r0 + i, c0 + j)
            }));
        }
    }
    Ok(ScenePrediction { labels, point_cells })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTotals {
    pub cm: ConfusionMatrix,
    /// One tally per configured threshold.
    pub boundary: Vec<BoundaryCounts>,
    /// `None` when no module is enabled.
    pub points: Option<PointCounts>,
    pub fg_pixels: u64,
    pub pixels: u64,
}

pub fn evaluate(params: &ParameterSet<f32>, cfg: &RunConfig, scenes: &[SceneSample]) -> CliResult<EvalTotals> {
    let net = cfg.network_config();
    params.check_compatible(&net)?;
    if scenes.is_empty() {
        return Err(CliError::Usage("no scenes to evaluate".into()));
    }
    let thresholds = cfg.eval.thresholds();
    let mut cm = ConfusionMatrix::new(net.num_classes);
    let mut boundary = vec![BoundaryCounts::default(); thresholds.len()];
    let mut points = (!net.pfm_enabled_gaps.is_empty()).then(PointCounts::default);
    for scene in scenes {
        let pred = predict_scene(params, &net, scene, cfg)?;
        let (h, w) = (scene.height(), scene.width());
        cm.add(&pred.labels, &scene.mask)?;
        for (acc, &t) in boundary.iter_mut().zip(&thresholds) {
            acc.merge(&boundary_counts(&pred.labels, &scene.mask, h, w, t)?);
        }
        if let Some(p) = points.as_mut() {
            p.merge(&PointCounts::of_cells(&pred.point_cells, &scene.mask, w));
        }
    }
    let (fg_pixels, pixels) = fg_pixels(scenes);
    Ok(EvalTotals { cm, boundary, points, fg_pixels, pixels })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_f1: Vec<Option<f64>>,
    pub miou: f64,
    pub mean_f1: f64,
    pub excluded_classes: usize,
    /// `(reference px, desk px, F1)`.
    pub boundary_f1: Vec<(usize, usize, f64)>,
    pub fg_sample_ratio: Option<f64>,
    pub fg_pixel_ratio: f64,
}

fn pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v))
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

impl MetricReport {
    pub fn from_totals(t: &EvalTotals, cfg: &RunConfig) -> CliResult<Self> {
        let iou = miou(&t.cm)?;
        let f1 = class_f1(&t.cm)?;
        let refs = &cfg.eval.reference_thresholds;
        Ok(Self {
            miou: iou.mean,
            mean_f1: f1.mean,
            excluded_classes: iou.excluded,
            per_class_iou: iou.per_class,
            per_class_f1: f1.per_class,
            boundary_f1: refs.iter().zip(cfg.eval.thresholds()).zip(&t.boundary).map(|((&r, d), c)| (r, d, c.f1())).collect(),
            fg_sample_ratio: t.points.and_then(|p| p.ratio()),
            fg_pixel_ratio: t.fg_pixels as f64 / t.pixels.max(1) as f64,
        })
    }

    /// Boundary F1 at the smallest desk tolerance.
    pub fn tightest_boundary_f1(&self) -> f64 {
        self.boundary_f1.iter().min_by_key(|(r, d, _)| (*d, *r)).map_or(0.0, |b| b.2)
    }

    pub fn class_csv(&self) -> String {
        let mut s = String::from("class,iou,f1\n");
        for (c, (i, f)) in self.per_class_iou.iter().zip(&self.per_class_f1).enumerate() {
            s.push_str(&format!("{c},{},{}\n", opt(*i), opt(*f)));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!(
            "metric,value\nmiou,{}\nmean_f1,{}\nexcluded_classes,{}\n",
            self.miou, self.mean_f1, self.excluded_classes
        );
        for (r, d, f) in &self.boundary_f1 {
            s.push_str(&format!("boundary_f1_{r}px_at_{d}px,{f}\n"));
        }
        s.push_str(&format!("fg_sample_ratio,{}\nfg_pixel_ratio,{}\n", opt(self.fg_sample_ratio), self.fg_pixel_ratio));
        s
    }

    pub fn text(&self) -> String {
        let mut s = format!("{:<10}{:>8}{:>8}\n", "class", "IoU", "F1");
        for (c, (i, f)) in self.per_class_iou.iter().zip(&self.per_class_f1).enumerate() {
            s.push_str(&format!("{c:<10}{:>8}{:>8}\n", pct(*i), pct(*f)));
        }
        s.push_str(&format!("{:<10}{:>8}{:>8}\n", "mean", pct(Some(self.miou)), pct(Some(self.mean_f1))));
        if self.excluded_classes > 0 {
            s.push_str(&format!("({} classes absent from prediction and ground truth)\n", self.excluded_classes));
        }
        s.push_str("\nboundary F1\n");
        let head: Vec<String> = self.boundary_f1.iter().map(|(r, d, _)| format!("{r}px({d})")).collect();
        let vals: Vec<String> = self.boundary_f1.iter().map(|(_, _, f)| pct(Some(*f))).collect();
        s.push_str(&head.iter().map(|h| format!("{h:>10}")).collect::<String>());
        s.push('\n');
        s.push_str(&vals.iter().map(|v| format!("{v:>10}")).collect::<String>());
        s.push('\n');
        s.push_str(&format!(
            "\nforeground: sampled points {} %, pixels {} %\n",
            pct(self.fg_sample_ratio),
            pct(Some(self.fg_pixel_ratio))
        ));
        s
    }
}

// ---- ablations ----

pub const AXES: [&str; 5] = ["sampling", "direction", "edge_mode", "gaps", "points"];

/// Runs whose metrics are averaged into one table row.
pub struct Variant {
    pub name: String,
    pub runs: Vec<RunConfig>,
}

fn each_gap(base: &RunConfig, f: impl Fn(&mut pfnet_core::pointflow::PfmConfig)) -> RunConfig {
    let mut c = base.clone();
    for p in &mut c.network.pfm {
        f(p);
    }
    c
}

/// Uniform random sampling is averaged over this many sampling seeds.
pub const RANDOM_SAMPLING_REPEATS: u64 = 10;

pub fn variants(axis: &str, base: &RunConfig) -> CliResult<Vec<Variant>> {
    let single = |name: String, cfg: RunConfig| Variant { name, runs: vec![cfg] };
    Ok(match axis {
        "sampling" => [SalientSampling::MaxPool, SalientSampling::UniformRandom, SalientSampling::AttentionTopk]
            .into_iter()
            .map(|s| {
                let repeats = if s == SalientSampling::UniformRandom { RANDOM_SAMPLING_REPEATS } else { 1 };
                Variant {
                    name: sampling_name(s).to_string(),
                    runs: (0..repeats)
                        .map(|k| {
                            each_gap(base, |p| {
                                p.salient_sampling = s;
                                p.sampling_seed = k;
                            })
                        })
                        .collect(),
                }
            })
            .collect(),
        "direction" => [Direction::TopDown, Direction::BottomUp, Direction::TdThenBu]
            .into_iter()
            .map(|d| single(direction_name(d).to_string(), each_gap(base, |p| p.direction = d)))
            .collect(),
        "edge_mode" => [EdgeMode::Subtraction, EdgeMode::Direct, EdgeMode::Addition]
            .into_iter()
            .map(|m| single(edge_mode_name(m).to_string(), each_gap(base, |p| p.edge_mode = m)))
            .collect(),
        "gaps" => [vec![], vec![5], vec![4, 5], GAPS.to_vec()]
            .into_iter()
            .map(|g| {
                let name = if g.is_empty() {
                    "none".to_string()
                } else {
                    g.iter().map(|x| format!("F{x}")).collect::<Vec<_>>().join("+")
                };
                let mut c = base.clone();
                c.network.pfm_enabled_gaps = g;
                single(name, c)
            })
            .collect(),
        "points" => {
            let mut v: Vec<Variant> = [32, 64, 128, 256]
                .into_iter()
                .map(|k| single(format!("boundary_k={k}"), each_gap(base, |p| p.boundary_k = k)))
                .collect();
            v.extend(
                [7, 14, 24]
                    .into_iter()
                    .map(|s| single(format!("salient_kernel={s}x{s}"), each_gap(base, |p| p.salient_kernel = (s, s)))),
            );
            v
        }
        other => return Err(CliError::Usage(format!("unknown ablation axis {other:?}; expected one of {AXES:?}"))),
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricReport,
    pub wall_seconds: f64,
}

/// Trains and evaluates every run of every variant on the same data.
pub fn run_ablation(axis: &str, base: &RunConfig, data: &Dataset, split: Split) -> CliResult<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for v in variants(axis, base)? {
        let start = Instant::now();
        let mut reports = Vec::new();
        for cfg in &v.runs {
            let params = train(cfg, &data.train, |_, _| Ok(()))?;
            reports.push(MetricReport::from_totals(&evaluate(&params, cfg, data.split(split))?, cfg)?);
        }
        rows.push(AblationRow { variant: v.name, report: mean_report(&reports), wall_seconds: start.elapsed().as_secs_f64() });
    }
    Ok(rows)
}

fn mean_report(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut out = reports[0].clone();
    out.miou = mean(&|r| r.miou);
    out.mean_f1 = mean(&|r| r.mean_f1);
    for (i, b) in out.boundary_f1.iter_mut().enumerate() {
        b.2 = mean(&|r| r.boundary_f1[i].2);
    }
    if out.fg_sample_ratio.is_some() {
        out.fg_sample_ratio = Some(mean(&|r| r.fg_sample_ratio.unwrap_or(0.0)));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let Some(first) = rows.first() else { return String::new() };
    let mut s = String::from("variant,miou,mean_f1");
    for (r, d, _) in &first.report.boundary_f1 {
        s.push_str(&format!(",boundary_f1_{r}px_at_{d}px"));
    }
    s.push_str(",fg_sample_ratio,wall_seconds\n");
    for row in rows {
        s.push_str(&format!("{},{},{}", row.variant, row.report.miou, row.report.mean_f1));
        for (_, _, f) in &row.report.boundary_f1 {
            s.push_str(&format!(",{f}"));
        }
        s.push_str(&format!(",{},{:.3}\n", opt(row.report.fg_sample_ratio), row.wall_seconds));
    }
    s
}

/// Lists produced files, one relative path per line.
pub fn write_outputs(dir: &Path, files: &[String]) -> CliResult<PathBuf> {
    let path = dir.join(OUTPUTS_FILE);
    let mut text: String = files.iter().map(|f| format!("{f}\n")).collect();
    text.push_str(&format!("{OUTPUTS_FILE}\n"));
    write_text(&path, &text)?;
    Ok(path)
}
