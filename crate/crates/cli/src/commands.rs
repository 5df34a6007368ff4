//! Argument parsing and the six subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use pfnet_core::data::{crop_at, load_checkpoint, ppm_bytes, save_checkpoint, Split};
use pfnet_core::gradcheck::suite::run_suite;
use pfnet_core::gradcheck::TOLERANCE;
use pfnet_core::network::pfnet_forward;
use pfnet_core::{Tape, Tensor};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::pipeline::{
    ablation_csv, evaluate, generate_scenes, load_dataset, run_ablation, train, write_dataset, write_outputs,
    write_text, MetricReport, CONFIG_FILE, LOG_HEADER,
};

#[derive(Debug, Parser)]
#[command(
    name = "pfnet",
    version,
    about = "Point-flow feature pyramid segmentation on synthetic aerial scenes",
    after_help = "Any configuration value can be overridden with --section.key=value, e.g. --train.epochs=2 or --pfm.gap4.boundary_k=32."
)]
pub struct Cli {
    /// Configuration file in the sectioned key = value grammar.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and sampling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenes and a manifest.
    GenData { out: PathBuf },
    /// Train on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        out: PathBuf,
    },
    /// Sliding-window evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        out: PathBuf,
    },
    /// Finite-difference check of analytic gradients at 64-bit.
    Gradcheck {
        /// Case name, family prefix, or `all`.
        #[arg(default_value = "all")]
        scope: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Train and evaluate the variants of one design axis.
    Ablate {
        /// sampling, direction, edge_mode, gaps or points.
        axis: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        out: PathBuf,
    },
    /// Dump the points every module selects on one crop.
    SamplePoints {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Scene index within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Crop origin as `row,col`.
        #[arg(long, default_value = "0,0")]
        origin: String,
        out: PathBuf,
    },
}

/// Splits `--section.key=value` overrides from the arguments clap parses.
pub fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        match a.strip_prefix("--").and_then(|x| x.split_once('=')) {
            Some((k, v)) if k.contains('.') => overrides.push((k.to_string(), v.to_string())),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn read_config(path: &Path) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    RunConfig::parse(&text)
}

/// Base file, then overrides, then `--seed`.
pub fn resolve_config(cli: &Cli, overrides: &[(String, String)], fallback: Option<&Path>) -> CliResult<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => read_config(p)?,
        (None, Some(p)) if p.exists() => read_config(p)?,
        _ => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.set_path(k, v)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn beside_checkpoint(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE)
}

pub fn run(args: Vec<String>) -> CliResult<()> {
    let (rest, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    match &cli.command {
        Command::GenData { out } => gen_data(&resolve_config(&cli, &overrides, None)?, out),
        Command::Train { data, out } => cmd_train(&resolve_config(&cli, &overrides, None)?, data, out),
        Command::Eval { checkpoint, data, split, out } => {
            cmd_eval(&resolve_config(&cli, &overrides, Some(&beside_checkpoint(checkpoint)))?, checkpoint, data, *split, out)
        }
        Command::Gradcheck { scope, seeds } => gradcheck(scope, seeds),
        Command::Ablate { axis, data, split, out } => ablate(&resolve_config(&cli, &overrides, None)?, axis, data, *split, out),
        Command::SamplePoints { checkpoint, data, split, index, origin, out } => sample_points(
            &resolve_config(&cli, &overrides, Some(&beside_checkpoint(checkpoint)))?,
            checkpoint,
            data,
            *split,
            *index,
            origin,
            out,
        ),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    create_dir(out)?;
    let scenes = generate_scenes(cfg)?;
    let mut files = write_dataset(out, cfg, &scenes)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    files.push(CONFIG_FILE.into());
    write_outputs(out, &files)?;
    let val = scenes.iter().filter(|(s, _)| *s == Split::Val).count();
    let fg = if scenes.is_empty() { 0.0 } else { scenes.iter().map(|(_, s)| s.fg_ratio()).sum::<f64>() / scenes.len() as f64 };
    println!("wrote {} scenes ({} train, {val} val), mean foreground ratio {fg:.4}", scenes.len(), scenes.len() - val);
    Ok(())
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> CliResult<()> {
    let ds = load_dataset(data)?;
    create_dir(out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    eprint!("{}", cfg.to_text());
    let log_path = out.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    writeln!(log, "{LOG_HEADER}")?;
    let mut files = vec![CONFIG_FILE.to_string(), "train_log.csv".to_string()];
    let every = cfg.train.checkpoint_every;
    let mut last = None;
    let result = train(cfg, &ds.train, |row, params| {
        writeln!(log, "{}", row.csv())?;
        if every > 0 && (row.iter + 1) % every == 0 {
            let name = format!("checkpoint_{:06}.pfc", row.iter + 1);
            save_checkpoint(params, &out.join(&name))?;
            files.push(name);
        }
        last = Some(row.clone());
        Ok(())
    });
    log.flush()?;
    let params = result?;
    save_checkpoint(&params, &out.join("checkpoint_final.pfc"))?;
    files.push("checkpoint_final.pfc".into());
    write_outputs(out, &files)?;
    if let Some(r) = last {
        println!("trained {} iterations; last loss {:.4} (ce {:.4}, bce {:.4})", r.iter + 1, r.loss.total, r.loss.ce, r.loss.bce_total);
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, split: Split, out: &Path) -> CliResult<()> {
    let params = load_checkpoint::<f32>(checkpoint)?;
    let ds = load_dataset(data)?;
    let report = MetricReport::from_totals(&evaluate(&params, cfg, ds.split(split))?, cfg)?;
    create_dir(out)?;
    let files = [
        ("report_classes.csv", report.class_csv()),
        ("report_summary.csv", report.summary_csv()),
        ("report.txt", report.text()),
        (CONFIG_FILE, cfg.to_text()),
    ];
    for (name, text) in &files {
        write_text(&out.join(name), text)?;
    }
    write_outputs(out, &files.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>())?;
    print!("{}", report.text());
    Ok(())
}

fn gradcheck(scope: &str, seeds: &[u64]) -> CliResult<()> {
    let results = run_suite(scope, seeds)?;
    if results.is_empty() {
        return Err(CliError::Usage(format!("no gradient check named {scope:?}")));
    }
    println!("{:<28}{:>6}{:>14}{:>8}{:>9}  status", "case", "seed", "max_rel_err", "probes", "skipped");
    for r in &results {
        let status = if r.outcome.passed() { "ok" } else { "FAIL" };
        let o = &r.outcome;
        println!("{:<28}{:>6}{:>14.3e}{:>8}{:>9}  {status}", r.name, r.seed, o.max_rel_err, o.probes, o.skipped);
    }
    let failed = results.iter().filter(|r| !r.outcome.passed()).count();
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} checks exceed relative error {TOLERANCE:e}", results.len())));
    }
    println!("all {} checks within {TOLERANCE:e}", results.len());
    Ok(())
}

fn ablate(cfg: &RunConfig, axis: &str, data: &Path, split: Split, out: &Path) -> CliResult<()> {
    let ds = load_dataset(data)?;
    eprint!("{}", cfg.to_text());
    let rows = run_ablation(axis, cfg, &ds, split)?;
    create_dir(out)?;
    let name = format!("ablation_{axis}.csv");
    let csv = ablation_csv(&rows);
    write_text(&out.join(&name), &csv)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    write_outputs(out, &[name, CONFIG_FILE.into()])?;
    print!("{csv}");
    Ok(())
}

const SALIENT_RGB: [u8; 3] = [255, 0, 0];
const BOUNDARY_RGB: [u8; 3] = [0, 255, 255];

fn parse_origin(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("origin {s:?} is not row,col"));
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn sample_points(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    split: Split,
    index: usize,
    origin: &str,
    out: &Path,
) -> CliResult<()> {
    let net = cfg.network_config();
    if net.pfm_enabled_gaps.is_empty() {
        return Err(CliError::Usage("no point-flow module is enabled".into()));
    }
    let params = load_checkpoint::<f32>(checkpoint)?;
    params.check_compatible(&net)?;
    let ds = load_dataset(data)?;
    let scene = ds
        .split(split)
        .get(index)
        .ok_or_else(|| CliError::Usage(format!("{} split has no scene {index}", split.as_str())))?;
    let size = cfg.data.crop_size;
    let crop = crop_at(scene, parse_origin(origin)?, size)?.sample;

    let mut tape = Tape::<f32>::new();
    let vars = params.attach(&mut tape, false);
    let image = tape.constant(Tensor::from_vec(&[1, 3, size, size], crop.image.data().to_vec())?);
    let fwd = pfnet_forward(&mut tape, &vars, image, &net, 0)?;

    create_dir(out)?;
    let mut overlay = ppm_bytes(&crop.image)?;
    let header = overlay.len() - 3 * size * size;
    let mut files = Vec::new();
    for gp in &fwd.points {
        let mut csv = String::from("batch,flow,u,v,score,row,col\n");
        let flows = [("salient", &gp.salient, SALIENT_RGB), ("boundary", &gp.boundary, BOUNDARY_RGB)];
        for (flow, sets, rgb) in flows {
            for (b, set) in sets.iter().enumerate() {
                for (p, score) in set.points.iter().zip(&set.scores) {
                    let (row, col) = p.cell(size, size);
                    csv.push_str(&format!("{b},{flow},{},{},{score},{row},{col}\n", p.u, p.v));
                    let at = header + 3 * (row * size + col);
                    overlay[at..at + 3].copy_from_slice(&rgb);
                }
            }
        }
        let name = format!("points_gap{}.csv", gp.gap);
        write_text(&out.join(&name), &csv)?;
        files.push(name);
    }
    fs::write(out.join("overlay.ppm"), &overlay).map_err(|e| CliError::io(&out.join("overlay.ppm"), e))?;
    files.push("overlay.ppm".into());
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;
    files.push(CONFIG_FILE.into());
    write_outputs(out, &files)?;
    for gp in &fwd.points {
        let (s, b) = (gp.salient[0].len(), gp.boundary.first().map_or(0, |p| p.len()));
        println!("gap {}: {s} salient + {b} boundary points on a {}x{} grid", gp.gap, gp.grid.0, gp.grid.1);
    }
    Ok(())
}
