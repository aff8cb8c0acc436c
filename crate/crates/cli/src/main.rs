use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use bodycomp::checkpoint::{checkpoint_files, load_checkpoint};
use bodycomp::inference::{argmax_labels, predict_volume, SlabWeighting};
use bodycomp::metrics::{icc_with, mean_foreground_dice, DiceResult, IccKind};
use bodycomp::nn::gradcheck;
use bodycomp::phantom::{generate_phantom, sparsify_annotation, PhantomSpec};
use bodycomp::preproc::downscale_xy;
use bodycomp::quantify::{quantify, Compartment, CompositionReport, SourceMeta};
use bodycomp::report::{parse_report_json, write_report, SvgOptions};
use bodycomp::trainer::{
    load_dataset, make_cv_folds, train_fold_with, TrainConfig, DENSE_LABELS_SUFFIX, HU_SUFFIX, LABELS_SUFFIX,
};
use bodycomp::volume::{load_hu, load_labels, save_probabilities, save_volume, HuVolume, LabelVolume};

#[derive(Parser)]
#[command(name = "bodycomp", version, about = "Body composition analysis from abdominal CT volumes")]
struct Cli {
    /// Master seed; overrides the seed of a training config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic abdomen phantoms with exact labels.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 40)]
        nz: usize,
        /// In-plane size in voxels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Keep every n-th slice annotated in the training labels, Ignore elsewhere.
        #[arg(long, default_value_t = 5)]
        sparse_period: usize,
    },
    /// Train one model per cross-validation fold.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train only this fold.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment a volume with an ensemble of checkpoints.
    Infer {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the averaged class probabilities.
        #[arg(long)]
        probs: Option<PathBuf>,
        /// Also quantify and write the CSV/JSON/SVG report into this directory.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum)]
        weighting: Option<Weighting>,
        /// Gaussian width as a fraction of the window depth.
        #[arg(long, default_value_t = 0.25)]
        sigma: f64,
    },
    /// Measure SAT, VAT and muscle per slice.
    Quantify {
        #[arg(long)]
        hu: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice per class, and ICC of the per-slice volumes when --hu is given.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        hu: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Icc::Absolute)]
        icc: Icc,
    },
    /// Finite-difference verification of every layer and loss.
    Gradcheck,
    /// Re-render CSV and SVG from a JSON report.
    Report {
        #[arg(long)]
        json: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Weighting {
    Tent,
    Gaussian,
}

#[derive(Clone, Copy, ValueEnum)]
enum Icc {
    Absolute,
    Consistency,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::Phantom {
            out,
            count,
            nz,
            size,
            sparse_period,
        } => phantom(&out, seed.unwrap_or(0), count, nz, size, sparse_period)?,
        Command::Train {
            config,
            data,
            out,
            fold,
            epochs,
        } => train(config.as_deref(), &data, &out, seed, fold, epochs)?,
        Command::Infer {
            checkpoints,
            input,
            out,
            probs,
            report,
            weighting,
            sigma,
        } => infer(&checkpoints, &input, &out, probs.as_deref(), report.as_deref(), weighting, sigma)?,
        Command::Quantify { hu, labels, out } => {
            let report = quantify_files(&hu, &labels)?.with_source(SourceMeta {
                input_id: stem(&hu),
                ..Default::default()
            });
            let paths = write_report(&out, "report", &report, &SvgOptions::default())?;
            println!("{}", paths.csv.display());
        }
        Command::Evaluate { pred, gt, hu, icc } => evaluate(&pred, &gt, hu.as_deref(), icc)?,
        Command::Gradcheck => return gradcheck_cmd(seed.unwrap_or(0)),
        Command::Report { json, out } => {
            let text = std::fs::read_to_string(&json).with_context(|| format!("reading {}", json.display()))?;
            let report = parse_report_json(&text)?;
            write_report(&out, &stem(&json), &report, &SvgOptions::default())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn stem(p: &Path) -> String {
    let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("volume");
    name.strip_suffix(HU_SUFFIX)
        .or_else(|| name.strip_suffix(".vbc"))
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(name)
        .to_string()
}

fn phantom(out: &Path, seed: u64, count: usize, nz: usize, size: usize, period: usize) -> Result<()> {
    ensure!(count >= 1, "--count must be at least 1");
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for i in 0..count as u64 {
        let s = seed + i;
        let p = generate_phantom(&PhantomSpec::sampled(s, nz, size))?;
        let id = format!("phantom{s:04}");
        save_volume(&p.hu, out.join(format!("{id}{HU_SUFFIX}")))?;
        save_volume(&p.clean_hu, out.join(format!("{id}_clean.vbc")))?;
        save_volume(&sparsify_annotation(&p.labels, period)?, out.join(format!("{id}{LABELS_SUFFIX}")))?;
        save_volume(&p.labels, out.join(format!("{id}{DENSE_LABELS_SUFFIX}")))?;
        let comp = out.join(format!("{id}_composition.json"));
        std::fs::write(&comp, serde_json::to_string_pretty(&p.composition)?)?;
        println!("{id}");
    }
    Ok(())
}

fn train(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, fold: Option<usize>, epochs: Option<usize>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let dataset = load_dataset(data)?;
    let ids: Vec<String> = dataset.iter().map(|c| c.id.clone()).collect();
    let folds = make_cv_folds(&ids, cfg.folds, cfg.seed)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("folds.json"), serde_json::to_string_pretty(&folds)?)?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let which: Vec<usize> = match fold {
        Some(f) => {
            ensure!(f < cfg.folds, "fold {f} out of range for {} folds", cfg.folds);
            vec![f]
        }
        None => (0..cfg.folds).collect(),
    };
    for f in which {
        let result = train_fold_with(&cfg, &dataset, f, &mut |r| {
            let val = r.val.map(|v| format!(" val_dice {:.4}", v.mean)).unwrap_or_default();
            eprintln!("fold {f} epoch {} lr {:e} loss {:.4}{val}", r.epoch, r.lr, r.loss);
        })?;
        let hash = result.write(out)?;
        println!("{} {hash}", out.join(result.checkpoint_name()).display());
    }
    Ok(())
}

fn infer(
    dir: &Path,
    input: &Path,
    out: &Path,
    probs_out: Option<&Path>,
    report_dir: Option<&Path>,
    weighting: Option<Weighting>,
    sigma: f64,
) -> Result<()> {
    let files = checkpoint_files(dir)?;
    let mut models = Vec::new();
    let mut hashes = Vec::new();
    let mut config: Option<TrainConfig> = None;
    for f in &files {
        let (m, meta, hash) = load_checkpoint(f)?;
        let c: TrainConfig = serde_json::from_value(meta.config.clone())
            .with_context(|| format!("config stored in {}", f.display()))?;
        if let Some(prev) = &config {
            ensure!(
                prev.windows == c.windows && prev.downscale == c.downscale && prev.inference == c.inference,
                "{} was trained with different preprocessing",
                f.display()
            );
        }
        config.get_or_insert(c);
        models.push(m);
        hashes.push(hash);
    }
    let cfg = config.expect("at least one checkpoint");
    let mut opts = cfg.inference;
    match weighting {
        Some(Weighting::Tent) => opts.weighting = SlabWeighting::Tent,
        Some(Weighting::Gaussian) => opts.weighting = SlabWeighting::Gaussian { sigma },
        None => {}
    }
    let hu = load_hu(input)?;
    let probs = predict_volume(&models, &hu, &cfg.windows.resolve()?, cfg.downscale, &opts)?;
    let labels = argmax_labels(&probs);
    save_volume(&labels, out)?;
    if let Some(p) = probs_out {
        save_probabilities(&probs, p)?;
    }
    if let Some(rd) = report_dir {
        let grid = downscale_xy(&hu, cfg.downscale)?;
        let report = quantify(&grid, &labels)?.with_source(SourceMeta {
            input_id: stem(input),
            checkpoint_hashes: hashes,
            config: Some(cfg.to_value()),
        });
        write_report(rd, "report", &report, &SvgOptions::default())?;
    }
    Ok(())
}

/// Brings the HU volume onto the label grid when the labels were produced at
/// a downscaled resolution.
fn hu_on_label_grid(hu: HuVolume, labels: &LabelVolume) -> Result<HuVolume> {
    let (h, l) = (hu.dims(), labels.dims());
    if h == l {
        return Ok(hu);
    }
    ensure!(h.nz == l.nz && l.ny > 0 && l.nx > 0, "HU dims {:?} vs label dims {:?}", h.as_array(), l.as_array());
    let f = h.ny / l.ny;
    if f >= 2 && h.ny == f * l.ny && h.nx == f * l.nx {
        return Ok(downscale_xy(&hu, f)?);
    }
    bail!("HU dims {:?} vs label dims {:?}", h.as_array(), l.as_array())
}

fn quantify_files(hu: &Path, labels: &Path) -> Result<CompositionReport> {
    let l = load_labels(labels)?;
    let h = hu_on_label_grid(load_hu(hu)?, &l)?;
    Ok(quantify(&h, &l)?)
}

fn evaluate(pred: &Path, gt: &Path, hu: Option<&Path>, kind: Icc) -> Result<()> {
    let p = load_labels(pred)?;
    let g = load_labels(gt)?;
    let d = mean_foreground_dice(&p, &g)?;
    println!("{}", DiceResult::csv_header());
    println!("{}", d.csv_row());
    if let Some(hu) = hu {
        let kind = match kind {
            Icc::Absolute => IccKind::AbsoluteAgreement,
            Icc::Consistency => IccKind::Consistency,
        };
        let h = hu_on_label_grid(load_hu(hu)?, &g)?;
        let rp = quantify(&h, &p)?;
        let rg = quantify(&h, &g)?;
        println!("compartment,icc");
        for (name, c) in [("sat", Compartment::Sat), ("vat", Compartment::Vat), ("muscle", Compartment::MuscleTissue)] {
            let v = icc_with(&rp.series(c), &rg.series(c), kind)?;
            println!("{name},{v:.6}");
        }
    }
    Ok(())
}

fn gradcheck_cmd(seed: u64) -> Result<ExitCode> {
    let start = std::time::Instant::now();
    let suite = gradcheck::run_suite(seed)?;
    let mut ok = true;
    for e in &suite {
        let pass = e.passes();
        ok &= pass;
        println!(
            "{:<40} max_rel_error {:.3e}  tolerance {:.0e}  checked {:>4}  kinks {:>3}  {}",
            e.result.name,
            e.result.max_rel_error,
            e.tolerance,
            e.result.checked,
            e.result.kinks,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    println!("elapsed {:.2}s", start.elapsed().as_secs_f64());
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
