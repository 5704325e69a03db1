//! `mcstra` command-line tool: masks, PSFs, undersampling, training,
//! reconstruction, evaluation sweeps, gradient checks and ablations.
//!
//! Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};

use mcstra::data::{build_dataset, write_atomic, Dataset, DatasetSpec, Image, MaskKind, MaskProtocol, Split};
use mcstra::gradsuite::{end_to_end_check, op_suite, END_TO_END_TOLERANCE, OP_TOLERANCE};
use mcstra::kspace::{add_complex_noise, fft2c, ifft2c, psf_of_mask, ComplexRaster, SamplingMask, Snr};
use mcstra::model::{mcstra_forward, Ablation, Sample};
use mcstra::training::{
    evaluate, load_checkpoint, run_ablations, save_ablation_csv, save_checkpoint, train, RunConfig, Sweep, TrainLog,
    TrainState,
};
use mcstra::{Error, Result};

#[derive(Parser)]
#[command(name = "mcstra", version, about = "Convolution-free cascaded Swin-Unet MRI reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a Cartesian line mask and write it as a '0'/'1' text line.
    Mask(MaskArgs),
    /// Write the PSF magnitude of a mask as PGM (plus the mask and aliased phantom panels).
    Psf(PsfArgs),
    /// Render a Shepp-Logan phantom as a complex raster.
    Phantom(PhantomArgs),
    /// Synthesise a phantom dataset directory.
    Dataset(DatasetArgs),
    /// Transform, mask and optionally add noise to an image raster.
    Undersample(UndersampleArgs),
    /// Train a model from a configuration file on a dataset directory.
    Train(TrainArgs),
    /// Reconstruct undersampled k-space with a trained checkpoint.
    Reconstruct(ReconstructArgs),
    /// Run an evaluation sweep and write the metrics CSV.
    Eval(EvalArgs),
    /// Finite-difference check of every operation and of the full model.
    Gradcheck(GradcheckArgs),
    /// Train pipeline variants side by side and write a comparison CSV.
    Ablate(AblateArgs),
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got '{s}'")),
    }
}

fn unit_fraction(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("expected a number in (0, 1), got '{s}'")),
    }
}

fn parse_kind(s: &str) -> std::result::Result<MaskKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_snr(s: &str) -> std::result::Result<Snr, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sweep(s: &str) -> std::result::Result<Sweep, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_tag(s: &str) -> std::result::Result<Ablation, String> {
    s.trim().parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct MaskGeometry {
    #[arg(long, value_parser = positive_usize)]
    width: usize,
    #[arg(long, value_parser = positive_usize)]
    accel: usize,
    #[arg(long, value_parser = unit_fraction, default_value = "0.08")]
    center_frac: f64,
    #[arg(long, value_parser = parse_kind, default_value = "random")]
    kind: MaskKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl MaskGeometry {
    fn build(&self) -> Result<SamplingMask> {
        // Volume 0's evaluation mask of a protocol keyed by `seed`.
        MaskProtocol::new(self.kind, self.accel, self.center_frac).volume_mask(self.width, self.seed, 0, None)
    }
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    geometry: MaskGeometry,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PsfArgs {
    #[command(flatten)]
    geometry: MaskGeometry,
    #[arg(long, value_parser = positive_usize)]
    height: usize,
    /// Use this mask file instead of drawing one.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// PSF magnitude PGM.
    #[arg(long)]
    out: PathBuf,
    /// Also write the 2D sampling pattern as PGM.
    #[arg(long)]
    mask_image: Option<PathBuf>,
    /// Also write the zero-filled Shepp-Logan phantom under this mask as PGM.
    #[arg(long)]
    aliased: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, value_parser = positive_usize, default_value = "64")]
    size: usize,
    /// 0 renders the reference phantom; other seeds perturb its ellipses.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long, value_parser = positive_usize, default_value = "12")]
    volumes: usize,
    #[arg(long, value_parser = positive_usize, default_value = "4")]
    slices: usize,
    #[arg(long, value_parser = positive_usize, default_value = "64")]
    size: usize,
    #[arg(long, value_parser = unit_fraction, default_value = "0.75")]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiply images by a smooth random phase.
    #[arg(long)]
    phase: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct UndersampleArgs {
    /// Image-domain complex raster (CRAS1).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Target SNR in dB, or 'inf' for no noise.
    #[arg(long, value_parser = parse_snr, default_value = "inf")]
    snr_db: Snr,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Undersampled k-space (CRAS1).
    #[arg(long)]
    out: PathBuf,
    /// Zero-filled magnitude PGM (default: output path with .pgm extension).
    #[arg(long)]
    zero_filled: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save a numbered checkpoint after every this many epochs (0 = final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Undersampled k-space (CRAS1).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fully sampled image raster for a metric summary.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// clean, accel, mask or snr.
    #[arg(long, value_parser = parse_sweep, default_value = "clean")]
    protocol: Sweep,
    #[arg(long, default_value = "val")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model configuration; its size is reduced to 16×16 for the pipeline check.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of parameter tensors probed entry by entry.
    #[arg(long, value_parser = unit_fraction, default_value = "0.05")]
    fraction: f64,
    /// Skip the whole-model check.
    #[arg(long)]
    ops_only: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated variant tags, e.g. A,D,F.
    #[arg(long, value_parser = parse_tag, value_delimiter = ',', default_value = "A,B,C,D,E,F")]
    tags: Vec<Ablation>,
    #[arg(long)]
    out: PathBuf,
}

fn load_raster(path: &Path) -> Result<ComplexRaster> {
    ComplexRaster::load(path)
}

fn cmd_mask(a: &MaskArgs) -> Result<()> {
    let m = a.geometry.build()?;
    m.save(&a.out)?;
    println!(
        "{}: {} of {} lines sampled, {} center lines",
        a.out.display(),
        m.sampled_count(),
        m.width(),
        m.center_count()
    );
    Ok(())
}

fn cmd_psf(a: &PsfArgs) -> Result<()> {
    let mask = match &a.mask {
        Some(p) => SamplingMask::load(p)?,
        None => a.geometry.build()?,
    };
    let psf = psf_of_mask(&mask, a.height)?;
    let (h, w) = psf.shape();
    Image::new(h, w, psf.magnitude())?.save_pgm(&a.out)?;
    if let Some(p) = &a.mask_image {
        let m2 = mask.to_2d(a.height);
        let v = m2.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Image::new(a.height, mask.width(), v)?.save_pgm_scaled(p, 1.0)?;
    }
    if let Some(p) = &a.aliased {
        let img = mcstra::data::shepp_logan(a.height, mask.width())?;
        let zf = ifft2c(&mask.apply(&fft2c(&img)?)?)?;
        Image::new(a.height, mask.width(), zf.magnitude())?.save_pgm(p)?;
    }
    println!("{}: PSF of {}-line mask at height {}", a.out.display(), mask.width(), a.height);
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    use mcstra::data::{perturbed_phantom, shepp_logan, PhantomSpec};
    let img = if a.seed == 0 {
        shepp_logan(a.size, a.size)?
    } else {
        perturbed_phantom(&PhantomSpec::shepp_logan(), a.seed, a.size, a.size)?
    };
    img.save(&a.out)?;
    if let Some(p) = &a.pgm {
        Image::new(a.size, a.size, img.magnitude())?.save_pgm(p)?;
    }
    Ok(())
}

fn cmd_dataset(a: &DatasetArgs) -> Result<()> {
    let mut spec = DatasetSpec::new(a.volumes, a.slices, a.size, a.size, a.train_frac, a.seed);
    spec.phase = a.phase;
    let ds = build_dataset(&spec)?;
    ds.save(&a.out_dir)?;
    println!(
        "{}: {} slices ({} train volumes, {} val volumes)",
        a.out_dir.display(),
        ds.records.len(),
        ds.volumes(Split::Train).len(),
        ds.volumes(Split::Val).len()
    );
    Ok(())
}

fn cmd_undersample(a: &UndersampleArgs) -> Result<()> {
    let img = load_raster(&a.input)?;
    let mask = SamplingMask::load(&a.mask)?;
    if mask.width() != img.width() {
        return Err(Error::Geometry(format!(
            "mask {} has {} lines but image {} is {} wide",
            a.mask.display(),
            mask.width(),
            a.input.display(),
            img.width()
        )));
    }
    let y = add_complex_noise(&mask.apply(&fft2c(&img)?)?, a.snr_db, a.seed)?;
    y.save(&a.out)?;
    let zf_path = a.zero_filled.clone().unwrap_or_else(|| a.out.with_extension("pgm"));
    let zf = ifft2c(&y)?;
    Image::new(zf.height(), zf.width(), zf.magnitude())?.save_pgm(&zf_path)?;
    println!("{} and {} written", a.out.display(), zf_path.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let rc = RunConfig::load(&a.config)?;
    let data = Dataset::load(&a.data)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut state = match &a.resume {
        Some(p) => {
            let (saved, state) = load_checkpoint(p)?;
            if saved.model != rc.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was trained with a different model configuration",
                    p.display()
                )));
            }
            state
        }
        None => TrainState::new(&rc.model, &rc.train)?,
    };
    let mut log = TrainLog::default();
    let log_path = a.out_dir.join("train_log.csv");
    // Train one epoch at a time so intermediate checkpoints can be written.
    let one_epoch = mcstra::training::TrainConfig { epochs: 1, ..rc.train.clone() };
    for _ in 0..rc.train.epochs {
        if rc.train.max_steps > 0 && state.step() >= rc.train.max_steps {
            break;
        }
        train(&rc.model, &one_epoch, &data, &mut state, &mut log, &mut |s| {
            eprintln!(
                "step {:>6} epoch {:>3} loss {:.6} grad-norm {:.4}",
                s.step, s.epoch, s.loss, s.grad_norm
            );
        })?;
        if let Some(v) = log.val_rows().last() {
            eprintln!(
                "epoch {:>3} val loss {:.6} nmse {:.5} psnr {:.3} ssim {:.4}",
                v.epoch,
                v.loss.unwrap_or(f64::NAN),
                v.nmse.unwrap_or(f64::NAN),
                v.psnr.unwrap_or(f64::NAN),
                v.ssim.unwrap_or(f64::NAN)
            );
        }
        log.save(&log_path)?;
        if a.checkpoint_every > 0 && state.epoch % a.checkpoint_every == 0 {
            save_checkpoint(&a.out_dir.join(format!("epoch{:04}.mckp", state.epoch)), &rc, &state)?;
        }
    }
    log.save(&log_path)?;
    let ck = a.out_dir.join("final.mckp");
    save_checkpoint(&ck, &rc, &state)?;
    println!("{} written after {} steps; log in {}", ck.display(), state.step(), log_path.display());
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs) -> Result<()> {
    let (rc, state) = load_checkpoint(&a.checkpoint)?;
    let y_hat = load_raster(&a.input)?;
    let mask = SamplingMask::load(&a.mask)?;
    let y_full = match &a.reference {
        Some(p) => Some(fft2c(&load_raster(p)?)?),
        None => None,
    };
    let sample = Sample {
        y_hat: &y_hat,
        mask: &mask,
        y_full: y_full.as_ref(),
    };
    let (img, report) = mcstra_forward(&state.store, &rc.model, &state.params, sample).map_err(|e| match e {
        Error::Geometry(m) => Error::Geometry(format!("{}: {m}", a.input.display())),
        other => other,
    })?;
    img.save_pgm(&a.out)?;
    if let (Some(n), Some(p), Some(s)) = (report.nmse, report.psnr, report.ssim) {
        println!("nmse={n:.6} psnr={p:.3} ssim={s:.4}");
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (rc, state) = load_checkpoint(&a.checkpoint)?;
    let data = Dataset::load(&a.data)?;
    let table = evaluate(&rc.model, Some((&state.store, &state.params)), &data, a.split, &a.protocol, a.seed)?;
    table.save(&a.out)?;
    println!("{}: {} rows", a.out.display(), table.entries.len());
    Ok(())
}

/// Returns whether every check passed.
fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.model,
        None => mcstra::model::McstraConfig::toy(),
    };
    let mut ok = true;
    for c in op_suite(a.seed)? {
        let pass = c.passed();
        ok &= pass;
        println!("{:<28} {:.3e} {}", c.name, c.rel_err, if pass { "ok" } else { "FAIL" });
    }
    println!("threshold (ops) {OP_TOLERANCE:.0e}");
    if !a.ops_only {
        cfg.height = 16;
        cfg.width = 16;
        let e = end_to_end_check(&cfg, a.fraction, a.seed)?;
        ok &= e.passed();
        println!(
            "{:<28} {:.3e} {} ({} probes, threshold {END_TO_END_TOLERANCE:.0e})",
            "full_model",
            e.max_rel_err,
            if e.passed() { "ok" } else { "FAIL" },
            e.checks.len()
        );
    }
    Ok(ok)
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let rc = RunConfig::load(&a.config)?;
    let data = Dataset::load(&a.data)?;
    let results = run_ablations(&rc, &a.tags, &data, &mut |tag, s| {
        eprintln!("[{tag}] step {:>5} loss {:.6}", s.step, s.loss);
    })?;
    save_ablation_csv(&a.out, &results)?;
    for r in &results {
        let dir = a.out.with_extension(format!("{}.log.csv", r.ablation));
        write_atomic(&dir, r.log.to_csv().as_bytes())?;
    }
    println!("{}: {} variants", a.out.display(), results.len());
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MCSTRA_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::InvalidArgument(format!("MCSTRA_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match &cli.command {
        Command::Mask(a) => cmd_mask(a)?,
        Command::Psf(a) => cmd_psf(a)?,
        Command::Phantom(a) => cmd_phantom(a)?,
        Command::Dataset(a) => cmd_dataset(a)?,
        Command::Undersample(a) => cmd_undersample(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Reconstruct(a) => cmd_reconstruct(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Gradcheck(a) => return cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a)?,
    }
    Ok(true)
}

/// Usage line of the subcommand named on the command line, or of the tool.
fn print_usage() {
    let mut cmd = Cli::command();
    cmd.build();
    let name = std::env::args().nth(1).unwrap_or_default();
    let usage = match cmd.find_subcommand_mut(&name) {
        Some(sub) => sub.render_usage(),
        None => cmd.render_usage(),
    };
    eprintln!("\n{usage}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            print_usage();
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
