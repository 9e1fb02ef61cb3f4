//! `paired-sr`: command-line driver for each pipeline stage and the full
//! experiment runner.
//!
//! Exit codes: 0 on success, 1 on invalid input (usage, missing or malformed
//! files, out-of-range parameters), 2 when processing valid input fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paired_sr::harness::{
    align_pair, align_with, run, synthesize_pair, synthetic_specimen, write_run, DegradationSpec, ImagePair, Manifest,
};
use paired_sr::image::bicubic_upsample;
use paired_sr::io::{load_image, save_image};
use paired_sr::lbnlm::{super_resolve, NlmConfig};
use paired_sr::library::{build_library, LibraryConfig, PairPool, PairedLibrary};
use paired_sr::metrics::{evaluate, EvalConfig};
use paired_sr::registration::{displacement_csv, match_locations, GlobalTransform, MatchConfig, SearchSpace};
use paired_sr::{Error, GrayImage, Result};

/// Paired-image super-resolution for electron microscope images.
///
/// Every parameter defaults to the published value.
#[derive(Debug, Parser)]
#[command(name = "paired-sr", version, propagate_version = true)]
struct Cli {
    /// Worker threads for parallel stages; defaults to the available cores.
    /// Results do not depend on this value.
    #[arg(long, global = true, env = "PAIRED_SR_THREADS")]
    threads: Option<usize>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Globally register the upsampled LR image onto the HR image.
    Register {
        #[command(flatten)]
        pair: RawPairArgs,
        /// Output transform record (TOML).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        search: SearchArgs,
    },
    /// Match patches between an aligned pair and write their local displacements as CSV.
    Match {
        #[command(flatten)]
        pair: PairArgs,
        /// Output CSV: row, col, dy, dx per matched patch, in aligned HR coordinates.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        matching: MatchArgs,
    },
    /// Build a paired patch library from an image pair.
    BuildLib {
        #[command(flatten)]
        pair: PairArgs,
        /// Output library file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        matching: MatchArgs,
        #[command(flatten)]
        library: LibraryArgs,
    },
    /// Super-resolve an LR image 2x with a library.
    Sr {
        #[arg(long)]
        lr: PathBuf,
        #[arg(long)]
        lib: PathBuf,
        /// Output image, twice the LR size.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        nlm: NlmArgs,
    },
    /// Score a reconstruction against ground truth and the bicubic baseline.
    Eval {
        /// Ground-truth HR image.
        #[arg(long)]
        hr: PathBuf,
        /// Reconstruction, same size as the HR image.
        #[arg(long)]
        sr: PathBuf,
        /// LR image the bicubic baseline is computed from; half the HR size.
        #[arg(long)]
        lr: PathBuf,
        /// Output report (TOML); printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Generate a synthetic pair with ground-truth records.
    Synth(SynthArgs),
    /// Run a full experiment described by a manifest.
    Pipeline {
        /// Manifest (TOML) listing the pairs and any parameter overrides.
        #[arg(long)]
        manifest: PathBuf,
        /// Training strategy; overrides the manifest.
        #[arg(long, value_parser = ["self", "pooled"])]
        strategy: Option<String>,
        /// Output directory; overrides the manifest.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RawPairArgs {
    /// HR image (8-bit grayscale PNG or PGM).
    #[arg(long)]
    hr: PathBuf,
    /// LR image at half the HR resolution.
    #[arg(long)]
    lr: PathBuf,
}

#[derive(Debug, Args)]
struct PairArgs {
    #[command(flatten)]
    raw: RawPairArgs,
    /// Stored transform from `register`; the pair is registered when absent.
    #[arg(long, conflicts_with = "aligned")]
    registration: Option<PathBuf>,
    /// The pair is already aligned: the HR image is exactly twice the LR image.
    #[arg(long)]
    aligned: bool,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Global shift search range, full-resolution pixels.
    #[arg(long, default_value_t = SearchSpace::default().coarse_shift_range)]
    shift_range: u32,
    /// Global rotation search range, degrees.
    #[arg(long, default_value_t = SearchSpace::default().theta_range)]
    theta_range: f64,
}

impl SearchArgs {
    fn config(&self) -> SearchSpace {
        SearchSpace {
            coarse_shift_range: self.shift_range,
            theta_range: self.theta_range,
            ..SearchSpace::default()
        }
    }
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Patch side n (odd).
    #[arg(long, default_value_t = MatchConfig::default().n)]
    n: usize,
    /// Minimum HR patch variance for a patch to be matched.
    #[arg(long, default_value_t = MatchConfig::default().variance_threshold)]
    variance_threshold: f64,
    /// Local search radius, pixels.
    #[arg(long, default_value_t = MatchConfig::default().radius)]
    radius: usize,
    /// Spacing of patch centers, pixels.
    #[arg(long, default_value_t = MatchConfig::default().stride)]
    stride: usize,
}

impl MatchArgs {
    fn config(&self) -> MatchConfig {
        MatchConfig {
            n: self.n,
            variance_threshold: self.variance_threshold,
            radius: self.radius,
            stride: self.stride,
        }
    }
}

#[derive(Debug, Args)]
struct LibraryArgs {
    /// Target library size L.
    #[arg(long, default_value_t = LibraryConfig::default().size)]
    size: usize,
    /// Category count k.
    #[arg(long, default_value_t = LibraryConfig::default().categories)]
    categories: usize,
    /// Oversampling factor K: K*L pairs are clustered.
    #[arg(long, default_value_t = LibraryConfig::default().oversample)]
    oversample: usize,
    /// Sampling and clustering seed.
    #[arg(long, default_value_t = LibraryConfig::default().seed)]
    seed: u64,
}

impl LibraryArgs {
    fn config(&self) -> LibraryConfig {
        LibraryConfig {
            size: self.size,
            categories: self.categories,
            oversample: self.oversample,
            seed: self.seed,
            ..LibraryConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct NlmArgs {
    /// NLM weight scale sigma_n, in intensity units.
    #[arg(long, default_value_t = NlmConfig::default().sigma_n)]
    sigma_n: f64,
    /// Search the whole library instead of the query's nearest category.
    #[arg(long)]
    no_accelerate: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Canny high threshold, as a fraction of the maximum gradient magnitude.
    #[arg(long, default_value_t = EvalConfig::default().canny)]
    canny: f64,
    /// Border excluded from every metric, pixels.
    #[arg(long, default_value_t = EvalConfig::default().border)]
    border: usize,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Ground-truth image; a specimen-like image is generated when absent.
    #[arg(long, conflicts_with = "size")]
    truth: Option<PathBuf>,
    /// Size of the generated ground truth, WIDTHxHEIGHT.
    #[arg(long, default_value = "256x256", value_parser = parse_size)]
    size: (usize, usize),
    /// Seed for the generated ground truth and the degradation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving hr.png, lr.png, truth.toml (and specimen.png when generated).
    #[arg(long)]
    out_dir: PathBuf,
    /// Gaussian blur applied before downsampling, LR-stage pixels.
    #[arg(long, default_value_t = 0.0)]
    blur_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma_hr: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma_lr: f64,
    #[arg(long, default_value_t = 1.0)]
    contrast_gain: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    contrast_offset: f64,
    /// Global shift x, HR pixels.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    shift_x: f64,
    /// Global shift y, HR pixels.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    shift_y: f64,
    /// Global rotation, degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    rotation: f64,
    /// Peak local warp displacement, HR pixels.
    #[arg(long, default_value_t = 0.0)]
    warp_amplitude: f64,
    /// Local warp wavelength scale, HR pixels.
    #[arg(long, default_value_t = 64.0)]
    warp_scale: f64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size {s:?}: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w < 8 || h < 8 {
        return Err(format!("size {s:?} is too small; need at least 8x8"));
    }
    Ok((w, h))
}

/// Fails with `FileNotFound` unless every path is an existing file.
fn require_files<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::FileNotFound(p.to_path_buf()));
        }
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })
        }
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

impl PairArgs {
    fn check(&self) -> Result<()> {
        require_files([self.raw.hr.as_path(), self.raw.lr.as_path()])?;
        require_files(self.registration.as_deref())
    }

    /// Loads the pair and brings it into pixel-for-pixel 2:1 alignment.
    fn load_aligned(&self) -> Result<ImagePair> {
        let pair = ImagePair::new("input", load_image(&self.raw.hr)?, load_image(&self.raw.lr)?);
        if self.aligned {
            let (w, h) = pair.lr.dims();
            if pair.hr.dims() != (2 * w, 2 * h) {
                return Err(Error::DimensionMismatch(format!(
                    "--aligned needs the HR image to be twice the LR image, got {:?} and {:?}",
                    pair.hr.dims(),
                    pair.lr.dims()
                )));
            }
            return Ok(ImagePair {
                registration: Some(GlobalTransform::identity()),
                ..pair
            });
        }
        match &self.registration {
            Some(path) => align_with(&pair, &GlobalTransform::load(path)?),
            None => align_pair(&pair, &SearchSpace::default()),
        }
    }
}

fn cmd_register(pair: &RawPairArgs, out: &Path, search: &SearchArgs) -> Result<()> {
    require_files([pair.hr.as_path(), pair.lr.as_path()])?;
    let raw = ImagePair::new("input", load_image(&pair.hr)?, load_image(&pair.lr)?);
    let t = paired_sr::harness::register_pair(&raw, &search.config())?;
    ensure_parent(out)?;
    t.save(out)?;
    println!(
        "shift ({}, {}) px, rotation {} deg, mse {:.4}",
        t.shift_x, t.shift_y, t.theta, t.mse
    );
    Ok(())
}

fn cmd_match(pair: &PairArgs, out: &Path, matching: &MatchArgs) -> Result<()> {
    pair.check()?;
    let aligned = pair.load_aligned()?;
    let up = bicubic_upsample(&aligned.lr, 2)?;
    let matches = match_locations(&aligned.hr, &up, &matching.config())?;
    write_text(out, &displacement_csv(&matches))?;
    println!("{} matched patches", matches.len());
    Ok(())
}

fn cmd_build_lib(pair: &PairArgs, out: &Path, matching: &MatchArgs, library: &LibraryArgs) -> Result<()> {
    pair.check()?;
    let aligned = pair.load_aligned()?;
    let cfg = matching.config();
    let up = bicubic_upsample(&aligned.lr, 2)?;
    let matches = match_locations(&aligned.hr, &up, &cfg)?;
    let mut pool = PairPool::new(cfg.n)?;
    pool.add_region(aligned.hr, up, matches);
    let lib = build_library(&pool, &library.config())?;
    ensure_parent(out)?;
    lib.save(out)?;
    println!(
        "{} entries in {} categories, patch side {}",
        lib.len(),
        lib.categories(),
        lib.side()
    );
    Ok(())
}

fn cmd_sr(lr: &Path, lib: &Path, out: &Path, nlm: &NlmArgs) -> Result<()> {
    require_files([lr, lib])?;
    let library = PairedLibrary::load(lib)?;
    let cfg = NlmConfig {
        sigma_n: nlm.sigma_n,
        accelerate: !nlm.no_accelerate,
        n: library.side(),
    };
    cfg.validate()?;
    let sr = super_resolve(&load_image(lr)?, &library, &cfg)?;
    ensure_parent(out)?;
    save_image(&sr, out)
}

fn cmd_eval(hr: &Path, sr: &Path, lr: &Path, out: Option<&Path>, eval: &EvalArgs) -> Result<()> {
    require_files([hr, sr, lr])?;
    if !(eval.canny > 0.0 && eval.canny < 1.0) {
        return Err(invalid(format!("--canny must lie in (0, 1), got {}", eval.canny)));
    }
    let (hr, sr, lr): (GrayImage, GrayImage, GrayImage) = (load_image(hr)?, load_image(sr)?, load_image(lr)?);
    let up = bicubic_upsample(&lr, 2)?;
    let cfg = EvalConfig {
        canny: eval.canny,
        border: eval.border,
    };
    let report = evaluate(&hr, &sr, &up, &cfg)?;
    let text = report.to_record();
    match out {
        Some(path) => write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    require_files(args.truth.as_deref())?;
    let spec = DegradationSpec {
        blur_sigma: args.blur_sigma,
        noise_sigma_hr: args.noise_sigma_hr,
        noise_sigma_lr: args.noise_sigma_lr,
        contrast_gain: args.contrast_gain,
        contrast_offset: args.contrast_offset,
        global_shift: (args.shift_x, args.shift_y),
        global_rotation: args.rotation,
        local_warp_amplitude: args.warp_amplitude,
        local_warp_scale: args.warp_scale,
        seed: args.seed,
    };
    spec.validate()?;
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let truth = match &args.truth {
        Some(path) => load_image(path)?,
        None => {
            let img = synthetic_specimen(args.size.0, args.size.1, args.seed);
            save_image(&img, dir.join("specimen.png"))?;
            img
        }
    };
    let (pair, record) = synthesize_pair(&truth, &spec)?;
    save_image(&pair.hr, dir.join("hr.png"))?;
    save_image(&pair.lr, dir.join("lr.png"))?;
    record.save(dir.join("truth.toml"))?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_pipeline(manifest: &Path, strategy: Option<&str>, output_dir: Option<&Path>) -> Result<()> {
    require_files([manifest])?;
    let mut m = Manifest::load(manifest)?;
    if let Some(s) = strategy {
        m.strategy = s.parse()?;
    }
    if let Some(dir) = output_dir {
        m.output_dir = dir.to_path_buf();
    }
    let cfg = m.experiment()?;
    m.check_inputs()?;
    let pairs = m.load_pairs()?;
    log::info!("running {} training on {} pairs", m.strategy, pairs.len());
    let out = run(m.strategy, &pairs, &cfg)?;
    for s in &out.skipped {
        eprintln!("skipped {}: {}", s.pair_id, s.reason);
    }
    let summary = write_run(&out, &m.output_dir)?;
    println!("strategy: {}\n{summary}", m.strategy);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Register { pair, out, search } => cmd_register(pair, out, search),
        Command::Match { pair, out, matching } => cmd_match(pair, out, matching),
        Command::BuildLib {
            pair,
            out,
            matching,
            library,
        } => cmd_build_lib(pair, out, matching, library),
        Command::Sr { lr, lib, out, nlm } => cmd_sr(lr, lib, out, nlm),
        Command::Eval { hr, sr, lr, out, eval } => cmd_eval(hr, sr, lr, out.as_deref(), eval),
        Command::Synth(args) => cmd_synth(args),
        Command::Pipeline {
            manifest,
            strategy,
            output_dir,
        } => cmd_pipeline(manifest, strategy.as_deref(), output_dir.as_deref()),
    }
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(invalid("--threads must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| invalid(format!("cannot configure {n} threads: {e}")))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match init_threads(cli.threads).and_then(|()| dispatch(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 1 } else { 2 })
        }
    }
}
