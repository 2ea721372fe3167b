//! `vascsynth` command-line front-end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 filesystem
//! error, 3 data-contract violation (malformed or inconsistent inputs).

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vascsynth::dataset::{self, DatasetError, GenerateOptions};
use vascsynth::fusion::{self, FusionAccumulator, FusionError, WindowSpec};
use vascsynth::io::config::{parse_config, parse_config_str, Config, ConfigError};
use vascsynth::io::manifest::MANIFEST_FILE;
use vascsynth::io::nifti::{read_volume, write_volume, VolumeData};
use vascsynth::io::stream::{list_patch_files, read_patch_record};
use vascsynth::io::IoError;
use vascsynth::metrics::{self, Connectivity, MetricsReport};
use vascsynth::volume::{Shape, VolumeError, DEFAULT_VOXEL_SIZE_UM};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Io(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Io(_) => 2,
            Self::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Usage(m) | Self::Io(m) | Self::Data(m) => m,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        if e.is_filesystem() {
            Self::Io(e.to_string())
        } else {
            Self::Data(e.to_string())
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(e) => e.into(),
            DatasetError::Invalid(m) => Self::Usage(m),
            e @ DatasetError::ChecksumMismatch { .. } => Self::Data(e.to_string()),
        }
    }
}

impl From<FusionError> for CliError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::InvalidSpec(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        Self::Data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "vascsynth", version, about = "Synthetic vascular volumes, segmentation metrics and patch fusion")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate label volumes only (images can follow with gen-images).
    GenLabels(GenArgs),
    /// Synthesize images for a dataset previously made by gen-labels.
    GenImages(GenImagesArgs),
    /// Generate label and image pairs with a manifest.
    GenDataset(GenArgs),
    /// Rebuild every volume of a dataset from its manifest and verify checksums.
    Regenerate(RegenerateArgs),
    /// Compare a prediction with a reference segmentation.
    Evaluate(EvaluateArgs),
    /// Fuse overlapping patch predictions into one volume.
    Fuse(FuseArgs),
    /// Label connected components of a binary volume.
    Components(ComponentsArgs),
    /// Print the fully expanded configuration as TOML.
    ShowConfig(ParamArgs),
}

#[derive(Args)]
struct ParamArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named parameter preset: A..H (ablation conditions) or simple.
    #[arg(long)]
    preset: Option<String>,
}

impl ParamArgs {
    fn load(&self) -> Result<Config, CliError> {
        let preset = self.preset.as_deref();
        Ok(match &self.config {
            Some(path) => parse_config(path, preset).map_err(|e| match e {
                ConfigError::Read { .. } => CliError::Io(e.to_string()),
                e => e.into(),
            })?,
            None => parse_config_str("", preset)?,
        })
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    params: ParamArgs,
    /// Global seed; every random draw derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of patches.
    #[arg(long)]
    n: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    workers: Option<usize>,
    /// Write gzip-compressed .nii.gz files.
    #[arg(long)]
    compress: bool,
}

#[derive(Args)]
struct GenImagesArgs {
    #[command(flatten)]
    params: ParamArgs,
    /// Dataset directory (or its manifest.json) produced by gen-labels.
    #[arg(long = "from-manifest")]
    from_manifest: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RegenerateArgs {
    /// Dataset directory (or its manifest.json).
    #[arg(long = "from-manifest")]
    from_manifest: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Only count voxels where the mask is positive.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Report path; `.csv` gives a one-row table, anything else JSON.
    #[arg(long)]
    out: PathBuf,
    /// Binarization threshold for float32 inputs.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Also report Cohen's kappa, treating the truth as a second rater.
    #[arg(long)]
    kappa: bool,
}

#[derive(Args)]
struct FuseArgs {
    /// Directory of patch_<x>_<y>_<z>.nii[.gz] predictions.
    #[arg(long, conflicts_with = "stdin", required_unless_present = "stdin")]
    patches: Option<PathBuf>,
    /// Read (origin, patch) records from standard input.
    #[arg(long)]
    stdin: bool,
    /// Output volume shape: NXxNYxNZ, or one number for a cube.
    #[arg(long, value_parser = parse_shape)]
    shape: Shape,
    #[arg(long, default_value_t = fusion::DEFAULT_PATCH_SIZE)]
    patch_size: usize,
    #[arg(long, default_value_t = fusion::DEFAULT_STEP)]
    step: usize,
    /// Fused probability volume.
    #[arg(long)]
    out: PathBuf,
    /// Also write a binary mask at this threshold.
    #[arg(long)]
    threshold: Option<f32>,
    /// Mask path (default: `<out>` with a `_mask` suffix). Implies a 0.5 threshold unless given.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct ComponentsArgs {
    #[arg(long)]
    input: PathBuf,
    /// Component label volume (1 = largest).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 26, value_parser = parse_connectivity)]
    connectivity: u32,
    /// Keep only this many of the largest components.
    #[arg(long)]
    keep: Option<usize>,
    /// Binarization threshold for float32 inputs.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

fn parse_shape(s: &str) -> Result<Shape, String> {
    let parts: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] if n > 0 => Ok([n; 3]),
        [x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err("expected NXxNYxNZ or N with positive entries".into()),
    }
}

fn parse_connectivity(s: &str) -> Result<u32, String> {
    let v: u32 = s.parse().map_err(|e| format!("{e}"))?;
    Connectivity::try_from(v).map(|_| v)
}

fn workers(requested: Option<usize>, config: Option<usize>) -> Result<usize, CliError> {
    let w = requested
        .or(config)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if w == 0 {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    Ok(w)
}

fn dataset_dir(p: &Path) -> PathBuf {
    if p.file_name().is_some_and(|f| f == MANIFEST_FILE) {
        p.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        p.to_path_buf()
    }
}

fn generate(args: GenArgs, images: bool) -> Result<(), CliError> {
    let config = args.params.load()?;
    let seed = args
        .seed
        .or(config.generation.seed)
        .ok_or_else(|| CliError::Usage("a seed is required (--seed or generation.seed)".into()))?;
    let n = args
        .n
        .or(config.generation.n)
        .ok_or_else(|| CliError::Usage("a patch count is required (--n or generation.n)".into()))?;
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let opts = GenerateOptions {
        seed,
        n,
        workers: workers(args.workers, config.generation.workers)?,
        compress: args.compress || config.generation.compress,
        images,
    };
    log::info!("generating {n} patches with seed {seed} on {} workers into {}", opts.workers, args.out.display());
    let manifest = dataset::generate_dataset(&args.out, &config, &opts)?;
    log::info!("wrote {}", args.out.join(MANIFEST_FILE).display());
    let trees: usize = manifest.patches.iter().map(|p| p.tree_count).sum();
    log::info!("{} patches, {trees} trees in total", manifest.patches.len());
    Ok(())
}

fn gen_images(args: GenImagesArgs) -> Result<(), CliError> {
    let config = args.params.load()?;
    let dir = dataset_dir(&args.from_manifest);
    let w = workers(args.workers, config.generation.workers)?;
    let m = dataset::generate_images_from_manifest(&dir, &config.images, w)?;
    log::info!("synthesized {} images in {}", m.patches.len(), dir.display());
    Ok(())
}

fn regenerate(args: RegenerateArgs) -> Result<(), CliError> {
    let dir = dataset_dir(&args.from_manifest);
    let m = dataset::regenerate_from_manifest(&dir, workers(args.workers, None)?)?;
    log::info!("regenerated {} files, all checksums match", m.files().len());
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let pred = read_volume(&args.pred)?.1.binarize(args.threshold);
    let truth = read_volume(&args.truth)?.1.binarize(args.threshold);
    let mask = match &args.mask {
        Some(p) => Some(read_volume(p)?.1.binarize(args.threshold)),
        None => None,
    };
    let counts = metrics::confusion(&pred, &truth, mask.as_ref())?;
    let mut report = MetricsReport::from_counts(counts);
    if args.kappa {
        report.kappa = counts.kappa().ok();
    }
    for (name, value) in [("DSC", report.dsc), ("FPR", report.fpr), ("FNR", report.fnr)] {
        if value.is_none() {
            log::warn!("{name} is undefined for these volumes (zero denominator)");
        }
    }
    let is_csv = args.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let text = if is_csv {
        format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row())
    } else {
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
    };
    vascsynth::io::write_atomic(&args.out, text.as_bytes())?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn mask_path(out: &Path) -> PathBuf {
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("fused.nii");
    let (stem, ext) = match name.strip_suffix(".nii.gz") {
        Some(s) => (s, ".nii.gz"),
        None => (name.strip_suffix(".nii").unwrap_or(name), ".nii"),
    };
    out.with_file_name(format!("{stem}_mask{ext}"))
}

fn fuse(args: FuseArgs) -> Result<(), CliError> {
    let spec = WindowSpec::new(args.patch_size, args.step)?;
    let mut acc = FusionAccumulator::new(args.shape, spec)?;
    let mut voxel_size = DEFAULT_VOXEL_SIZE_UM;
    let mut n_patches = 0usize;
    if let Some(dir) = &args.patches {
        let files = list_patch_files(dir)?;
        if files.is_empty() {
            return Err(CliError::Data(format!("no patch_<x>_<y>_<z>.nii files in {}", dir.display())));
        }
        for (origin, path) in files {
            let data = read_volume(&path)?.1;
            if n_patches == 0 {
                voxel_size = data.voxel_size_um();
            }
            let shape = data.shape();
            if shape != [spec.patch_size; 3] {
                return Err(CliError::Data(format!("{}: patch shape {shape:?}, expected {}^3", path.display(), spec.patch_size)));
            }
            acc.add(origin, data.into_intensity().data())?;
            n_patches += 1;
        }
    } else {
        let stdin = std::io::stdin();
        let mut reader = BufReader::new(stdin.lock());
        while let Some((origin, values)) = read_patch_record(&mut reader, spec.patch_size)? {
            acc.add(origin, &values)?;
            n_patches += 1;
        }
    }
    let center = args.shape.map(|e| e / 2);
    log::info!(
        "{n_patches} patches; {} contributions at the volume center (interior lattice value {})",
        acc.contribution_at(center),
        spec.interior_contributions().map_or("n/a".to_string(), |c| c.to_string())
    );
    let fused = acc.finish(voxel_size)?;
    write_volume(&args.out, &VolumeData::Intensity(fused.clone()))?;
    if args.threshold.is_some() || args.mask.is_some() {
        let t = args.threshold.unwrap_or(0.5);
        let path = args.mask.clone().unwrap_or_else(|| mask_path(&args.out));
        write_volume(&path, &fusion::threshold(&fused, t).into())?;
        log::info!("mask at threshold {t} written to {}", path.display());
    }
    Ok(())
}

fn components(args: ComponentsArgs) -> Result<(), CliError> {
    let conn = Connectivity::try_from(args.connectivity).map_err(CliError::Usage)?;
    let mask = read_volume(&args.input)?.1.binarize(args.threshold);
    let comps = metrics::connected_components(&mask, conn);
    let labels = match args.keep {
        Some(k) => comps.largest(k),
        None => comps.labels.clone(),
    };
    write_volume(&args.out, &labels.into())?;
    let shown = args.keep.unwrap_or(comps.sizes.len()).min(comps.sizes.len());
    let summary = serde_json::json!({
        "connectivity": args.connectivity,
        "components": comps.sizes.len(),
        "sizes": &comps.sizes[..shown],
    });
    println!("{summary}");
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenLabels(a) => generate(a, false),
        Command::GenDataset(a) => generate(a, true),
        Command::GenImages(a) => gen_images(a),
        Command::Regenerate(a) => regenerate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Fuse(a) => fuse(a),
        Command::Components(a) => components(a),
        Command::ShowConfig(a) => {
            print!("{}", a.load()?.to_toml_string());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{}", e.message());
            let _ = std::io::stderr().flush();
            ExitCode::from(e.code())
        }
    }
}
