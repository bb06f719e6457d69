//! `patchsynth`: ingest corpora, build dictionaries, synthesize and assess.

mod seeds;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchsynth::archive::{read_class_model, write_class_model};
use patchsynth::assess::{
    export_distance_matrix, image_log_likelihood, ll_dictionaries, ll_sweep, spread, AssessConfig, ImageScore, RankConfig,
    SpreadRow,
};
use patchsynth::corpus::{ingest_idx, load_corpus, store_images, Corpus};
use patchsynth::sampler::derive_seed;
use patchsynth::synthesis::{make_seed, timed_synthesize, write_run_dir, GaussianSeedModel, RunRecord};
use patchsynth::{
    ClassModel, Error, Image, KnnBackend, LlConfig, LlGrid, OriginalityIndex, ParzenStack, PixelMask, Result, ScoreReport,
    SpreadConfig, SynthesisSchedule,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::seeds::{parse_selector, split_tag, Selector};

#[derive(Parser, Debug)]
#[command(name = "patchsynth", version, about = "Multi-scale patch-based image synthesis and assessment")]
struct Cli {
    /// Directory for stored corpora and dictionary archives.
    #[arg(long, global = true, env = "PATCHSYNTH_CACHE", default_value = ".patchsynth")]
    cache: PathBuf,

    /// Worker threads for synthesis runs and scoring (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Store a corpus split from IDX files or a directory of PGM images.
    Ingest(IngestArgs),
    /// Build and archive the dictionaries of one class.
    Build(BuildArgs),
    /// Synthesize images from seeds, one run directory per (seed, run).
    Synth(SynthArgs),
    /// Score images against a class corpus and write a report.
    Assess(AssessArgs),
    /// Rank-aware LL over a grid of sigma and epsilon values.
    Sweep(SweepArgs),
    /// Print a preset schedule (with overrides applied) as JSON.
    Schedule(ScheduleArgs),
}

#[derive(Args, Debug)]
struct ScheduleOpts {
    /// Embedded schedule preset.
    #[arg(long, default_value = "mnist-digit")]
    preset: String,
    /// JSON file whose fields override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use h = 1e-12 everywhere (nearest-neighbor super-resolution).
    #[arg(long)]
    deterministic: bool,
}

impl ScheduleOpts {
    fn load(&self) -> Result<SynthesisSchedule> {
        let mut s = SynthesisSchedule::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let over: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            s = s.with_overrides(&over)?;
        }
        if self.deterministic {
            s = s.deterministic();
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Exhaustive,
    Kdtree,
}

impl From<Backend> for KnnBackend {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Exhaustive => KnnBackend::Exhaustive,
            Backend::Kdtree => KnnBackend::KdTree,
        }
    }
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// IDX image file.
    #[arg(long, requires = "labels", conflicts_with = "pgm_dir")]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Directory of same-sized PGM images, stored under one label.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
    /// Label given to every image of `--pgm-dir`.
    #[arg(long, default_value_t = 0)]
    label: u8,
    /// Split name, e.g. train or test.
    #[arg(long)]
    split: String,
    /// Pad IDX images, centered, to this square size.
    #[arg(long, default_value_t = 32)]
    pad: usize,
}

#[derive(Args, Debug)]
struct BuildArgs {
    #[command(flatten)]
    schedule: ScheduleOpts,
    /// Class label to build.
    #[arg(long)]
    class: u8,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, value_enum, default_value = "exhaustive")]
    backend: Backend,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    schedule: ScheduleOpts,
    #[arg(long)]
    class: u8,
    /// Seed selector: `test:0..9`, `train:4,8` or `gaussian:N`.
    #[arg(long)]
    seeds: String,
    #[arg(long, default_value_t = 1)]
    runs_per_seed: usize,
    /// Root of all randomness; drawn from OS entropy and recorded when absent.
    #[arg(long)]
    root_seed: Option<u64>,
    /// Output directory for run directories.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, value_enum, default_value = "exhaustive")]
    backend: Backend,
    /// Use archives built under a different schedule.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Grid {
    /// The synthesis grid of the finest layer.
    Synthesis,
    /// Every location.
    Full,
}

#[derive(Args, Debug)]
struct AssessArgs {
    #[command(flatten)]
    schedule: ScheduleOpts,
    #[arg(long)]
    class: u8,
    /// Directories (searched for run directories and PGM files) or selectors like `test:0..99`.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<String>,
    /// Output JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Also write per-image scores as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, value_enum, default_value = "synthesis")]
    grid: Grid,
    /// Sum each Parzen density over only the k nearest patches.
    #[arg(long)]
    shortlist: Option<usize>,
    /// Also compute spread against the class training images.
    #[arg(long)]
    spread: bool,
    /// Number of training images for spread (default: as many as inputs).
    #[arg(long)]
    spread_train: Option<usize>,
    #[arg(long, default_value_t = 30.0)]
    perplexity: f64,
    /// Restrict originality distances to a centered WxH window.
    #[arg(long, value_parser = parse_size)]
    mask_central: Option<(usize, usize)>,
    /// Write the input/training distance matrix to `<stem>.f32` and `<stem>.json`.
    #[arg(long)]
    distances: Option<PathBuf>,
    /// Score runs produced under a different schedule.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    schedule: ScheduleOpts,
    #[arg(long)]
    class: u8,
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3989422804014327,0.8")]
    sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1")]
    epsilons: Vec<f64>,
    /// Output CSV table.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, value_enum, default_value = "synthesis")]
    grid: Grid,
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct ScheduleArgs {
    #[command(flatten)]
    schedule: ScheduleOpts,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("'{s}' is not WxH"))?;
    let p = |v: &str| v.parse::<usize>().map_err(|_| format!("'{s}' is not WxH"));
    Ok((p(w)?, p(h)?))
}

fn corpus_dir(cache: &Path) -> PathBuf {
    cache.join("corpus")
}

fn dict_dir(cache: &Path, schedule: &SynthesisSchedule) -> PathBuf {
    cache.join("dict").join(&schedule.name)
}

fn class_images(corpus: &Corpus, class: u8) -> Result<Vec<Image>> {
    let imgs = corpus.class_images(class);
    if imgs.is_empty() {
        return Err(Error::config(format!(
            "split '{}' has no images of class {class}",
            corpus.manifest.split
        )));
    }
    Ok(imgs)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_ingest(cache: &Path, a: &IngestArgs) -> Result<()> {
    let out = corpus_dir(cache);
    let manifest = match (&a.images, &a.labels, &a.pgm_dir) {
        (Some(i), Some(l), None) => ingest_idx(i, l, &a.split, (a.pad, a.pad), &out)?,
        (None, None, Some(dir)) => {
            let files = pgm_files(dir)?;
            if files.is_empty() {
                return Err(Error::config(format!("no .pgm files in {}", dir.display())));
            }
            let images = files.iter().map(patchsynth::pgm::read).collect::<Result<Vec<_>>>()?;
            store_images(&images, &vec![a.label; images.len()], &a.split, &out)?
        }
        _ => return Err(Error::config("give either --images and --labels, or --pgm-dir")),
    };
    print_json(&manifest)
}

fn cmd_build(cache: &Path, a: &BuildArgs) -> Result<()> {
    let schedule = a.schedule.load()?;
    let corpus = load_corpus(&corpus_dir(cache), &a.train_split)?;
    let training = class_images(&corpus, a.class)?;
    let model = ClassModel::build(&training, &schedule, a.backend.into())?;
    let paths = write_class_model(&dict_dir(cache, &schedule), &a.class.to_string(), &model, &schedule)?;
    print_json(&json!({
        "class": a.class,
        "schedule_hash": model.schedule_hash,
        "training_images": training.len(),
        "files": paths,
    }))
}

/// Loads archived dictionaries, building and archiving them when none exist.
fn class_model(
    cache: &Path,
    schedule: &SynthesisSchedule,
    class: u8,
    train_split: &str,
    backend: KnnBackend,
    force: bool,
) -> Result<(ClassModel, Vec<Image>)> {
    let corpus = load_corpus(&corpus_dir(cache), train_split)?;
    let training = class_images(&corpus, class)?;
    let dir = dict_dir(cache, schedule);
    let label = class.to_string();
    let (first, _) = patchsynth::archive::layer_paths(&dir, &label, 0);
    let model = if first.exists() {
        read_class_model(&dir, &label, schedule, backend, force)?
    } else {
        let m = ClassModel::build(&training, schedule, backend)?;
        write_class_model(&dir, &label, &m, schedule)?;
        m
    };
    Ok((model, training))
}

struct SeedJob {
    id: String,
    image: Image,
    tag: u64,
    index: u64,
}

fn seed_jobs(cache: &Path, a: &SynthArgs, schedule: &SynthesisSchedule, training: &[Image], root: u64) -> Result<Vec<SeedJob>> {
    let (w, h) = (schedule.width, schedule.height);
    match parse_selector(&a.seeds)? {
        Selector::Split { split, indices } => {
            let corpus = load_corpus(&corpus_dir(cache), &split)?;
            let imgs = class_images(&corpus, a.class)?;
            indices
                .into_iter()
                .map(|i| {
                    let src = imgs.get(i).ok_or_else(|| {
                        Error::config(format!("split '{split}' has {} images of class {}, index {i} requested", imgs.len(), a.class))
                    })?;
                    Ok(SeedJob {
                        id: format!("{split}-{i:05}"),
                        image: make_seed(src, (w, h), schedule.seed_size())?,
                        tag: split_tag(&split),
                        index: i as u64,
                    })
                })
                .collect()
        }
        Selector::Gaussian { count } => {
            let seeds = training
                .iter()
                .map(|t| make_seed(t, (w, h), schedule.seed_size()))
                .collect::<Result<Vec<_>>>()?;
            let model = GaussianSeedModel::fit(&seeds, 1e-6)?;
            let tag = split_tag("gaussian");
            Ok((0..count)
                .map(|i| SeedJob {
                    id: format!("gaussian-{i:05}"),
                    image: model.sample(derive_seed(root, &[tag]), i as u64),
                    tag,
                    index: i as u64,
                })
                .collect())
        }
    }
}

fn cmd_synth(cache: &Path, a: &SynthArgs) -> Result<()> {
    let schedule = a.schedule.load()?;
    let hash = schedule.hash()?;
    let (root, source) = match a.root_seed {
        Some(s) => (s, "flag"),
        None => (rand::random::<u64>(), "entropy"),
    };
    let (model, training) = class_model(cache, &schedule, a.class, &a.train_split, a.backend.into(), a.force)?;
    let jobs = seed_jobs(cache, a, &schedule, &training, root)?;
    let tasks: Vec<(&SeedJob, usize)> = jobs.iter().flat_map(|j| (0..a.runs_per_seed).map(move |r| (j, r))).collect();
    let class = a.class.to_string();
    let records = tasks
        .par_iter()
        .map(|(job, r)| {
            let run_seed = derive_seed(root, &[job.tag, job.index, *r as u64]);
            let (syn, wall) = timed_synthesize(&job.image, &schedule, &model, run_seed)?;
            let name = format!("{}-run{r:02}", job.id);
            write_run_dir(&a.out.join(&name), &syn, &job.id, Some(&class), run_seed, &hash, wall)?;
            Ok(name)
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = json!({
        "root_seed": root,
        "root_seed_source": source,
        "preset": schedule.name,
        "schedule_hash": hash,
        "class": a.class,
        "seeds": a.seeds,
        "runs_per_seed": a.runs_per_seed,
        "runs": records,
    });
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("synth.json"), serde_json::to_string_pretty(&summary)?)?;
    print_json(&summary)
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Collects `(id, image)` pairs: `final.pgm` of every run directory below
/// `dir`, or plain PGM files where no run directories exist.
fn collect_dir(dir: &Path, expected_hash: &str, force: bool, out: &mut Vec<(String, Image)>) -> Result<()> {
    let run = dir.join("run.json");
    if run.is_file() {
        let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(&run)?)?;
        if record.schedule_hash != expected_hash && !force {
            return Err(Error::config(format!(
                "{} was produced with schedule {}, current schedule is {expected_hash}",
                dir.display(),
                record.schedule_hash
            )));
        }
        let id = dir.file_name().map_or_else(|| record.seed_id.clone(), |n| n.to_string_lossy().into_owned());
        out.push((id, patchsynth::pgm::read(dir.join("final.pgm"))?));
        return Ok(());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let before = out.len();
    for d in &subdirs {
        collect_dir(d, expected_hash, force, out)?;
    }
    if out.len() == before {
        for f in pgm_files(dir)? {
            let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((id, patchsynth::pgm::read(&f)?));
        }
    }
    Ok(())
}

fn collect_inputs(cache: &Path, inputs: &[String], class: u8, schedule: &SynthesisSchedule, force: bool) -> Result<Vec<(String, Image)>> {
    let hash = schedule.hash()?;
    let mut out = Vec::new();
    for input in inputs {
        let path = Path::new(input);
        if path.is_dir() {
            collect_dir(path, &hash, force, &mut out)?;
        } else if path.is_file() {
            out.push((input.clone(), patchsynth::pgm::read(path)?));
        } else {
            match parse_selector(input)? {
                Selector::Split { split, indices } => {
                    let corpus = load_corpus(&corpus_dir(cache), &split)?;
                    let imgs = class_images(&corpus, class)?;
                    for i in indices {
                        let img = imgs.get(i).ok_or_else(|| {
                            Error::config(format!("split '{split}' has {} images of class {class}, index {i} requested", imgs.len()))
                        })?;
                        out.push((format!("{split}-{i:05}"), img.clone()));
                    }
                }
                Selector::Gaussian { .. } => {
                    return Err(Error::config("gaussian selectors only apply to synth --seeds"));
                }
            }
        }
    }
    if out.is_empty() {
        return Err(Error::config("no input images found"));
    }
    Ok(out)
}

fn ll_config(schedule: &SynthesisSchedule, grid: Grid, shortlist: Option<usize>) -> LlConfig {
    let mut cfg = LlConfig::for_schedule(schedule);
    if let Grid::Full = grid {
        cfg.grid = LlGrid::FullyOverlapping;
    }
    cfg.shortlist = shortlist;
    cfg
}

fn default_mask(schedule: &SynthesisSchedule, explicit: Option<(usize, usize)>) -> Result<Option<PixelMask>> {
    let (w, h) = (schedule.width, schedule.height);
    let central = match explicit {
        Some(size) => Some(size),
        None if schedule.name == "aligned-face" => Some((96, 96)),
        None => None,
    };
    central.map(|(cw, ch)| PixelMask::central(w, h, cw, ch)).transpose()
}

fn cmd_assess(cache: &Path, a: &AssessArgs) -> Result<()> {
    let schedule = a.schedule.load()?;
    let inputs = collect_inputs(cache, &a.inputs, a.class, &schedule, a.force)?;
    let corpus = load_corpus(&corpus_dir(cache), &a.train_split)?;
    let training = class_images(&corpus, a.class)?;
    let ll_cfg = ll_config(&schedule, a.grid, a.shortlist);
    let mask = default_mask(&schedule, a.mask_central)?;
    let spread_cfg = SpreadConfig {
        perplexity: a.perplexity,
        ..SpreadConfig::default()
    };

    let lls: Vec<f64> = match ll_cfg.shortlist {
        None => {
            let stack = ParzenStack::new(&training)?;
            inputs.par_iter().map(|(_, x)| stack.image_log_likelihood(x, &ll_cfg)).collect::<Result<_>>()?
        }
        Some(_) => {
            let dicts = ll_dictionaries(&training, &ll_cfg)?;
            inputs.par_iter().map(|(_, x)| image_log_likelihood(x, &dicts, &ll_cfg)).collect::<Result<_>>()?
        }
    };
    let index = OriginalityIndex::new(&training, mask.clone())?;
    let originality = inputs.par_iter().map(|(_, x)| index.score(x)).collect::<Result<Vec<_>>>()?;
    let per_image: Vec<ImageScore> = inputs
        .iter()
        .zip(lls)
        .zip(originality)
        .map(|(((id, _), ll), o)| ImageScore {
            id: id.clone(),
            ll,
            originality: o.ratio,
            d_g: o.d_g,
            d_t: o.d_t,
        })
        .collect();

    let generated: Vec<Image> = inputs.iter().map(|(_, x)| x.clone()).collect();
    let (spread_rows, spread_used) = if a.spread {
        let n = a.spread_train.unwrap_or(generated.len()).min(training.len());
        let reference = &training[..n];
        let report = spread(reference, &generated, &spread_cfg)?;
        if report.size_warning {
            eprintln!("warning: |G| / |T| = {} / {n} is outside [0.5, 2]", generated.len());
        }
        let ids = corpus.class_indices(a.class);
        let rows = report
            .per_training
            .iter()
            .zip(&ids)
            .map(|(s, i)| SpreadRow {
                training_id: format!("{}-{i:05}", a.train_split),
                spread: *s,
            })
            .collect();
        (rows, Some(spread_cfg))
    } else {
        (Vec::new(), None)
    };

    if let Some(stem) = &a.distances {
        let mut all = generated.clone();
        all.extend(training.iter().take(a.spread_train.unwrap_or(generated.len())).cloned());
        let mut ids: Vec<String> = inputs.iter().map(|(id, _)| id.clone()).collect();
        ids.extend(corpus.class_indices(a.class).iter().take(all.len() - generated.len()).map(|i| format!("{}-{i:05}", a.train_split)));
        export_distance_matrix(stem, &all, &ids)?;
    }

    let config = AssessConfig {
        ll: ll_cfg,
        spread: spread_used,
        mask,
        corpus_hash: corpus.manifest.checksum.clone(),
    };
    let report = ScoreReport::new(&config, per_image, spread_rows)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&a.report, serde_json::to_string_pretty(&report)?)?;
    if let Some(csv) = &a.csv {
        report.write_csv(std::fs::File::create(csv)?)?;
    }
    print_json(&json!({
        "report": a.report,
        "images": report.per_image.len(),
        "config_hash": report.config_hash,
        "aggregates": report.aggregates,
    }))
}

fn cmd_sweep(cache: &Path, a: &SweepArgs) -> Result<()> {
    let schedule = a.schedule.load()?;
    let inputs = collect_inputs(cache, &a.inputs, a.class, &schedule, a.force)?;
    let corpus = load_corpus(&corpus_dir(cache), &a.train_split)?;
    let training = class_images(&corpus, a.class)?;
    let base = ll_config(&schedule, a.grid, None);
    let dicts = ll_dictionaries(&training, &base)?;
    let images: Vec<Image> = inputs.into_iter().map(|(_, x)| x).collect();
    let table = ll_sweep(&images, &dicts, &base, &a.sigmas, &a.epsilons, &RankConfig::default())?;
    table.write_csv(std::fs::File::create(&a.out)?)?;
    print_json(&table)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(&cli.cache, a),
        Command::Build(a) => cmd_build(&cli.cache, a),
        Command::Synth(a) => cmd_synth(&cli.cache, a),
        Command::Assess(a) => cmd_assess(&cli.cache, a),
        Command::Sweep(a) => cmd_sweep(&cli.cache, a),
        Command::Schedule(a) => print_json(&a.schedule.load()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let details: BTreeMap<&str, String> = [("error", e.kind().to_string()), ("message", e.to_string())].into();
            eprintln!("{}", serde_json::to_string(&details).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
