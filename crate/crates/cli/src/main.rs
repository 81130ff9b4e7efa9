//! `detailclip` command-line interface.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use detailclip::bank::{self, BankKind, FeatureBank};
use detailclip::cover::{generate_cc, generate_grid, generate_obj, verify_cover, CoverConfig, CoverMode, CoverSet};
use detailclip::experiment::{
    self, evaluate_banks, fused_bank, fusion_samples, load_model, save_model, Classify, ErrorClass, EvalConfig, Preset,
    RunConfig,
};
use detailclip::fusion::{self, FusionConfig, FusionModel, TrainConfig};
use detailclip::resource::resource_report;
use detailclip::retrieval::{HistConfig, RetrievalReport, SourceTag};
use detailclip::synth::{bank_from_world, generate_world, Manifest, PatchSource, ScaleRegime, SceneSpec, Split, WorldConfig};

const OUT_ENV: &str = "DETAILCLIP_OUT";

/// Exit codes: 0 success, 1 incomplete cover, 2 usage or configuration,
/// 3 I/O, 4 malformed input data, 5 numerical failure.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl<E: Classify> From<E> for Failure {
    fn from(e: E) -> Self {
        let code = match e.class() {
            ErrorClass::Config => 2,
            ErrorClass::Io => 3,
            ErrorClass::Format => 4,
            ErrorClass::Compute => 5,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "detailclip", version, about = "Complete Cover patches, patch-feature fusion and retrieval evaluation")]
struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print or write a patch set as CSV.
    Patches(PatchesArgs),
    /// Exhaustively check that a CC set covers every object; exit 1 if not.
    VerifyCover(VerifyArgs),
    /// Generate a synthetic world and its feature banks.
    Synth(SynthArgs),
    /// Train a fuser on patch and text banks.
    Train(TrainArgs),
    /// Fuse a patch bank into a single-feature bank.
    Fuse(FuseArgs),
    /// Class-prompted retrieval evaluation.
    Eval(EvalArgs),
    /// Storage and query-latency table for banks.
    Stats(StatsArgs),
    /// Run a whole experiment from a config file or preset.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Table,
    Provable,
}

impl From<ModeArg> for CoverMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Table => CoverMode::TableCompat,
            ModeArg::Provable => CoverMode::Provable,
        }
    }
}

#[derive(Args)]
struct CoverArgs {
    /// Image side length in pixels.
    #[arg(long, default_value_t = 224)]
    side: u32,
    /// Scale sensitivity k.
    #[arg(long, short, default_value_t = 10)]
    k: u32,
    #[arg(long, value_enum, default_value = "table")]
    mode: ModeArg,
    /// Smallest object side a provable cover must handle.
    #[arg(long)]
    min_side: Option<u32>,
}

impl CoverArgs {
    fn config(&self) -> CoverConfig {
        CoverConfig { image_side: self.side, sensitivity_k: self.k, mode: self.mode.into(), min_object_side: self.min_side }
    }
}

#[derive(Args)]
struct PatchesArgs {
    #[command(flatten)]
    cover: CoverArgs,
    /// Equal tiles instead of CC, e.g. `3x3` (rows x cols).
    #[arg(long, conflicts_with = "obj")]
    grid: Option<String>,
    /// Ground-truth object boxes of image `--image` from `--manifest`.
    #[arg(long, requires = "manifest", requires = "image")]
    obj: bool,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    image: Option<u64>,
    /// Output CSV (stdout when omitted).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    cover: CoverArgs,
    /// Smallest object side to check (default: the cover's guarantee).
    #[arg(long)]
    check_min: Option<u32>,
    #[arg(long, default_value_t = 1)]
    stride: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Mix,
    Small,
    Large,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    images: usize,
    #[arg(long, default_value_t = 138)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, value_enum, default_value = "mix")]
    regime: RegimeArg,
    /// Instances per image as `min:max`.
    #[arg(long, default_value = "1:50")]
    instances: String,
    #[arg(long, default_value_t = 224)]
    side: u32,
    /// CC sensitivity of the patch bank.
    #[arg(long, short, default_value_t = 5)]
    k: u32,
    #[arg(long, value_enum, default_value = "table")]
    mode: ModeArg,
    #[arg(long)]
    noise: Option<f64>,
    /// Place objects without overlap.
    #[arg(long)]
    no_overlap: bool,
    #[arg(long, default_value = "synth")]
    name: String,
    /// Output directory (default: `$DETAILCLIP_OUT/<name>`).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Patch-feature bank.
    #[arg(long)]
    features: PathBuf,
    /// Whole-image bank.
    #[arg(long)]
    full: PathBuf,
    #[arg(long)]
    texts: PathBuf,
    /// Restrict training to the manifest's train split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Expected feature dimension (checked against the banks).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 3)]
    enc: usize,
    #[arg(long, default_value_t = 3)]
    dec: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    box_encoding: bool,
    /// Checkpoint path; the config goes to `<out>.json`.
    #[arg(long, short)]
    out: PathBuf,
    /// Loss curve CSV (stdout when omitted).
    #[arg(long)]
    loss: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    full: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    chunk: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    /// Image bank as `[TAG:]LABEL=PATH`; repeatable. TAG is one of
    /// full_image, cc, grid, obj, fused.
    #[arg(long, required = true)]
    features: Vec<String>,
    #[arg(long)]
    texts: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Keep images whose largest object covers at most this image fraction.
    #[arg(long)]
    rmax: Option<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    ks: Vec<usize>,
    /// Report path; `.csv` writes CSV, anything else JSON (stdout: CSV).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    hist: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Bank as `LABEL=PATH`; repeatable.
    #[arg(long, required = true)]
    features: Vec<String>,
    /// Text bank whose features are used as timing queries.
    #[arg(long)]
    texts: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    queries: usize,
    /// Checkpoint whose parameter count is reported.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    PaperProtocol,
    KSweep,
    DetailInjection,
}

#[derive(Args)]
struct RunArgs {
    /// RunConfig JSON.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Output directory (default: `$DETAILCLIP_OUT/<name>`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

struct Ctx {
    seed: Option<u64>,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: &str) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }
}

fn default_out(name: &str) -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("detailclip-out"), PathBuf::from).join(name)
}

fn write_or_print(path: Option<&Path>, text: &str) -> CliResult {
    match path {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_grid(s: &str) -> CliResult<(u32, u32)> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| Failure::usage(format!("--grid expects ROWSxCOLS, got `{s}`")))?;
    let num = |v: &str| v.trim().parse::<u32>().map_err(|_| Failure::usage(format!("bad grid size `{s}`")));
    Ok((num(r)?, num(c)?))
}

fn patches(ctx: &Ctx, a: PatchesArgs) -> CliResult {
    let set: CoverSet = if let Some(g) = &a.grid {
        let (rows, cols) = parse_grid(g)?;
        generate_grid(a.cover.side, a.cover.side, rows, cols)?
    } else if a.obj {
        let m = Manifest::load(a.manifest.as_deref().unwrap())?;
        let id = a.image.unwrap();
        let scenes = m.scenes()?;
        let s = scenes.iter().find(|s| s.image_id == id).ok_or_else(|| Failure::usage(format!("image {id} not in manifest")))?;
        generate_obj(s.side, s.side, &s.objects)?
    } else {
        generate_cc(&a.cover.config())?
    };
    let mut note = format!("{} patches, per level {:?}", set.len(), set.per_level_counts);
    if let Some(m) = set.min_covered_side {
        note.push_str(&format!(", covers object sides >= {m}"));
    }
    ctx.note(&note);
    write_or_print(a.out.as_deref(), &set.to_csv())
}

fn verify(ctx: &Ctx, a: VerifyArgs) -> CliResult<ExitCode> {
    let cfg = a.cover.config();
    let set = generate_cc(&cfg)?;
    let min = match (a.check_min, set.min_covered_side) {
        (Some(m), _) | (None, Some(m)) => m,
        (None, None) => (cfg.image_side / cfg.sensitivity_k).max(1),
    };
    let r = verify_cover(&set, cfg.sensitivity_k, min, a.stride)?;
    println!(
        "side={} k={} patches={} min_side={} stride={} checked={} uncovered={}",
        cfg.image_side,
        cfg.sensitivity_k,
        set.len(),
        min,
        a.stride,
        r.checked,
        r.uncovered.len()
    );
    for o in r.uncovered.iter().take(if ctx.quiet { 0 } else { 10 }) {
        println!("uncovered x0={} y0={} side={}", o.x0, o.y0, o.width());
    }
    Ok(if r.is_complete() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn synth(ctx: &Ctx, a: SynthArgs) -> CliResult {
    let (lo, hi) = a
        .instances
        .split_once(':')
        .and_then(|(l, h)| Some((l.parse().ok()?, h.parse().ok()?)))
        .ok_or_else(|| Failure::usage(format!("--instances expects MIN:MAX, got `{}`", a.instances)))?;
    let mut world = WorldConfig {
        name: a.name.clone(),
        num_images: a.images,
        num_classes: a.classes,
        dim: a.dim,
        image_side: a.side,
        instances_min: lo,
        instances_max: hi,
        regime: match a.regime {
            RegimeArg::Mix => ScaleRegime::Mix,
            RegimeArg::Small => ScaleRegime::SmallOnly,
            RegimeArg::Large => ScaleRegime::LargeOnly,
        },
        allow_overlap: !a.no_overlap,
        seed: ctx.seed.unwrap_or(0),
        ..WorldConfig::default()
    };
    if let Some(n) = a.noise {
        world.noise_sigma = n;
    }
    let out = a.out.unwrap_or_else(|| default_out(&a.name));
    let w = generate_world(&world)?;
    let source = PatchSource::Cc(CoverConfig { mode: a.mode.into(), ..CoverConfig::table(a.side, a.k) });
    let paths = bank_from_world(&w, &source, &out)?;
    fs::write(out.join("world.json"), serde_json::to_string_pretty(&world).expect("serialisable") + "\n")?;
    ctx.note(&format!(
        "{} images -> {}, {}, {}, {}",
        w.scenes.len(),
        paths.manifest.display(),
        paths.images.display(),
        paths.patches.display(),
        paths.texts.display()
    ));
    Ok(())
}

fn read_any_bank(path: &Path) -> CliResult<FeatureBank> {
    bank::read_bank(path).map_err(|e| {
        let f = Failure::from(e);
        Failure { message: format!("{}: {}", path.display(), f.message), ..f }
    })
}

fn read_image_bank(path: &Path) -> CliResult<FeatureBank> {
    let b = read_any_bank(path)?;
    if b.kind == BankKind::Text {
        return Err(Failure { code: 4, message: format!("{}: expected an image bank, found a text bank", path.display()) });
    }
    Ok(b)
}

fn split_ids(manifest: &Path, split: Split) -> CliResult<BTreeSet<u64>> {
    let scenes = Manifest::load(manifest)?.scenes()?;
    Ok(scenes.iter().filter(|s| s.split == split).map(|s| s.image_id).collect())
}

fn train(ctx: &Ctx, a: TrainArgs) -> CliResult {
    let patches = read_image_bank(&a.features)?;
    let full = read_image_bank(&a.full)?;
    let texts = read_any_bank(&a.texts)?;
    if let Some(d) = a.dim {
        if d != patches.dim {
            return Err(Failure::usage(format!("--dim {d} but the bank has dim {}", patches.dim)));
        }
    }
    let ids = a.manifest.as_deref().map(|m| split_ids(m, Split::Train)).transpose()?;
    let samples = fusion_samples(&full, &patches, ids.as_ref()).map_err(|m| Failure { code: 4, message: m })?;
    let text_rows: Vec<Vec<f64>> = texts.texts.iter().map(|t| t.feature_f64()).collect();
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch.unwrap_or(defaults.batch_size),
        lr: a.lr.unwrap_or(defaults.lr),
        seed: ctx.seed.unwrap_or(defaults.seed),
        ..defaults
    };
    let fcfg = FusionConfig {
        enc_layers: a.enc,
        dec_layers: a.dec,
        heads: a.heads,
        use_box_encoding: a.box_encoding,
        ..FusionConfig::with_dim(patches.dim)
    };
    let mut model = FusionModel::new(fcfg, ctx.seed.unwrap_or(0))?;
    ctx.note(&format!("training on {} images, {} parameters", samples.len(), model.num_parameters()));
    let outcome = fusion::train_with_progress(&mut model, &samples, &text_rows, &cfg, |e, l| {
        ctx.note(&format!("epoch {:>3}  loss {l:.6e}", e + 1));
    })?;
    save_model(&model, &a.out)?;
    write_or_print(a.loss.as_deref(), &outcome.to_csv())
}

fn fuse(ctx: &Ctx, a: FuseArgs) -> CliResult {
    let model = load_model(&a.model)?;
    let patches = read_image_bank(&a.features)?;
    let full = read_image_bank(&a.full)?;
    let samples = fusion_samples(&full, &patches, None).map_err(|m| Failure { code: 4, message: m })?;
    let fused = fused_bank(&model, &samples, a.chunk.max(1))?;
    bank::write_bank(&a.out, &fused)?;
    ctx.note(&format!("{} fused features -> {}", fused.images.len(), a.out.display()));
    Ok(())
}

/// Parses `[TAG:]LABEL=PATH`.
fn parse_bank_spec(s: &str) -> CliResult<(Option<SourceTag>, String, PathBuf)> {
    let (head, path) = s.split_once('=').ok_or_else(|| Failure::usage(format!("expected LABEL=PATH, got `{s}`")))?;
    let (tag, label) = match head.split_once(':') {
        Some((t, l)) => {
            let tag: SourceTag = serde_json::from_value(serde_json::Value::String(t.into()))
                .map_err(|_| Failure::usage(format!("unknown source tag `{t}`")))?;
            (Some(tag), l)
        }
        None => (None, head),
    };
    Ok((tag, label.to_string(), PathBuf::from(path)))
}

fn eval(ctx: &Ctx, a: EvalArgs) -> CliResult {
    let manifest = Manifest::load(&a.manifest)?;
    let scenes = manifest.scenes()?;
    let texts = read_any_bank(&a.texts)?;
    let split = match a.split {
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
        SplitArg::All => None,
    };
    let chosen: Vec<&SceneSpec> = scenes.iter().filter(|s| split.is_none_or(|sp| s.split == sp)).collect();
    let mut banks = Vec::new();
    for spec in &a.features {
        let (tag, label, path) = parse_bank_spec(spec)?;
        let b = read_image_bank(&path)?;
        let tag = tag.unwrap_or(if b.kind == BankKind::ImageSingle { SourceTag::FullImage } else { SourceTag::Cc });
        banks.push((label, tag, b));
    }
    let refs: Vec<(String, SourceTag, &FeatureBank)> = banks.iter().map(|(l, t, b)| (l.clone(), *t, b)).collect();
    let eval = EvalConfig { ks: a.ks.clone(), rmax: a.rmax, hist: HistConfig::default(), timing_queries: 0, ..EvalConfig::default() };
    let (rows, hists) = evaluate_banks(&manifest.name, &texts, &chosen, &refs, &eval)?;
    for r in &rows {
        let m: Vec<String> = r.report.macro_recall.iter().map(|(k, v)| format!("R@{k}={v:.4}")).collect();
        ctx.note(&format!("{:<14} {}", r.label, m.join(" ")));
    }
    let mut csv = RetrievalReport::csv_header(&eval.ks);
    for r in &rows {
        csv.push_str(&r.report.to_csv_rows(&r.label));
    }
    match &a.report {
        Some(p) if p.extension().is_some_and(|e| e == "csv") => fs::write(p, &csv)?,
        Some(p) => fs::write(p, serde_json::to_string_pretty(&rows).expect("serialisable") + "\n")?,
        None => print!("{csv}"),
    }
    if let Some(h) = &a.hist {
        let mut s = String::from("series,bin,lo,hi,positive,negative\n");
        for (label, hist) in &hists {
            for line in hist.to_csv().lines().skip(1) {
                match line.strip_prefix("# ") {
                    Some(rest) => s.push_str(&format!("# {label}: {rest}\n")),
                    None => s.push_str(&format!("{label},{line}\n")),
                }
            }
        }
        fs::write(h, s)?;
    }
    Ok(())
}

fn stats(ctx: &Ctx, a: StatsArgs) -> CliResult {
    let mut banks = Vec::new();
    for spec in &a.features {
        let (_, label, path) = parse_bank_spec(spec)?;
        banks.push((label, read_image_bank(&path)?));
    }
    let queries: Vec<Vec<f64>> = match &a.texts {
        Some(t) if a.queries > 0 => {
            let tb = read_any_bank(t)?;
            if tb.texts.is_empty() {
                return Err(Failure { code: 4, message: "text bank is empty".into() });
            }
            (0..a.queries).map(|i| tb.texts[i % tb.texts.len()].feature_f64()).collect()
        }
        _ => Vec::new(),
    };
    let refs: Vec<(&str, &FeatureBank)> = banks.iter().map(|(l, b)| (l.as_str(), b)).collect();
    let report = resource_report(&refs, &queries);
    print!("{}", report.to_csv());
    if let [(first, _), (second, _), ..] = refs.as_slice() {
        if let Some(c) = report.compression(first, second) {
            ctx.note(&format!("storage {first}/{second} = {c:.3}"));
        }
        if let Some(s) = report.speedup(first, second) {
            ctx.note(&format!("query time {first}/{second} = {s:.3}"));
        }
    }
    if let Some(m) = &a.model {
        let model = load_model(m)?;
        ctx.note(&format!("model parameters: {}", model.num_parameters()));
    }
    Ok(())
}

fn run_cmd(ctx: &Ctx, a: RunArgs) -> CliResult {
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => RunConfig::from_json(&fs::read_to_string(p)?)?,
        (None, Some(PresetArg::DetailInjection)) => RunConfig::detail_injection(),
        (None, Some(PresetArg::KSweep)) => RunConfig {
            name: "k-sweep".into(),
            preset: Preset::KSweep { ks: (2..=10).collect() },
            ..RunConfig::detail_injection()
        },
        (None, Some(PresetArg::PaperProtocol) | None) => RunConfig { name: "paper-protocol".into(), ..RunConfig::detail_injection() },
    };
    if let Some(s) = ctx.seed {
        cfg = cfg.with_seed(s);
    }
    cfg.validate()?;
    if a.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    let out = a.out.unwrap_or_else(|| default_out(&cfg.name));
    let summary = experiment::run(&cfg, &out, |m| ctx.note(m))?;
    for e in &summary.report.runs {
        for r in &e.result.rows {
            let m: Vec<String> = r.report.macro_recall.iter().map(|(k, v)| format!("R@{k}={v:.4}")).collect();
            ctx.note(&format!("[{}] {:<12} {}", e.patches.tag(), r.label, m.join(" ")));
        }
    }
    ctx.note(&format!("artifacts in {}", summary.dir.display()));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let ctx = Ctx { seed: cli.seed, quiet: cli.quiet };
    let result = match cli.command {
        Command::Patches(a) => patches(&ctx, a).map(|_| ExitCode::SUCCESS),
        Command::VerifyCover(a) => verify(&ctx, a),
        Command::Synth(a) => synth(&ctx, a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => train(&ctx, a).map(|_| ExitCode::SUCCESS),
        Command::Fuse(a) => fuse(&ctx, a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => eval(&ctx, a).map(|_| ExitCode::SUCCESS),
        Command::Stats(a) => stats(&ctx, a).map(|_| ExitCode::SUCCESS),
        Command::Run(a) => run_cmd(&ctx, a).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
