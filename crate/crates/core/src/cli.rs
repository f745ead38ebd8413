//! Command-line front end. Results go to files or stdout, logs go to stderr
//! as `key=value` lines.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::functaset::{
    build_functaset, load_functaset, psnr_unit, reconstruct, representation_bytes, save_functaset,
    Functaset,
};
use crate::inference::{infer_point, knn_embed, sgld_sample, SgldConfig};
use crate::metatrain::{parse_key_values, train_trunk_with, MetaConfig};
use crate::pose::{
    labeled_latents, load_head, pose_error, pose_posterior, predict_batch, predict_pose,
    save_head, train_head, write_pose_csv, HeadConfig, PoseSE2,
};
use crate::siren::{load_trunk, save_trunk, Modulation, TrunkArch, TrunkParams};
use crate::synthgen::{
    gen_dataset, load_pgm, load_timg, normalize_pair, save_pgm, save_timg, IndenterShape,
    SceneConfig, SensorTag, TactileImage,
};

#[derive(Parser, Debug)]
#[command(name = "tactfunc", version, about = "Tactile images as latent functa")]
struct Cli {
    /// Worker threads for per-sample stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// File of key=value flag defaults; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset, or import one PGM contact/reference pair.
    Gen(GenArgs),
    /// Meta-train the shared trunk.
    Train(TrainArgs),
    /// Fit one latent per image and write the functaset.
    Fit(FitArgs),
    /// Decode functa back to images.
    Recon(ReconArgs),
    /// Per-sample reconstruction PSNR.
    Eval(EvalArgs),
    /// Point-estimate latent for one image.
    Infer(InferArgs),
    /// Langevin posterior samples for one image.
    Sgld(SgldArgs),
    /// Nearest stored functa for one image.
    Knn(KnnArgs),
    /// Train the pose head on a labeled functaset.
    HeadTrain(HeadTrainArgs),
    /// Pose error of the head against functaset labels.
    HeadEval(HeadEvalArgs),
    /// Pose predictions for images.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct GenArgs {
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// bubble_like or gelslim_like.
    #[arg(long, default_value = "bubble_like")]
    sensor: SensorTag,
    #[arg(long)]
    shape: Option<IndenterShape>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    press_depth: Option<f64>,
    /// Output directory, or output TIMG file when importing.
    #[arg(long)]
    out: PathBuf,
    /// Import mode: contact PGM.
    #[arg(long, requires = "reference")]
    contact: Option<PathBuf>,
    /// Import mode: reference PGM.
    #[arg(long, requires = "contact")]
    reference: Option<PathBuf>,
    /// Import mode: normalization scale in raw intensity units.
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// TIMG file or directory; repeatable.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrunkArch::default().depth)]
    depth: usize,
    #[arg(long, default_value_t = TrunkArch::default().width)]
    width: usize,
    #[arg(long, default_value_t = TrunkArch::default().latent_dim)]
    latent_dim: usize,
    #[arg(long, default_value_t = TrunkArch::default().omega0)]
    omega0: f64,
    #[arg(long, default_value_t = MetaConfig::default().inner_steps)]
    inner_steps: usize,
    #[arg(long, default_value_t = MetaConfig::default().inner_lr)]
    inner_lr: f64,
    #[arg(long, default_value_t = MetaConfig::default().outer_lr)]
    outer_lr: f64,
    #[arg(long, default_value_t = MetaConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = MetaConfig::default().outer_steps)]
    outer_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    second_order: bool,
    /// Log every this many outer steps.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Optional CSV of `step,loss`.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct FitArgs {
    #[arg(long)]
    trunk: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct Linked {
    #[arg(long)]
    trunk: PathBuf,
    #[arg(long)]
    functaset: PathBuf,
    /// Accept a trunk other than the one the functaset was built with.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    allow_digest_mismatch: bool,
}

impl Linked {
    fn load(&self) -> Result<(TrunkParams, Functaset)> {
        let trunk = load_trunk(&self.trunk)?;
        let fs = load_functaset(&self.functaset)?;
        fs.check_trunk(&trunk, self.allow_digest_mismatch)?;
        Ok((trunk, fs))
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct ReconArgs {
    #[command(flatten)]
    linked: Linked,
    #[arg(long)]
    out: PathBuf,
    /// timg or pgm.
    #[arg(long, default_value = "timg", value_parser = ["timg", "pgm"])]
    format: String,
    /// Restrict to these sample ids; repeatable.
    #[arg(long)]
    id: Vec<u64>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct EvalArgs {
    #[command(flatten)]
    linked: Linked,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct InferArgs {
    #[arg(long)]
    trunk: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct SgldArgs {
    #[arg(long)]
    trunk: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = SgldConfig::default().chains)]
    chains: usize,
    #[arg(long, default_value_t = SgldConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = SgldConfig::default().step_size)]
    step_size: f64,
    #[arg(long, default_value_t = SgldConfig::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the posterior CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct KnnArgs {
    #[command(flatten)]
    linked: Linked,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    warm_steps: usize,
    #[arg(long, default_value_t = 3)]
    refine_steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct HeadTrainArgs {
    #[arg(long)]
    functaset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = HeadConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = HeadConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = HeadConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated hidden widths.
    #[arg(long, default_value = "512,512,512", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    wrap_angle: bool,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct HeadEvalArgs {
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    functaset: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
struct PredictArgs {
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    trunk: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Report the SGLD posterior mean instead of the point estimate.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    posterior: bool,
    #[arg(long, default_value_t = SgldConfig::default().chains)]
    chains: usize,
    #[arg(long, default_value_t = SgldConfig::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// With --posterior, write per-sample pose covariances here.
    #[arg(long)]
    cov_out: Option<PathBuf>,
}

const COMMANDS: &[&str] = &[
    "gen", "train", "fit", "recon", "eval", "infer", "sgld", "knn", "head-train", "head-eval",
    "predict",
];

fn log(event: &str, fields: &[(&str, String)]) {
    let mut line = format!("event={event}");
    for (k, v) in fields {
        if v.contains(' ') {
            line.push_str(&format!(" {k}={v:?}"));
        } else {
            line.push_str(&format!(" {k}={v}"));
        }
    }
    eprintln!("{line}");
}

/// Splices `--key value` pairs from the `--config` file in front of the
/// explicit flags, so later (explicit) occurrences override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut path = None;
    for (i, a) in strs.iter().enumerate() {
        if a == "--config" {
            path = strs.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
    let pairs = parse_key_values(&text)?;
    let Some(pos) = strs.iter().position(|a| COMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let mut out: Vec<OsString> = args[..=pos].to_vec();
    for (k, v) in pairs {
        out.push(format!("--{}", k.replace('_', "-")).into());
        out.push(v.into());
    }
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Runs the CLI with process stdout; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    run_with(argv, &mut lock)
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return fail(&Error::InvalidArgument("--workers must be >= 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => return fail(&Error::InvalidArgument(e.to_string())),
    };
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(cli.command, &mut buf));
    // Partial results are still emitted on failure.
    if let Err(e) = out.write_all(&buf).and_then(|_| out.flush()) {
        return fail(&e.into());
    }
    match result {
        Ok(()) => 0,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> i32 {
    log("error", &[("code", e.code().into()), ("message", e.to_string())]);
    e.exit_code()
}

fn dispatch(cmd: Command, out: &mut Vec<u8>) -> Result<()> {
    match cmd {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Fit(a) => fit(a),
        Command::Recon(a) => recon(a),
        Command::Eval(a) => eval(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Sgld(a) => sgld(a, out),
        Command::Knn(a) => knn(a, out),
        Command::HeadTrain(a) => head_train(a),
        Command::HeadEval(a) => head_eval(a, out),
        Command::Predict(a) => predict(a, out),
    }
}

/// Loads TIMG files; directories contribute every `*.timg` inside, sorted by
/// name. The file stem is the sample id.
pub fn load_images(paths: &[PathBuf]) -> Result<Vec<TactileImage>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|f| f.extension().is_some_and(|x| x == "timg"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Dataset("no TIMG files found".into()));
    }
    let images: Vec<TactileImage> = files.iter().map(|f| load_one(f)).collect::<Result<_>>()?;
    let mut ids: Vec<u64> = images.iter().map(|i| i.sample_id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Dataset(format!("duplicate sample id {}", w[0])));
    }
    Ok(images)
}

fn load_one(path: &Path) -> Result<TactileImage> {
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| {
            Error::Dataset(format!("{}: file name must be a numeric sample id", path.display()))
        })?;
    load_timg(path, id)
}

fn gen(a: GenArgs) -> Result<()> {
    if let (Some(c), Some(r)) = (&a.contact, &a.reference) {
        let contact = load_pgm(c)?;
        let reference = load_pgm(r)?;
        let img = normalize_pair(&contact, &reference, a.scale)?;
        save_timg(&img, &a.out)?;
        log(
            "import",
            &[("out", a.out.display().to_string()), ("height", img.height.to_string()), ("width", img.width.to_string())],
        );
        return Ok(());
    }
    let mut cfg = SceneConfig::for_sensor(a.sensor);
    cfg.seed = a.seed;
    if let Some(s) = a.shape {
        cfg.shape = s;
    }
    if let Some(h) = a.height {
        cfg.height = h;
    }
    if let Some(w) = a.width {
        cfg.width = w;
    }
    if let Some(v) = a.noise {
        cfg.noise_amplitude = v;
    }
    if let Some(v) = a.smoothing {
        cfg.smoothing_radius = v;
    }
    if let Some(v) = a.press_depth {
        cfg.press_depth = v;
    }
    let ds = gen_dataset(&cfg, a.n)?;
    for img in &ds.images {
        let split = if ds.test_ids.contains(&img.sample_id) { "test" } else { "train" };
        save_timg(img, &a.out.join(split).join(format!("{:06}.timg", img.sample_id)))?;
    }
    log(
        "gen",
        &[
            ("n", a.n.to_string()),
            ("train", (a.n - ds.test_ids.len()).to_string()),
            ("test", ds.test_ids.len().to_string()),
            ("scale", format!("{:e}", ds.scale)),
            ("out", a.out.display().to_string()),
        ],
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let images = load_images(&a.data)?;
    let arch = TrunkArch {
        in_dim: 2,
        out_dim: 1,
        depth: a.depth,
        width: a.width,
        latent_dim: a.latent_dim,
        omega0: a.omega0,
    };
    let cfg = MetaConfig {
        inner_steps: a.inner_steps,
        inner_lr: a.inner_lr,
        outer_lr: a.outer_lr,
        batch_size: a.batch_size,
        outer_steps: a.outer_steps,
        seed: a.seed,
        second_order: a.second_order,
    };
    let every = a.log_every.max(1);
    let start = Instant::now();
    let (trunk, trace) = train_trunk_with(&images, arch, &cfg, |e| {
        if e.step % every == 0 || e.step + 1 == cfg.outer_steps {
            log(
                "train_step",
                &[
                    ("step", e.step.to_string()),
                    ("loss", format!("{:.6e}", e.loss)),
                    ("elapsed_s", format!("{:.1}", start.elapsed().as_secs_f64())),
                ],
            );
        }
    })?;
    save_trunk(&trunk, &a.out)?;
    if let Some(p) = &a.loss_log {
        let mut csv = String::from("step,loss\n");
        for e in &trace.entries {
            csv.push_str(&format!("{},{:e}\n", e.step, e.loss));
        }
        crate::codec::write_file(p, csv.as_bytes())?;
    }
    log(
        "train_done",
        &[("samples", images.len().to_string()), ("out", a.out.display().to_string())],
    );
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let trunk = load_trunk(&a.trunk)?;
    let images = load_images(&a.data)?;
    let fs = build_functaset(&trunk, &images, a.steps, a.lr)?;
    save_functaset(&fs, &a.out)?;
    log(
        "fit",
        &[
            ("functa", fs.len().to_string()),
            ("representation_bytes", representation_bytes(&trunk, &fs)?.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    Ok(())
}

fn recon(a: ReconArgs) -> Result<()> {
    let (trunk, fs) = a.linked.load()?;
    let mut written = 0;
    for f in &fs.functas {
        if !a.id.is_empty() && !a.id.contains(&f.sample_id) {
            continue;
        }
        let img = reconstruct(&trunk, f, fs.height, fs.width)?;
        let path = a.out.join(format!("{:06}.{}", f.sample_id, a.format));
        if a.format == "pgm" {
            save_pgm(&img, &path)?;
        } else {
            save_timg(&img, &path)?;
        }
        written += 1;
    }
    if let Some(missing) = a.id.iter().find(|id| fs.get(**id).is_none()) {
        return Err(Error::Dataset(format!("sample {missing} not in functaset")));
    }
    log("recon", &[("written", written.to_string()), ("out", a.out.display().to_string())]);
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (trunk, fs) = a.linked.load()?;
    let images = load_images(&a.data)?;
    let mut rows = Vec::with_capacity(images.len());
    for img in &images {
        let f = fs
            .get(img.sample_id)
            .ok_or_else(|| Error::Dataset(format!("sample {} not in functaset", img.sample_id)))?;
        let rec = reconstruct(&trunk, f, img.height, img.width)?;
        rows.push((img.sample_id, psnr_unit(&rec, img)?));
    }
    writeln!(out, "sample_id,psnr_db")?;
    for (id, p) in &rows {
        writeln!(out, "{id},{p:.6}")?;
    }
    let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    writeln!(out, "mean,{mean:.6}")?;
    Ok(())
}

fn latent_row(out: &mut dyn Write, id: u64, loss: f64, z: &Modulation) -> Result<()> {
    let mut header = String::from("sample_id,loss");
    let mut line = format!("{id},{loss:e}");
    for (k, v) in z.as_slice().iter().enumerate() {
        header.push_str(&format!(",dim{k}"));
        line.push_str(&format!(",{v:e}"));
    }
    writeln!(out, "{header}\n{line}")?;
    Ok(())
}

fn infer(a: InferArgs, out: &mut dyn Write) -> Result<()> {
    let trunk = load_trunk(&a.trunk)?;
    let img = load_one(&a.image)?;
    let (z, loss) = infer_point(&trunk, &img, a.steps, a.lr, &Modulation::zeros(trunk.arch().latent_dim))?;
    latent_row(out, img.sample_id, loss, &z)
}

fn sgld(a: SgldArgs, out: &mut dyn Write) -> Result<()> {
    let trunk = load_trunk(&a.trunk)?;
    let img = load_one(&a.image)?;
    let cfg = SgldConfig {
        chains: a.chains,
        steps: a.steps,
        step_size: a.step_size,
        sigma: a.sigma,
        seed: a.seed,
    };
    let post = sgld_sample(&trunk, &img, &cfg, &Modulation::zeros(trunk.arch().latent_dim))?;
    for c in &post.invalid {
        log("chain_diverged", &[("chain", c.to_string())]);
    }
    match &a.out {
        Some(p) => {
            let mut buf = Vec::new();
            post.write_csv(&mut buf)?;
            crate::codec::write_file(p, &buf)?;
        }
        None => post.write_csv(out)?,
    }
    log("sgld", &[("valid", post.len().to_string()), ("invalid", post.invalid.len().to_string())]);
    Ok(())
}

fn knn(a: KnnArgs, out: &mut dyn Write) -> Result<()> {
    let (trunk, fs) = a.linked.load()?;
    let img = load_one(&a.image)?;
    let e = knn_embed(&trunk, &fs, &img, a.k, a.warm_steps, a.refine_steps, a.lr)?;
    writeln!(out, "rank,sample_id,distance,weight")?;
    for (r, n) in e.neighbors.iter().enumerate() {
        writeln!(out, "{},{},{:e},{:e}", r + 1, n.sample_id, n.distance, n.weight)?;
    }
    log("knn", &[("sample_id", img.sample_id.to_string()), ("loss", format!("{:e}", e.loss))]);
    Ok(())
}

fn head_train(a: HeadTrainArgs) -> Result<()> {
    let fs = load_functaset(&a.functaset)?;
    let cfg = HeadConfig {
        lr: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        hidden: a.hidden,
        wrap_angle: a.wrap_angle,
    };
    let (head, curve) = train_head(&fs, &cfg)?;
    let every = a.log_every.max(1);
    for (i, l) in curve.iter().enumerate() {
        if i % every == 0 || i + 1 == curve.len() {
            log("head_epoch", &[("epoch", i.to_string()), ("loss", format!("{l:.6e}"))]);
        }
    }
    save_head(&head, &a.out)?;
    Ok(())
}

fn summary(out: &mut dyn Write, rows: &[(u64, PoseSE2, Option<PoseSE2>)]) -> Result<()> {
    let labeled: Vec<(PoseSE2, PoseSE2)> = rows.iter().filter_map(|(_, p, t)| t.map(|t| (*p, t))).collect();
    if labeled.is_empty() {
        return Ok(());
    }
    let n = labeled.len() as f64;
    let mut mse = [0.0; 3];
    let mut eps = 0.0;
    for (p, t) in &labeled {
        mse[0] += (p.x - t.x).powi(2) / n;
        mse[1] += (p.y - t.y).powi(2) / n;
        mse[2] += crate::pose::wrap_angle(p.theta - t.theta).powi(2) / n;
        eps += pose_error(p, t) / n;
    }
    writeln!(out, "\nmetric,value")?;
    writeln!(out, "mean_eps,{eps:e}")?;
    writeln!(out, "mse_x,{:e}\nmse_y,{:e}\nmse_theta,{:e}", mse[0], mse[1], mse[2])?;
    Ok(())
}

fn head_eval(a: HeadEvalArgs, out: &mut dyn Write) -> Result<()> {
    let head = load_head(&a.head)?;
    let fs = load_functaset(&a.functaset)?;
    let (zs, truth) = labeled_latents(&fs)?;
    let preds = predict_batch(&head, &zs)?;
    let rows: Vec<_> = fs
        .functas
        .iter()
        .zip(preds)
        .zip(truth)
        .map(|((f, p), t)| (f.sample_id, p, Some(t)))
        .collect();
    write_pose_csv(&mut *out, &rows)?;
    summary(out, &rows)
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let head = load_head(&a.head)?;
    let trunk = load_trunk(&a.trunk)?;
    let images = load_images(&a.data)?;
    let d = trunk.arch().latent_dim;
    let mut rows = Vec::with_capacity(images.len());
    let mut cov = String::from("sample_id,c00,c01,c02,c10,c11,c12,c20,c21,c22\n");
    for img in &images {
        let pose = if a.posterior {
            let cfg = SgldConfig {
                chains: a.chains,
                steps: a.steps,
                step_size: a.lr,
                sigma: a.sigma,
                seed: a.seed,
            };
            let post = sgld_sample(&trunk, img, &cfg, &Modulation::zeros(d))?;
            let pp = pose_posterior(&head, &post)?;
            cov.push_str(&img.sample_id.to_string());
            for row in &pp.covariance {
                for v in row {
                    cov.push_str(&format!(",{v:e}"));
                }
            }
            cov.push('\n');
            pp.mean
        } else {
            let (z, _) = infer_point(&trunk, img, a.steps, a.lr, &Modulation::zeros(d))?;
            predict_pose(&head, z.as_slice())?
        };
        rows.push((img.sample_id, pose, img.pose));
    }
    if let (true, Some(p)) = (a.posterior, &a.cov_out) {
        crate::codec::write_file(p, cov.as_bytes())?;
    }
    write_pose_csv(&mut *out, &rows)?;
    summary(out, &rows)
}
