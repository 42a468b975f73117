//! Command-line front end.
//!
//! Every subcommand writes a [`RunManifest`] next to its outputs. Exit codes:
//! 0 on success, 2 for usage, input or validation errors, 3 for numeric
//! failures during a run.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cyclegan::{train, translate_volume, CycleGan, DiscriminatorConfig, GeneratorConfig, TrainConfig};
use crate::dti::{fit_volume, scalar_maps};
use crate::error::{Error, Result};
use crate::metrics::{mssim_volume, ssim_map, SsimParams};
use crate::phantom::{make_translation_dataset, make_warp, simulate_dwi, DomainMap, PairConfig, PhantomConfig};
use crate::pipeline::correct_distortion;
use crate::register::{register_demons, warp_apply, write_warp, RegConfig};
use crate::volume::{
    embed_slice, extract_slice, hemisphere_directions, read_gradient_scheme, read_mask, read_nifti,
    write_gradient_scheme, write_nifti, GradientScheme, Slice2D, Volume,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "dmrimap", version, about = "Diffusion MRI maps, image translation and registration")]
pub struct Cli {
    /// Seed for every random choice; overrides seeds inside config files.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Weighted least-squares tensor fit with FA and MD maps.
    FitDti(FitDtiArgs),
    /// Per-slice MSSIM between two volumes, as CSV.
    Ssim(SsimArgs),
    /// Synthetic data from a JSON job description.
    Phantom(PhantomArgs),
    /// Train a CycleGAN on two unpaired slice stacks.
    Train(TrainArgs),
    /// Translate every slice of a volume with a trained generator.
    Translate(TranslateArgs),
    /// Demons registration of one slice pair.
    Register(RegisterArgs),
    /// Undistort an FA map by registering it to an FA map synthesised from T1.
    DistortionCorrect(DistortionArgs),
}

#[derive(Debug, Args)]
pub struct FitDtiArgs {
    /// One 3D NIfTI per gradient, in scheme order.
    #[arg(long, num_args = 1.., required = true)]
    pub dwi: Vec<PathBuf>,
    #[arg(long)]
    pub bvals: PathBuf,
    #[arg(long)]
    pub bvecs: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SsimArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub axis: usize,
    /// Comma-separated slice indices; all slices when absent.
    #[arg(long, value_delimiter = ',')]
    pub slices: Option<Vec<usize>>,
    /// Fixed dynamic range; estimated per slice when absent.
    #[arg(long)]
    pub range: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub job: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON with optional `generator`, `discriminator` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data_a: PathBuf,
    #[arg(long)]
    pub data_b: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub axis: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    A2b,
    B2a,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub axis: usize,
    #[arg(long, value_enum, default_value_t = Direction::A2b)]
    pub direction: Direction,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    /// Registration settings as JSON; defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub axis: usize,
    #[arg(long, default_value_t = 0)]
    pub slice: usize,
    #[arg(long)]
    pub out_warp: PathBuf,
    #[arg(long)]
    pub out_resampled: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistortionArgs {
    #[arg(long)]
    pub distorted_fa: PathBuf,
    #[arg(long)]
    pub t1: PathBuf,
    /// CycleGAN checkpoint whose A to B generator maps T1 to FA.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Undistorted FA; when given, MSSIM before and after is reported.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub axis: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Value,
    pub seed: u64,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub threads: usize,
    pub wall_time_s: f64,
    pub summary: Value,
}

/// What a subcommand hands back for its manifest.
struct Outcome {
    config: Value,
    seed: u64,
    inputs: BTreeMap<String, PathBuf>,
    outputs: Vec<PathBuf>,
    summary: Value,
    manifest_path: PathBuf,
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    let start = Instant::now();
    let (name, outcome) = pool.install(|| match &cli.command {
        Command::FitDti(a) => fit_dti(a).map(|o| ("fit-dti", o)),
        Command::Ssim(a) => ssim(a).map(|o| ("ssim", o)),
        Command::Phantom(a) => phantom(a, cli.seed).map(|o| ("phantom", o)),
        Command::Train(a) => train_cmd(a, cli.seed).map(|o| ("train", o)),
        Command::Translate(a) => translate(a).map(|o| ("translate", o)),
        Command::Register(a) => register(a).map(|o| ("register", o)),
        Command::DistortionCorrect(a) => distortion_correct(a).map(|o| ("distortion-correct", o)),
    })?;
    let manifest = RunManifest {
        subcommand: name.into(),
        config: outcome.config,
        seed: outcome.seed,
        inputs: outcome.inputs,
        outputs: outcome.outputs,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        threads,
        wall_time_s: start.elapsed().as_secs_f64(),
        summary: outcome.summary,
    };
    write_json(&outcome.manifest_path, &manifest)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?).map_err(|e| Error::io(path, e))
}

/// Reads a JSON config, rejecting unknown keys (enforced by the target type).
fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => read_json(p),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn make_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `out.nii` becomes `out.run.json`.
fn sidecar_manifest(out: &Path) -> PathBuf {
    out.with_extension("run.json")
}

fn inputs(pairs: &[(&str, &Path)]) -> BTreeMap<String, PathBuf> {
    pairs.iter().map(|(k, p)| (k.to_string(), p.to_path_buf())).collect()
}

fn slices_of(vol: &Volume, axis: usize) -> Result<Vec<Slice2D>> {
    Ok(vol.slices(axis)?.into_iter().map(Slice2D::without_mask).collect())
}

/// Replaces the slices of `template` along `axis` with `slices`.
fn restack(template: &Volume, axis: usize, slices: &[Slice2D]) -> Result<Volume> {
    let mut out = template.clone();
    for (i, s) in slices.iter().enumerate() {
        out = embed_slice(&out, axis, i, s)?;
    }
    Ok(out)
}

fn fit_dti(a: &FitDtiArgs) -> Result<Outcome> {
    let scheme = read_gradient_scheme(&a.bvals, &a.bvecs)?;
    let dwi = a.dwi.iter().map(read_nifti).collect::<Result<Vec<_>>>()?;
    let mask = a.mask.as_ref().map(read_mask).transpose()?;
    let tf = fit_volume(&dwi, &scheme, mask.as_deref())?;
    let (fa, md) = scalar_maps(&tf)?;
    make_dir(&a.out_dir)?;
    let mut outputs = Vec::new();
    let mut save = |name: &str, v: &Volume| -> Result<()> {
        let p = a.out_dir.join(name);
        write_nifti(v, &p)?;
        outputs.push(p);
        Ok(())
    };
    save("fa.nii", &fa)?;
    save("md.nii", &md)?;
    save("s0.nii", &tf.s0_volume()?)?;
    for (name, v) in tf.component_volumes()? {
        save(&format!("tensor_{name}.nii"), &v)?;
    }
    let mut ins = inputs(&[("bvals", &a.bvals), ("bvecs", &a.bvecs)]);
    for (i, p) in a.dwi.iter().enumerate() {
        ins.insert(format!("dwi{i:03}"), p.clone());
    }
    if let Some(m) = &a.mask {
        ins.insert("mask".into(), m.clone());
    }
    Ok(Outcome {
        config: json!({ "n_volumes": dwi.len(), "n_b0": scheme.n_b0() }),
        seed: 0,
        inputs: ins,
        outputs,
        summary: json!({
            "fitted_voxels": tf.fit_ok.iter().filter(|&&ok| ok).count(),
            "clamped_voxels": tf.clamped_voxels,
        }),
        manifest_path: a.out_dir.join(MANIFEST_NAME),
    })
}

fn ssim(a: &SsimArgs) -> Result<Outcome> {
    let va = read_nifti(&a.a)?;
    let vb = read_nifti(&a.b)?;
    let mask = a.mask.as_ref().map(read_mask).transpose()?;
    if a.axis > 2 {
        return Err(Error::Config(format!("axis {} is not 0, 1 or 2", a.axis)));
    }
    let slices = a.slices.clone().unwrap_or_else(|| (0..va.dims()[a.axis]).collect());
    let mut p = SsimParams::default();
    p.dynamic_range = a.range;
    p.validate()?;
    let scores = mssim_volume(&va, &vb, mask.as_deref(), &p, a.axis, &slices)?;
    let mut csv = String::from("slice,mssim\n");
    for (i, s) in slices.iter().zip(&scores) {
        writeln!(csv, "{i},{s:.12}").expect("write to string");
    }
    std::fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    let mut ins = inputs(&[("a", &a.a), ("b", &a.b)]);
    if let Some(m) = &a.mask {
        ins.insert("mask".into(), m.clone());
    }
    Ok(Outcome {
        config: json!({ "axis": a.axis, "slices": slices, "ssim": p }),
        seed: 0,
        inputs: ins,
        outputs: vec![a.out.clone()],
        summary: json!({ "mean_mssim": mean, "n_slices": scores.len() }),
        manifest_path: sidecar_manifest(&a.out),
    })
}

fn one() -> usize {
    1
}

fn thousand() -> f64 {
    1000.0
}

fn thirty() -> usize {
    30
}

/// Simulated DWI with gradients on a Fibonacci hemisphere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DwiJob {
    pub phantom: PhantomConfig,
    #[serde(default = "one")]
    pub n_b0: usize,
    #[serde(default = "thousand")]
    pub bval: f64,
    #[serde(default = "thirty")]
    pub n_dirs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpJob {
    pub dims: [usize; 2],
    pub amplitude: f64,
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Slice stacks for the distortion-correction pipeline: domain A plays the
/// structural image, domain B the FA map, which is then warped.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionJob {
    pub n_slices: usize,
    pub dims: [usize; 2],
    pub amplitude: f64,
    pub sigma: f64,
    #[serde(default)]
    pub domain_map: DomainMap,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomJob {
    Dwi(DwiJob),
    Translation(PairConfig),
    Warp(WarpJob),
    Distortion(DistortionJob),
}

impl PhantomJob {
    fn reseed(&mut self, seed: u64) {
        match self {
            PhantomJob::Dwi(j) => j.phantom.seed = seed,
            PhantomJob::Translation(j) => j.seed = seed,
            PhantomJob::Warp(j) => j.seed = seed,
            PhantomJob::Distortion(j) => j.seed = seed,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            PhantomJob::Dwi(j) => j.phantom.seed,
            PhantomJob::Translation(j) => j.seed,
            PhantomJob::Warp(j) => j.seed,
            PhantomJob::Distortion(j) => j.seed,
        }
    }
}

fn unit_spacing_stack(slices: &[Slice2D]) -> Result<Volume> {
    Volume::from_slices(slices, [1.0; 3])
}

fn phantom(a: &PhantomArgs, seed: Option<u64>) -> Result<Outcome> {
    let mut job: PhantomJob = read_json(&a.job)?;
    if let Some(s) = seed {
        job.reseed(s);
    }
    make_dir(&a.out_dir)?;
    let dir = &a.out_dir;
    let mut outputs = Vec::new();
    let mut nii = |name: &str, v: &Volume| -> Result<()> {
        let p = dir.join(name);
        write_nifti(v, &p)?;
        outputs.push(p);
        Ok(())
    };
    let summary = match &job {
        PhantomJob::Dwi(j) => {
            let dirs = hemisphere_directions(j.n_dirs);
            let scheme = GradientScheme::single_shell(j.n_b0, j.bval, &dirs)?;
            let ph = simulate_dwi(&j.phantom, &scheme)?;
            for (i, v) in ph.volumes.iter().enumerate() {
                nii(&format!("dwi_{i:03}.nii"), v)?;
            }
            let (fa, md) = scalar_maps(&ph.truth)?;
            nii("truth_fa.nii", &fa)?;
            nii("truth_md.nii", &md)?;
            let mask = ph.truth.fit_ok.iter().map(|&m| f64::from(u8::from(m))).collect();
            nii("mask.nii", &Volume::new(ph.truth.dims, ph.truth.spacing, mask)?)?;
            let (bp, dp) = (dir.join("bvals"), dir.join("bvecs"));
            write_gradient_scheme(&scheme, &bp, &dp)?;
            outputs.extend([bp, dp]);
            json!({ "n_volumes": ph.volumes.len() })
        }
        PhantomJob::Translation(pairs) => {
            let d = make_translation_dataset(pairs)?;
            nii("set_a.nii", &unit_spacing_stack(&d.set_a)?)?;
            nii("set_b.nii", &unit_spacing_stack(&d.set_b)?)?;
            let p = dir.join("pairing.json");
            write_json(&p, &d.pairing)?;
            outputs.push(p);
            json!({ "n_images": d.set_a.len() })
        }
        PhantomJob::Warp(j) => {
            let w = make_warp(j.dims, j.amplitude, j.sigma, j.seed);
            let p = dir.join("warp.nii");
            write_warp(&w, &p)?;
            outputs.push(p);
            json!({ "max_magnitude": w.max_magnitude(), "mean_magnitude": w.mean_magnitude(None) })
        }
        PhantomJob::Distortion(j) => {
            let d = make_translation_dataset(&PairConfig {
                n_images: j.n_slices,
                dims: j.dims,
                domain_map: j.domain_map,
                seed: j.seed,
            })?;
            let truth: Vec<Slice2D> = (0..j.n_slices).map(|i| d.partner_of(i).clone()).collect();
            let distorted = truth
                .iter()
                .enumerate()
                .map(|(i, t)| warp_apply(t, &make_warp(j.dims, j.amplitude, j.sigma, j.seed.wrapping_add(1 + i as u64))))
                .collect::<Result<Vec<_>>>()?;
            nii("t1.nii", &unit_spacing_stack(&d.set_a)?)?;
            nii("truth_fa.nii", &unit_spacing_stack(&truth)?)?;
            nii("distorted_fa.nii", &unit_spacing_stack(&distorted)?)?;
            json!({ "n_slices": j.n_slices })
        }
    };
    Ok(Outcome {
        config: serde_json::to_value(&job)?,
        seed: job.seed(),
        inputs: inputs(&[("job", &a.job)]),
        outputs,
        summary,
        manifest_path: dir.join(MANIFEST_NAME),
    })
}

/// Training job file. Every section is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainFile {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> Result<Outcome> {
    let mut cfg: TrainFile = read_config(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let data_a = slices_of(&read_nifti(&a.data_a)?, a.axis)?;
    let data_b = slices_of(&read_nifti(&a.data_b)?, a.axis)?;
    let out = train(&data_a, &data_b, cfg.generator, cfg.discriminator, &cfg.train, Some(&a.out_dir))?;
    let last = out.reports.last().copied();
    let mut ins = inputs(&[("data_a", &a.data_a), ("data_b", &a.data_b)]);
    if let Some(c) = &a.config {
        ins.insert("config".into(), c.clone());
    }
    Ok(Outcome {
        config: serde_json::to_value(&cfg)?,
        seed: cfg.train.seed,
        inputs: ins,
        outputs: vec![a.out_dir.join("loss.csv"), a.out_dir.join("checkpoint")],
        summary: json!({ "steps": out.reports.len(), "last": last }),
        manifest_path: a.out_dir.join(MANIFEST_NAME),
    })
}

fn translate(a: &TranslateArgs) -> Result<Outcome> {
    let (model, manifest) = CycleGan::load(&a.checkpoint)?;
    let gen = match a.direction {
        Direction::A2b => &model.g_a2b,
        Direction::B2a => &model.g_b2a,
    };
    let vol = read_nifti(&a.input)?;
    let out = translate_volume(gen, &vol, a.axis)?;
    write_nifti(&out, &a.out)?;
    Ok(Outcome {
        config: json!({ "axis": a.axis, "direction": a.direction, "checkpoint_step": manifest.step }),
        seed: manifest.seed,
        inputs: inputs(&[("checkpoint", &a.checkpoint), ("in", &a.input)]),
        outputs: vec![a.out.clone()],
        summary: Value::Null,
        manifest_path: sidecar_manifest(&a.out),
    })
}

fn register(a: &RegisterArgs) -> Result<Outcome> {
    let cfg: RegConfig = read_config(a.config.as_deref())?;
    let moving = extract_slice(&read_nifti(&a.moving)?, a.axis, a.slice)?.without_mask();
    let fixed = extract_slice(&read_nifti(&a.fixed)?, a.axis, a.slice)?.without_mask();
    let reg = register_demons(&moving, &fixed, &cfg)?;
    let resampled = warp_apply(&moving, &reg.warp)?;
    write_warp(&reg.warp, &a.out_warp)?;
    write_nifti(&unit_spacing_stack(&[resampled])?, &a.out_resampled)?;
    let mut ins = inputs(&[("moving", &a.moving), ("fixed", &a.fixed)]);
    if let Some(c) = &a.config {
        ins.insert("config".into(), c.clone());
    }
    Ok(Outcome {
        config: json!({ "registration": cfg, "axis": a.axis, "slice": a.slice }),
        seed: 0,
        inputs: ins,
        outputs: vec![a.out_warp.clone(), a.out_warp.with_extension("json"), a.out_resampled.clone()],
        summary: json!({
            "final_mse": reg.residuals.last().map(|r| r.mse),
            "min_jacobian": reg.min_jacobian,
            "mean_displacement": reg.warp.mean_magnitude(None),
        }),
        manifest_path: sidecar_manifest(&a.out_warp),
    })
}

fn distortion_correct(a: &DistortionArgs) -> Result<Outcome> {
    let cfg: RegConfig = read_config(a.config.as_deref())?;
    let (model, manifest) = CycleGan::load(&a.checkpoint)?;
    let dist_vol = read_nifti(&a.distorted_fa)?;
    let t1_vol = read_nifti(&a.t1)?;
    if dist_vol.dims() != t1_vol.dims() {
        return Err(Error::dims(dist_vol.dims(), t1_vol.dims()));
    }
    let truth = a
        .truth
        .as_ref()
        .map(|p| read_nifti(p).and_then(|v| slices_of(&v, a.axis)))
        .transpose()?;
    let distorted = slices_of(&dist_vol, a.axis)?;
    let t1 = slices_of(&t1_vol, a.axis)?;
    make_dir(&a.out_dir.join("warps"))?;
    let p = SsimParams::default().with_range(1.0);
    let mut synthetic = Vec::new();
    let mut corrected = Vec::new();
    let mut outputs = Vec::new();
    let mut per_slice = Vec::new();
    let mut csv = String::from("slice,mssim_distorted,mssim_corrected\n");
    for (i, (d, t)) in distorted.iter().zip(&t1).enumerate() {
        let c = correct_distortion(&model.g_a2b, d, t, &cfg)?;
        let wp = a.out_dir.join("warps").join(format!("warp_{i:03}.nii"));
        write_warp(&c.registration.warp, &wp)?;
        outputs.push(wp);
        let mut row = json!({ "slice": i, "min_jacobian": c.registration.min_jacobian });
        if let Some(tr) = &truth {
            let before = ssim_map(d, &tr[i], None, &p)?.mssim;
            let after = ssim_map(&c.corrected, &tr[i], None, &p)?.mssim;
            writeln!(csv, "{i},{before:.12},{after:.12}").expect("write to string");
            row["mssim_distorted"] = json!(before);
            row["mssim_corrected"] = json!(after);
        }
        per_slice.push(row);
        synthetic.push(c.synthetic);
        corrected.push(c.corrected);
    }
    for (name, stack) in [("synthetic_fa.nii", &synthetic), ("corrected_fa.nii", &corrected)] {
        let path = a.out_dir.join(name);
        write_nifti(&restack(&dist_vol, a.axis, stack)?, &path)?;
        outputs.push(path);
    }
    if truth.is_some() {
        let path = a.out_dir.join("mssim.csv");
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        outputs.push(path);
    }
    let mut ins = inputs(&[
        ("distorted_fa", &a.distorted_fa),
        ("t1", &a.t1),
        ("checkpoint", &a.checkpoint),
    ]);
    if let Some(t) = &a.truth {
        ins.insert("truth".into(), t.clone());
    }
    Ok(Outcome {
        config: json!({ "registration": cfg, "axis": a.axis, "checkpoint_step": manifest.step }),
        seed: manifest.seed,
        inputs: ins,
        outputs,
        summary: json!({ "slices": per_slice }),
        manifest_path: a.out_dir.join(MANIFEST_NAME),
    })
}
