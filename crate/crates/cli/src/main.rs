//! Command-line front end: encode, decode, interpolate, train, evaluate,
//! and BD-rate comparison in one binary, so checkpoints, bitstreams, and
//! report CSVs flow between subcommands with shared validation.
//!
//! Checkpoints are looked up in the directory named by `IBVC_CACHE_DIR`
//! (default `ibvc-cache`) as `vfi.ckpt` and `codec_<id>.ckpt` unless given
//! explicitly; `train` writes that layout. Every subcommand is
//! deterministic given its arguments, seed, and checkpoints, and any error
//! exits nonzero with a one-line cause.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ibvc_core::arcodec::CodecCfg;
use ibvc_core::ckpt;
use ibvc_core::metrics::{self, BdMethod, EvalCurve};
use ibvc_core::nn::ParamStore;
use ibvc_core::pipeline::gop::CodingType;
use ibvc_core::pipeline::intra::IntraStub;
use ibvc_core::pipeline::{self, Accounting, Header, SeqConfig, SeqStats};
use ibvc_core::tensor::Tensor;
use ibvc_core::train::{self, Distortion, TrainConfig};
use ibvc_core::vfi::{self, VfiCfg};
use ibvc_core::video_io::{self, PixFmt};

#[derive(Parser)]
#[command(name = "ibvc", version, about = "Interpolation-driven B-frame video codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode frames into a bitstream plus a per-frame stats CSV.
    Encode(EncodeArgs),
    /// Decode a bitstream back into display-order frames.
    Decode(DecodeArgs),
    /// Interpolate the middle frame between two frames, no bitstream.
    Interp(InterpArgs),
    /// Train the interpolator and the codec lambda ladder.
    Train(TrainArgs),
    /// Encode at every ladder point and emit R-D report CSV and plots.
    Eval(EvalArgs),
    /// BD-rate grid between report CSVs; the first file is the anchor.
    Bdrate(BdrateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PixFmtArg {
    Yuv420,
    Yuv444,
}

impl From<PixFmtArg> for PixFmt {
    fn from(v: PixFmtArg) -> PixFmt {
        match v {
            PixFmtArg::Yuv420 => PixFmt::Yuv420,
            PixFmtArg::Yuv444 => PixFmt::Yuv444,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AccountingArg {
    /// All chunk bits over all frames.
    Sequence,
    /// Bidirectional chunk bits over bidirectional frames only.
    BOnly,
}

impl From<AccountingArg> for Accounting {
    fn from(v: AccountingArg) -> Accounting {
        match v {
            AccountingArg::Sequence => Accounting::Sequence,
            AccountingArg::BOnly => Accounting::BOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DistortionArg {
    Mse,
    MsSsim,
}

impl From<DistortionArg> for Distortion {
    fn from(v: DistortionArg) -> Distortion {
        match v {
            DistortionArg::Mse => Distortion::Mse,
            DistortionArg::MsSsim => Distortion::MsSsim,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    /// Default model widths.
    Full,
    /// Minimal widths for smoke runs.
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Cubic,
    Pchip,
}

#[derive(Args)]
struct EncodeArgs {
    /// Directory of PNG frames, or a raw .yuv file.
    #[arg(long)]
    input: PathBuf,
    /// Bitstream file to write; stats land next to it as <output>.stats.csv.
    #[arg(long)]
    output: PathBuf,
    /// Interpolator checkpoint (default: <cache>/vfi.ckpt).
    #[arg(long)]
    ckpt_vfi: Option<PathBuf>,
    /// Codec checkpoint (default: <cache>/codec_<lambda-id>.ckpt).
    #[arg(long)]
    ckpt_codec: Option<PathBuf>,
    /// Rate point id from the trained ladder.
    #[arg(long)]
    lambda_id: u8,
    /// Frames per group of pictures.
    #[arg(long, default_value_t = 32)]
    gop: usize,
    /// Bidirectional frames between consecutive references.
    #[arg(long, default_value_t = 1)]
    n_bframes: usize,
    /// Frame width, required for raw YUV input.
    #[arg(long)]
    width: Option<usize>,
    /// Frame height, required for raw YUV input.
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, value_enum, default_value_t = PixFmtArg::Yuv420)]
    pix_fmt: PixFmtArg,
}

#[derive(Args)]
struct DecodeArgs {
    /// Bitstream file.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for PNG frames, or a .yuv path.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    ckpt_vfi: Option<PathBuf>,
    #[arg(long)]
    ckpt_codec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PixFmtArg::Yuv420)]
    pix_fmt: PixFmtArg,
}

#[derive(Args)]
struct InterpArgs {
    /// Directory holding exactly two PNG frames.
    #[arg(long)]
    input: PathBuf,
    /// PNG file for the interpolated middle frame.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    ckpt_vfi: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Clip directory (clips/<name>/*.png); omitted = synthetic corpus.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Checkpoint output directory (default: the cache directory).
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DistortionArg::Mse)]
    distortion: DistortionArg,
    /// Main-phase epochs.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Fine-tune epochs at the reduced learning rate.
    #[arg(long, default_value_t = 1)]
    finetune_epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Training crop side; must be a multiple of 64.
    #[arg(long, default_value_t = 256)]
    crop: usize,
    /// Synthetic clips to generate when no --input is given.
    #[arg(long, default_value_t = 8)]
    clips: usize,
    /// Cap optimizer steps per training run (smoke runs).
    #[arg(long)]
    steps: Option<u64>,
    /// Also update the interpolator during fine-tune epochs.
    #[arg(long)]
    joint_finetune: bool,
    #[arg(long, value_enum, default_value_t = ArchArg::Full)]
    arch: ArchArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of PNG frames, or a raw .yuv file.
    #[arg(long)]
    input: PathBuf,
    /// Report output directory.
    #[arg(long)]
    output: PathBuf,
    /// Dataset name for the report files (default: input stem).
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding vfi.ckpt and codec_<id>.ckpt (default: cache).
    #[arg(long)]
    ckpt_dir: Option<PathBuf>,
    /// Which trained ladder to sweep.
    #[arg(long, value_enum, default_value_t = DistortionArg::Mse)]
    distortion: DistortionArg,
    #[arg(long, default_value_t = 32)]
    gop: usize,
    #[arg(long, default_value_t = 1)]
    n_bframes: usize,
    #[arg(long, value_enum, default_value_t = AccountingArg::Sequence)]
    accounting: AccountingArg,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, value_enum, default_value_t = PixFmtArg::Yuv420)]
    pix_fmt: PixFmtArg,
}

#[derive(Args)]
struct BdrateArgs {
    /// Two or more report CSVs; the first is the anchor.
    #[arg(required = true, num_args = 2..)]
    files: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Cubic)]
    method: MethodArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Encode(a) => cmd_encode(a),
        Cmd::Decode(a) => cmd_decode(a),
        Cmd::Interp(a) => cmd_interp(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bdrate(a) => cmd_bdrate(a),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing

fn cache_dir() -> PathBuf {
    std::env::var_os("IBVC_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("ibvc-cache"))
}

fn read_frames(
    input: &Path,
    width: Option<usize>,
    height: Option<usize>,
    fmt: PixFmt,
) -> Result<Vec<Tensor<f32>>> {
    if input.is_dir() {
        Ok(video_io::read_png_dir(input)?)
    } else if input.extension().is_some_and(|e| e == "yuv") {
        let (Some(w), Some(h)) = (width, height) else {
            bail!("raw YUV input needs --width and --height");
        };
        Ok(video_io::read_yuv(input, w, h, fmt)?)
    } else {
        bail!("input {} is neither a directory of PNGs nor a .yuv file", input.display());
    }
}

fn write_frames(output: &Path, frames: &[Tensor<f32>], fmt: PixFmt) -> Result<()> {
    if output.extension().is_some_and(|e| e == "yuv") {
        video_io::write_yuv(output, frames, fmt)?;
    } else {
        video_io::write_png_dir(output, frames)?;
    }
    Ok(())
}

struct Model {
    ps: ParamStore<f32>,
    hash: [u8; 32],
    quality: u8,
}

/// Load and merge the two checkpoints for a lambda id, resolving omitted
/// paths against the cache directory.
fn load_model(
    ckpt_vfi: Option<PathBuf>,
    ckpt_codec: Option<PathBuf>,
    lambda_id: u8,
) -> Result<Model> {
    let vfi_path = ckpt_vfi.unwrap_or_else(|| cache_dir().join("vfi.ckpt"));
    let codec_path =
        ckpt_codec.unwrap_or_else(|| cache_dir().join(format!("codec_{lambda_id}.ckpt")));
    let v = ckpt::load(&vfi_path)
        .with_context(|| format!("loading interpolator checkpoint {}", vfi_path.display()))?;
    let c = ckpt::load(&codec_path)
        .with_context(|| format!("loading codec checkpoint {}", codec_path.display()))?;
    if let Some(id) = c.meta.get("lambda_id").and_then(|v| v.as_u64()) {
        if id != lambda_id as u64 {
            bail!(
                "checkpoint {} was trained for lambda id {id}, not {lambda_id}",
                codec_path.display()
            );
        }
    }
    Ok(Model {
        ps: train::merge_params(&v.ps, &c.ps),
        hash: pipeline::combined_model_hash(&v.hash, &c.hash),
        quality: train::intra_quality_for_id(lambda_id)?,
    })
}

fn type_counts(stats: &SeqStats) -> ([usize; 3], [usize; 3]) {
    let mut counts = [0usize; 3];
    let mut bits = [0usize; 3];
    for f in &stats.frames {
        let i = match f.ctype {
            CodingType::I => 0,
            CodingType::P => 1,
            CodingType::B => 2,
        };
        counts[i] += 1;
        bits[i] += f.bits;
    }
    (counts, bits)
}

fn write_stats_csv(path: &Path, stats: &SeqStats) -> Result<()> {
    let mut out = String::from("display,type,bits,bpp,psnr_db\n");
    for f in &stats.frames {
        out.push_str(&format!("{},{:?},{},{},{}\n", f.display, f.ctype, f.bits, f.bpp, f.psnr));
    }
    std::fs::write(path, out).with_context(|| format!("writing stats {}", path.display()))
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let frames = read_frames(&a.input, a.width, a.height, a.pix_fmt.into())?;
    let model = load_model(a.ckpt_vfi, a.ckpt_codec, a.lambda_id)?;
    let stub = IntraStub { quality: model.quality };
    let cfg = SeqConfig { gop_size: a.gop, n: a.n_bframes, lambda_id: a.lambda_id };
    let out = pipeline::encode_sequence(&model.ps, &frames, &cfg, &stub, model.hash)?;
    std::fs::write(&a.output, &out.bytes)
        .with_context(|| format!("writing bitstream {}", a.output.display()))?;
    let stats_path = PathBuf::from(format!("{}.stats.csv", a.output.display()));
    write_stats_csv(&stats_path, &out.stats)?;
    let ([ni, np, nb], [bi, bp, bb]) = type_counts(&out.stats);
    println!(
        "encoded {} frames ({ni} I, {np} P, {nb} B) to {}",
        frames.len(),
        a.output.display()
    );
    println!(
        "bits: total {} (I {bi}, P {bp}, B {bb}); {} bpp",
        out.stats.total_bits, out.stats.bpp
    );
    println!("stats: {}", stats_path.display());
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let bytes = std::fs::read(&a.input)
        .with_context(|| format!("reading bitstream {}", a.input.display()))?;
    let header = Header::parse(&bytes)?;
    let model = load_model(a.ckpt_vfi, a.ckpt_codec, header.lambda_id)?;
    let stub = IntraStub { quality: model.quality };
    let out = pipeline::decode_sequence(&model.ps, &bytes, &stub, model.hash)?;
    write_frames(&a.output, &out.frames, a.pix_fmt.into())?;
    println!("decoded {} frames to {}", out.frames.len(), a.output.display());
    Ok(())
}

fn cmd_interp(a: InterpArgs) -> Result<()> {
    let frames = video_io::read_png_dir(&a.input)?;
    if frames.len() != 2 {
        bail!("interp needs exactly 2 PNG frames in {}, found {}", a.input.display(), frames.len());
    }
    if frames[1].shape() != frames[0].shape() {
        bail!("the two frames differ in size");
    }
    let vfi_path = a.ckpt_vfi.unwrap_or_else(|| cache_dir().join("vfi.ckpt"));
    let v = ckpt::load(&vfi_path)
        .with_context(|| format!("loading interpolator checkpoint {}", vfi_path.display()))?;
    let mut ps = ParamStore::new();
    ps.adopt("vfi", &v.ps);
    let [_, _, h, w] = frames[0].shape();
    let (p0, _) = video_io::pad_to_multiple(&frames[0], pipeline::PAD);
    let (p1, _) = video_io::pad_to_multiple(&frames[1], pipeline::PAD);
    let mid = video_io::crop(&vfi::interpolate(&ps, &p0, &p1).xbar, h, w);
    video_io::write_png(&a.output, &mid)?;
    println!("wrote interpolated frame to {}", a.output.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let out_dir = a.output.unwrap_or_else(cache_dir);
    let cfg = TrainConfig {
        distortion: a.distortion.into(),
        epochs_main: a.epochs,
        epochs_finetune: a.finetune_epochs,
        batch: a.batch,
        crop: a.crop,
        joint_finetune_vfi: a.joint_finetune,
        max_steps: a.steps,
        ..TrainConfig::default()
    };
    let samples = match &a.input {
        Some(dir) => train::samples_from_dir(dir, a.crop, a.seed)?,
        None => train::synth_corpus(a.seed, a.clips, a.crop)?,
    };
    let (vc, cc) = match a.arch {
        ArchArg::Full => (VfiCfg::default(), CodecCfg::default()),
        ArchArg::Tiny => (
            VfiCfg { feat: 3, est: 4 },
            CodecCfg { enc: 4, latent: 3, hyper: 2, dec: 4, att_layers: 1 },
        ),
    };
    println!("training on {} samples at {}x{}", samples.len(), a.crop, a.crop);
    let ladder = train::build_model_ladder(&out_dir, &cfg, &vc, &cc, &samples, a.seed)?;
    println!("interpolator: {}", ladder.vfi_path.display());
    for r in &ladder.rungs {
        let log = out_dir.join(format!("train_{}.csv", r.lambda_id));
        let final_loss = std::fs::read_to_string(&log)
            .ok()
            .and_then(|t| {
                t.lines().last().and_then(|l| l.split(',').nth(1).map(str::to_string))
            })
            .unwrap_or_else(|| "?".into());
        println!(
            "lambda {} (id {}): {} final loss {final_loss}",
            r.lambda,
            r.lambda_id,
            r.path.display()
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let frames = read_frames(&a.input, a.width, a.height, a.pix_fmt.into())?;
    let dataset = a.dataset.unwrap_or_else(|| {
        a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("dataset".into())
    });
    let ckpt_dir = a.ckpt_dir.unwrap_or_else(cache_dir);
    let distortion: Distortion = a.distortion.into();
    let acct: Accounting = a.accounting.into();
    let acct_name = match acct {
        Accounting::Sequence => "sequence",
        Accounting::BOnly => "b-only",
    };
    let vfi_path = ckpt_dir.join("vfi.ckpt");
    let v = ckpt::load(&vfi_path)
        .with_context(|| format!("loading interpolator checkpoint {}", vfi_path.display()))?;
    let mut coded = Vec::new();
    let mut baseline = Vec::new();
    let mut baseline_psnr = Vec::new();
    for &(id, _) in distortion.ladder() {
        let codec_path = ckpt_dir.join(format!("codec_{id}.ckpt"));
        let c = ckpt::load(&codec_path)
            .with_context(|| format!("loading codec checkpoint {}", codec_path.display()))?;
        let ps = train::merge_params(&v.ps, &c.ps);
        let hash = pipeline::combined_model_hash(&v.hash, &c.hash);
        let stub = IntraStub { quality: train::intra_quality_for_id(id)? };
        let cfg = SeqConfig { gop_size: a.gop, n: a.n_bframes, lambda_id: id };
        let enc = pipeline::encode_sequence(&ps, &frames, &cfg, &stub, hash)?;
        coded.push(pipeline::rd_point(&frames, &enc.recons, &enc.stats, acct)?);
        let base = pipeline::interp_only_sequence(&ps, &frames, &cfg, &stub)?;
        let base_pt = pipeline::rd_point(&frames, &base.recons, &base.stats, acct)?;
        match acct {
            // Zero bidirectional bits means no bpp axis for the baseline
            // under this accounting; report its quality as text instead.
            Accounting::BOnly => baseline_psnr.push((id, base_pt.psnr_db)),
            Accounting::Sequence => baseline.push(base_pt),
        }
    }
    let mut curves = vec![EvalCurve { label: format!("ibvc [{acct_name}]"), points: coded }];
    if !baseline.is_empty() {
        curves.push(EvalCurve { label: format!("interp-only [{acct_name}]"), points: baseline });
    }
    let (paths, warnings) = metrics::emit_report(&a.output, &dataset, &curves)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    for curve in &curves {
        println!("{}:", curve.label);
        for (p, &(id, _)) in curve.points.iter().zip(distortion.ladder()) {
            println!(
                "  id {id}: {:.6} bpp, {:.3} dB, ms-ssim {:.5}",
                p.bpp, p.psnr_db, p.ms_ssim
            );
        }
    }
    for (id, db) in &baseline_psnr {
        println!("interp-only id {id}: {db:.3} dB over bidirectional frames, 0 bits");
    }
    for p in &paths {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_bdrate(a: BdrateArgs) -> Result<()> {
    let method = || match a.method {
        MethodArg::Cubic => BdMethod::Cubic,
        MethodArg::Pchip => BdMethod::Pchip,
    };
    let mut reports: Vec<(String, Vec<EvalCurve>)> = Vec::new();
    for p in &a.files {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        let curves =
            metrics::parse_report_csv(p).with_context(|| format!("reading {}", p.display()))?;
        reports.push((name, curves));
    }
    let (anchor_name, anchor) = &reports[0];
    let mut rows = Vec::new();
    for curve in anchor {
        let pts =
            |c: &EvalCurve| c.points.iter().map(|p| (p.bpp, p.psnr_db)).collect::<Vec<_>>();
        let a_pts = pts(curve);
        let mut cells = Vec::new();
        for (name, other) in &reports[1..] {
            match other.iter().find(|c| c.label == curve.label) {
                Some(t) => {
                    let r = metrics::bd_rate(&a_pts, &pts(t), method()).with_context(|| {
                        format!("BD-rate of '{}' in {name} vs {anchor_name}", curve.label)
                    })?;
                    cells.push(Some(r));
                }
                None => cells.push(None),
            }
        }
        rows.push((curve.label.clone(), cells));
    }
    println!("BD-rate vs {anchor_name} (negative = bits saved at equal quality)");
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(5).max(5);
    print!("{:label_w$}", "curve");
    for (name, _) in &reports[1..] {
        print!("  {name:>12}");
    }
    println!();
    for (label, cells) in &rows {
        print!("{label:label_w$}");
        for cell in cells {
            match cell {
                Some(v) => print!("  {:>11.2}%", v),
                None => print!("  {:>12}", "-"),
            }
        }
        println!();
    }
    Ok(())
}
