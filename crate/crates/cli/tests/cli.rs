//! Subprocess tests of the `ibvc` binary. A micro ladder trained through
//! the `train` subcommand feeds encode and decode runs in separate
//! processes, pinning the causal contract: the decoder sees only the
//! bitstream and the checkpoints, and still reproduces the encoder's
//! reconstructions bit for bit. The error paths and report tooling are
//! covered alongside.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ibvc_core::pipeline::intra::IntraStub;
use ibvc_core::pipeline::{self, SeqConfig, HEADER_LEN};
use ibvc_core::{ckpt, metrics, train, video_io};
use tempfile::TempDir;

fn run(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ibvc"))
        .env("IBVC_CACHE_DIR", cache)
        .args(args)
        .output()
        .expect("spawning ibvc")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fail(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure, got success");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Train the tiny four-rung ladder into `cache` through the subcommand.
fn train_ladder(cache: &Path, seed: u64, steps: u64, clips: usize, epochs: usize) -> Output {
    run(
        cache,
        &[
            "train",
            "--arch",
            "tiny",
            "--crop",
            "64",
            "--clips",
            &clips.to_string(),
            "--epochs",
            &epochs.to_string(),
            "--finetune-epochs",
            "0",
            "--batch",
            "1",
            "--steps",
            &steps.to_string(),
            "--seed",
            &seed.to_string(),
        ],
    )
}

/// Byte offsets of (display, start, len) per chunk, walking the framing.
fn chunk_spans(bytes: &[u8]) -> Vec<(u16, usize, usize)> {
    let mut spans = Vec::new();
    let mut pos = HEADER_LEN;
    while pos < bytes.len() {
        let display = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
        let len = u32::from_le_bytes(bytes[pos + 3..pos + 7].try_into().unwrap()) as usize;
        spans.push((display, pos, 7 + len));
        pos += 7 + len;
    }
    spans
}

#[test]
fn end_to_end_round_trip_across_processes() {
    let tmp = TempDir::new().unwrap();
    let cache = tmp.path().join("cache");
    let frames_dir = tmp.path().join("frames");
    let stream = tmp.path().join("seq.ibvc");

    let out = train_ladder(&cache, 3, 2, 2, 1);
    let stdout = ok(&out);
    assert!(stdout.contains("vfi.ckpt"), "{stdout}");
    for id in 0..4 {
        assert!(cache.join(format!("codec_{id}.ckpt")).exists());
        assert!(cache.join(format!("train_{id}.csv")).exists());
    }

    // Odd geometry so the coded frames are padded internally.
    let frames = train::synth_clip(11, 5, 80, 96);
    video_io::write_png_dir(&frames_dir, &frames).unwrap();

    let out = run(
        &cache,
        &[
            "encode",
            "--input",
            frames_dir.to_str().unwrap(),
            "--output",
            stream.to_str().unwrap(),
            "--lambda-id",
            "1",
        ],
    );
    let stdout = ok(&out);
    assert!(stdout.contains("encoded 5 frames (1 I, 2 P, 2 B)"), "{stdout}");
    assert!(stdout.contains("bpp"), "{stdout}");
    let stats_csv = PathBuf::from(format!("{}.stats.csv", stream.display()));
    let stats = std::fs::read_to_string(&stats_csv).unwrap();
    let lines: Vec<&str> = stats.lines().collect();
    assert_eq!(lines[0], "display,type,bits,bpp,psnr_db");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,I,"));
    assert!(lines[2].starts_with("1,B,"));

    // The same invocation again produces the identical stream.
    let stream2 = tmp.path().join("seq2.ibvc");
    ok(&run(
        &cache,
        &[
            "encode",
            "--input",
            frames_dir.to_str().unwrap(),
            "--output",
            stream2.to_str().unwrap(),
            "--lambda-id",
            "1",
        ],
    ));
    let bytes = std::fs::read(&stream).unwrap();
    assert_eq!(bytes, std::fs::read(&stream2).unwrap(), "encode must be deterministic");

    // The stream matches an in-process encode from the same checkpoints
    // over the same PNG-quantized frames.
    let v = ckpt::load(&cache.join("vfi.ckpt")).unwrap();
    let c = ckpt::load(&cache.join("codec_1.ckpt")).unwrap();
    let ps = train::merge_params(&v.ps, &c.ps);
    let hash = pipeline::combined_model_hash(&v.hash, &c.hash);
    let stub = IntraStub { quality: train::intra_quality_for_id(1).unwrap() };
    let cfg = SeqConfig { gop_size: 32, n: 1, lambda_id: 1 };
    let png_frames = video_io::read_png_dir(&frames_dir).unwrap();
    let enc = pipeline::encode_sequence(&ps, &png_frames, &cfg, &stub, hash).unwrap();
    assert_eq!(bytes, enc.bytes, "CLI and library encodes must agree");

    // Decode in a second process from the bitstream alone.
    let dec_dir = tmp.path().join("dec");
    let stdout = ok(&run(
        &cache,
        &["decode", "--input", stream.to_str().unwrap(), "--output", dec_dir.to_str().unwrap()],
    ));
    assert!(stdout.contains("decoded 5 frames"), "{stdout}");
    let ref_dir = tmp.path().join("ref");
    video_io::write_png_dir(&ref_dir, &enc.recons).unwrap();
    let decoded = video_io::read_png_dir(&dec_dir).unwrap();
    let expect = video_io::read_png_dir(&ref_dir).unwrap();
    assert_eq!(decoded.len(), 5);
    for (d, (a, b)) in decoded.iter().zip(&expect).enumerate() {
        assert_eq!(a.shape(), [1, 3, 80, 96]);
        let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "decoded frame {d} differs from the encoder reconstruction");
    }
    println!(
        "criterion 10: decode in a separate process from the bitstream alone matches the \
         encoder reconstruction bit for bit on all 5 frames ... pass"
    );

    // A corrupted length field fails naming that frame.
    let spans = chunk_spans(&bytes);
    let &(display, start, _) = spans.last().unwrap();
    let mut bad = bytes.clone();
    bad[start + 6] ^= 0x10;
    let bad_path = tmp.path().join("bad.ibvc");
    std::fs::write(&bad_path, &bad).unwrap();
    let stderr = fail(&run(
        &cache,
        &["decode", "--input", bad_path.to_str().unwrap(), "--output", dec_dir.to_str().unwrap()],
    ));
    assert!(stderr.contains(&format!("frame {display}")), "{stderr}");

    // So does a truncated stream.
    std::fs::write(&bad_path, &bytes[..bytes.len() - 5]).unwrap();
    let stderr = fail(&run(
        &cache,
        &["decode", "--input", bad_path.to_str().unwrap(), "--output", dec_dir.to_str().unwrap()],
    ));
    assert!(stderr.contains("frame"), "{stderr}");

    // Interpolate the middle of the first reference pair.
    let pair_dir = tmp.path().join("pair");
    video_io::write_png_dir(&pair_dir, &[frames[0].clone(), frames[2].clone()]).unwrap();
    let mid_png = tmp.path().join("mid.png");
    ok(&run(
        &cache,
        &[
            "interp",
            "--input",
            pair_dir.to_str().unwrap(),
            "--output",
            mid_png.to_str().unwrap(),
        ],
    ));
    let mid = video_io::read_png(&mid_png).unwrap();
    assert_eq!(mid.shape(), [1, 3, 80, 96]);

    // Sweep the ladder and compare the report against itself.
    let report_dir = tmp.path().join("report");
    let stdout = ok(&run(
        &cache,
        &[
            "eval",
            "--input",
            frames_dir.to_str().unwrap(),
            "--output",
            report_dir.to_str().unwrap(),
            "--dataset",
            "toy",
        ],
    ));
    assert!(stdout.contains("ibvc [sequence]"), "{stdout}");
    let csv = report_dir.join("toy.csv");
    assert!(csv.exists());
    assert!(report_dir.join("toy_psnr.svg").exists());
    assert!(report_dir.join("toy_msssim.svg").exists());
    let curves = metrics::parse_report_csv(&csv).unwrap();
    assert_eq!(curves.len(), 2);
    assert!(curves.iter().all(|c| c.points.len() == 4));

    let stdout =
        ok(&run(&cache, &["bdrate", csv.to_str().unwrap(), csv.to_str().unwrap()]));
    assert!(stdout.contains("0.00%"), "{stdout}");
}

#[test]
fn training_is_reproducible_across_runs() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let out_a = ok(&train_ladder(&a, 7, 10, 1, 20));
    let out_b = ok(&train_ladder(&b, 7, 10, 1, 20));

    let losses = |s: &str| {
        s.lines()
            .filter(|l| l.contains("final loss"))
            .map(|l| l.rsplit(' ').next().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    let la = losses(&out_a);
    assert_eq!(la.len(), 4);
    assert_eq!(la, losses(&out_b), "final losses must repeat under one seed");
    for name in ["vfi.ckpt", "codec_0.ckpt", "codec_3.ckpt", "train_2.csv"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} must be byte-identical across runs");
    }
}

#[test]
fn missing_checkpoints_name_the_path() {
    let tmp = TempDir::new().unwrap();
    let cache = tmp.path().join("empty-cache");
    std::fs::create_dir_all(&cache).unwrap();
    let frames_dir = tmp.path().join("frames");
    video_io::write_png_dir(&frames_dir, &train::synth_clip(1, 1, 64, 64)).unwrap();

    let stderr = fail(&run(
        &cache,
        &[
            "encode",
            "--input",
            frames_dir.to_str().unwrap(),
            "--output",
            tmp.path().join("x.ibvc").to_str().unwrap(),
            "--lambda-id",
            "0",
        ],
    ));
    assert!(stderr.contains("vfi.ckpt"), "{stderr}");
    assert!(stderr.contains(cache.to_str().unwrap()), "{stderr}");
}

#[test]
fn interp_rejects_anything_but_two_frames() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("three");
    video_io::write_png_dir(&dir, &train::synth_clip(2, 3, 64, 64)).unwrap();
    let stderr = fail(&run(
        tmp.path(),
        &[
            "interp",
            "--input",
            dir.to_str().unwrap(),
            "--output",
            tmp.path().join("mid.png").to_str().unwrap(),
        ],
    ));
    assert!(stderr.contains("exactly 2"), "{stderr}");
}

#[test]
fn bdrate_of_identical_reports_is_zero() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("r.csv");
    std::fs::write(
        &csv,
        "label,bpp,psnr_db,ms_ssim\n\
         main,0.1,30,0.9\nmain,0.2,32,0.92\nmain,0.4,34,0.94\nmain,0.8,36,0.96\n",
    )
    .unwrap();
    let out = run(tmp.path(), &["bdrate", csv.to_str().unwrap(), csv.to_str().unwrap()]);
    let stdout = ok(&out);
    assert!(stdout.contains("0.00%"), "{stdout}");
}

#[test]
fn malformed_invocations_exit_nonzero() {
    let tmp = TempDir::new().unwrap();
    let stderr = fail(&run(tmp.path(), &["encode", "--bogus-flag"]));
    assert!(stderr.contains("bogus-flag"), "{stderr}");
    fail(&run(tmp.path(), &[]));
    // Raw YUV without geometry is refused up front.
    let yuv = tmp.path().join("clip.yuv");
    std::fs::write(&yuv, [0u8; 64]).unwrap();
    let stderr = fail(&run(
        tmp.path(),
        &[
            "encode",
            "--input",
            yuv.to_str().unwrap(),
            "--output",
            tmp.path().join("o.ibvc").to_str().unwrap(),
            "--lambda-id",
            "0",
        ],
    ));
    assert!(stderr.contains("--width"), "{stderr}");
}
