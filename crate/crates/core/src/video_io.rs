//! Frame input/output.
//!
//! Supported containers: raw planar 8-bit YUV (4:2:0 and 4:4:4, no header,
//! dimensions supplied by the caller) and directories of numbered PNGs.
//! Internally every frame is an RGB tensor `[1, 3, H, W]` in `[0, 1]`.
//!
//! YUV uses BT.709 limited range: Y in [16, 235], chroma in [16, 240].
//! 4:2:0 chroma is downsampled with a 2x2 box average and upsampled by
//! duplication.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel layout of a raw YUV file.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PixFmt {
    Yuv420,
    Yuv444,
}

impl PixFmt {
    pub fn frame_bytes(self, w: usize, h: usize) -> usize {
        match self {
            PixFmt::Yuv420 => w * h + 2 * (w / 2) * (h / 2),
            PixFmt::Yuv444 => 3 * w * h,
        }
    }
}

// BT.709 matrix, limited range.
const KR: f64 = 0.2126;
const KG: f64 = 0.7152;
const KB: f64 = 0.0722;
const CR_SCALE: f64 = 1.5748; // 2 (1 - KR)
const CB_SCALE: f64 = 1.8556; // 2 (1 - KB)
const G_CB: f64 = 0.18732427293064884; // KB * CB_SCALE / KG
const G_CR: f64 = 0.46812427293064884; // KR * CR_SCALE / KG

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// One YUV pixel to RGB in [0, 1].
fn yuv_to_rgb(y: u8, cb: u8, cr: u8) -> (f64, f64, f64) {
    let yl = (y as f64 - 16.0) / 219.0;
    let u = (cb as f64 - 128.0) / 224.0;
    let v = (cr as f64 - 128.0) / 224.0;
    let r = yl + CR_SCALE * v;
    let g = yl - G_CB * u - G_CR * v;
    let b = yl + CB_SCALE * u;
    (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0))
}

/// RGB in [0, 1] to YUV bytes.
fn rgb_to_yuv(r: f64, g: f64, b: f64) -> (u8, u8, u8) {
    let yl = KR * r + KG * g + KB * b;
    let cb = (b - yl) / CB_SCALE;
    let cr = (r - yl) / CR_SCALE;
    (
        clamp_u8(16.0 + 219.0 * yl),
        clamp_u8(128.0 + 224.0 * cb),
        clamp_u8(128.0 + 224.0 * cr),
    )
}

/// Read every frame of a raw YUV file.
pub fn read_yuv(path: &Path, w: usize, h: usize, fmt: PixFmt) -> Result<Vec<Tensor<f32>>> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidArg("zero frame dimension".into()));
    }
    if fmt == PixFmt::Yuv420 && (w % 2 != 0 || h % 2 != 0) {
        return Err(Error::InvalidArg(format!("4:2:0 needs even dimensions, got {w}x{h}")));
    }
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let fb = fmt.frame_bytes(w, h);
    if bytes.is_empty() || bytes.len() % fb != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {w}x{h} frames ({fb} bytes each)",
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(bytes.len() / fb);
    for chunk in bytes.chunks_exact(fb) {
        frames.push(yuv_frame_to_rgb(chunk, w, h, fmt));
    }
    Ok(frames)
}

fn yuv_frame_to_rgb(buf: &[u8], w: usize, h: usize, fmt: PixFmt) -> Tensor<f32> {
    let mut t = Tensor::zeros([1, 3, h, w]);
    let (cw, _ch) = match fmt {
        PixFmt::Yuv420 => (w / 2, h / 2),
        PixFmt::Yuv444 => (w, h),
    };
    let y_plane = &buf[..w * h];
    let cb_plane = &buf[w * h..];
    let plane_sz = match fmt {
        PixFmt::Yuv420 => (w / 2) * (h / 2),
        PixFmt::Yuv444 => w * h,
    };
    let cr_plane = &cb_plane[plane_sz..];
    let cb_plane = &cb_plane[..plane_sz];
    for yy in 0..h {
        for xx in 0..w {
            let (ci, cj) = match fmt {
                PixFmt::Yuv420 => (yy / 2, xx / 2),
                PixFmt::Yuv444 => (yy, xx),
            };
            let (r, g, b) = yuv_to_rgb(
                y_plane[yy * w + xx],
                cb_plane[ci * cw + cj],
                cr_plane[ci * cw + cj],
            );
            *t.at_mut(0, 0, yy, xx) = r as f32;
            *t.at_mut(0, 1, yy, xx) = g as f32;
            *t.at_mut(0, 2, yy, xx) = b as f32;
        }
    }
    t
}

/// Append frames to a raw YUV file.
pub fn write_yuv(path: &Path, frames: &[Tensor<f32>], fmt: PixFmt) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(f);
    for t in frames {
        let [_, c, h, w] = t.shape();
        assert_eq!(c, 3);
        let mut ybuf = vec![0u8; w * h];
        let mut cbf = vec![0.0f64; w * h];
        let mut crf = vec![0.0f64; w * h];
        for yy in 0..h {
            for xx in 0..w {
                let (y8, cb8, cr8) = rgb_to_yuv(
                    t.at(0, 0, yy, xx) as f64,
                    t.at(0, 1, yy, xx) as f64,
                    t.at(0, 2, yy, xx) as f64,
                );
                ybuf[yy * w + xx] = y8;
                cbf[yy * w + xx] = cb8 as f64;
                crf[yy * w + xx] = cr8 as f64;
            }
        }
        out.write_all(&ybuf).map_err(|e| Error::io(path, e))?;
        match fmt {
            PixFmt::Yuv444 => {
                let cb: Vec<u8> = cbf.iter().map(|&v| v as u8).collect();
                let cr: Vec<u8> = crf.iter().map(|&v| v as u8).collect();
                out.write_all(&cb).map_err(|e| Error::io(path, e))?;
                out.write_all(&cr).map_err(|e| Error::io(path, e))?;
            }
            PixFmt::Yuv420 => {
                for plane in [&cbf, &crf] {
                    let mut sub = vec![0u8; (w / 2) * (h / 2)];
                    for cy in 0..h / 2 {
                        for cx in 0..w / 2 {
                            let s = plane[2 * cy * w + 2 * cx]
                                + plane[2 * cy * w + 2 * cx + 1]
                                + plane[(2 * cy + 1) * w + 2 * cx]
                                + plane[(2 * cy + 1) * w + 2 * cx + 1];
                            sub[cy * (w / 2) + cx] = clamp_u8(s / 4.0);
                        }
                    }
                    out.write_all(&sub).map_err(|e| Error::io(path, e))?;
                }
            }
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read a directory of PNGs in lexicographic order.
pub fn read_png_dir(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut names: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map_or(false, |x| x == "png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Format(format!("no .png files in {dir:?}")));
    }
    names.iter().map(|p| read_png(p)).collect()
}

/// Read a single PNG into a `[1, 3, h, w]` frame on `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Format(format!("{path:?}: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for yy in 0..h {
        for xx in 0..w {
            let px = img.get_pixel(xx as u32, yy as u32);
            for ch in 0..3 {
                *t.at_mut(0, ch, yy, xx) = px.0[ch] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

/// Write frames as `%05d.png` into `dir` (created if missing).
pub fn write_png_dir(dir: &Path, frames: &[Tensor<f32>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, t) in frames.iter().enumerate() {
        write_png(&dir.join(format!("{i:05}.png")), t)?;
    }
    Ok(())
}

/// Write one frame as an 8-bit RGB PNG.
pub fn write_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let [_, _, h, w] = t.shape();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for yy in 0..h {
        for xx in 0..w {
            let px = [
                clamp_u8(t.at(0, 0, yy, xx) as f64 * 255.0),
                clamp_u8(t.at(0, 1, yy, xx) as f64 * 255.0),
                clamp_u8(t.at(0, 2, yy, xx) as f64 * 255.0),
            ];
            img.put_pixel(xx as u32, yy as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Format(format!("{path:?}: {e}")))
}

/// Pad height and width up to multiples of `m` by edge replication.
/// Returns the padded tensor and the original size.
pub fn pad_to_multiple(t: &Tensor<f32>, m: usize) -> (Tensor<f32>, (usize, usize)) {
    let [n, c, h, w] = t.shape();
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    if ph == h && pw == w {
        return (t.clone(), (h, w));
    }
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..ph {
                let sy = y.min(h - 1);
                for x in 0..pw {
                    let sx = x.min(w - 1);
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, sy, sx);
                }
            }
        }
    }
    (out, (h, w))
}

/// Crop back to `(h, w)` from the top-left corner.
pub fn crop(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let [n, c, ph, pw] = t.shape();
    assert!(h <= ph && w <= pw);
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, y, x);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bt709_anchor_values() {
        // Limited-range white and black.
        let (r, g, b) = yuv_to_rgb(235, 128, 128);
        assert!((r - 1.0).abs() < 1e-12 && (g - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12);
        let (r, g, b) = yuv_to_rgb(16, 128, 128);
        assert_eq!((r, g, b), (0.0, 0.0, 0.0));
        // Round trips for the anchors.
        assert_eq!(rgb_to_yuv(1.0, 1.0, 1.0), (235, 128, 128));
        assert_eq!(rgb_to_yuv(0.0, 0.0, 0.0), (16, 128, 128));
    }

    #[test]
    fn yuv444_round_trip_is_close() {
        // 8-bit limited-range YUV cannot be exact in RGB, but must be close.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.yuv");
        let mut t = Tensor::<f32>::zeros([1, 3, 4, 6]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 255) as f32 / 255.0;
        }
        write_yuv(&p, &[t.clone()], PixFmt::Yuv444).unwrap();
        let back = read_yuv(&p, 6, 4, PixFmt::Yuv444).unwrap();
        assert_eq!(back.len(), 1);
        for (a, b) in t.data().iter().zip(back[0].data()) {
            assert!((a - b).abs() < 0.02, "{a} vs {b}");
        }
    }

    #[test]
    fn yuv420_shapes_and_grey_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.yuv");
        // Flat grey: chroma subsampling is lossless there.
        let t = Tensor::<f32>::full([1, 3, 8, 8], 0.5);
        write_yuv(&p, &[t.clone(), t.clone()], PixFmt::Yuv420).unwrap();
        let sz = std::fs::metadata(&p).unwrap().len();
        assert_eq!(sz as usize, 2 * PixFmt::Yuv420.frame_bytes(8, 8));
        let back = read_yuv(&p, 8, 8, PixFmt::Yuv420).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in t.data().iter().zip(back[0].data()) {
            assert!((a - b).abs() < 0.01);
        }
        // Odd dimensions are rejected for 4:2:0.
        assert!(read_yuv(&p, 7, 8, PixFmt::Yuv420).is_err());
    }

    #[test]
    fn garbage_length_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.yuv");
        std::fs::write(&p, vec![0u8; 100]).unwrap();
        assert!(read_yuv(&p, 8, 8, PixFmt::Yuv420).is_err());
    }

    #[test]
    fn png_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Tensor::<f32>::zeros([1, 3, 5, 7]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i * 11) % 256) as f32 / 255.0;
        }
        write_png_dir(dir.path(), &[t.clone()]).unwrap();
        let back = read_png_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].shape(), [1, 3, 5, 7]);
        for (a, b) in t.data().iter().zip(back[0].data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let mut t = Tensor::<f32>::zeros([1, 3, 33, 47]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i % 97) as f32 / 97.0;
        }
        let (padded, (h, w)) = pad_to_multiple(&t, 32);
        assert_eq!(padded.shape(), [1, 3, 64, 64]);
        // Replicated border: last real row equals the padding rows.
        assert_eq!(padded.at(0, 1, 32, 10), padded.at(0, 1, 50, 10));
        let back = crop(&padded, h, w);
        assert_eq!(back.data(), t.data());
        // Already aligned: identity.
        let t2 = Tensor::<f32>::zeros([1, 3, 32, 64]);
        let (p2, _) = pad_to_multiple(&t2, 32);
        assert_eq!(p2.shape(), [1, 3, 32, 64]);
    }
}
