use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Dataset, Image, SynthConfig};
use crate::error::{Error, Result};
use crate::head::{BBox, Target};

pub const ANNOTATIONS_FILE: &str = "annotations.txt";
const IMAGE_DIR: &str = "images";

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.rgb);
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Format(format!("{} gray values for {width}x{height}", gray.len())));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(gray);
    fs::write(path, buf)?;
    Ok(())
}

/// Parses a binary netpbm header with the given magic; returns
/// `(width, height, pixel bytes)`.
fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("{}: truncated header", path.display())));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != magic {
        return Err(Error::Format(format!("{}: expected {magic}, found {}", path.display(), fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("{}: bad header field `{s}`", path.display())));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(Error::Format(format!("{}: only 8-bit images are supported", path.display())));
    }
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::Format(format!("{}: raster shorter than {need} bytes", path.display())));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let (width, height, rgb) = read_netpbm(path, "P6", 3)?;
    Ok(Image { width, height, rgb })
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5", 1)
}

/// Fixed-point rendering with `digits` significant digits.
fn fmt_sig(v: f64, digits: i32) -> String {
    if v == 0.0 {
        return format!("{:.*}", (digits - 1) as usize, 0.0);
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (digits - 1 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

fn image_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(IMAGE_DIR).join(format!("{i:06}.ppm"))
}

pub(super) fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join(IMAGE_DIR))?;
    for (i, img) in ds.images.iter().enumerate() {
        write_ppm(&image_path(dir, i), img)?;
    }
    let c = &ds.cfg;
    let mut out = Vec::new();
    writeln!(
        out,
        "# extent={} num_classes={} small_area={} medium_area={} seed={} images={} objects_min={} objects_max={} mix={},{},{}",
        c.extent,
        c.num_classes,
        c.small_area(),
        c.medium_area(),
        c.seed,
        ds.images.len(),
        c.objects_min,
        c.objects_max,
        c.mix[0],
        c.mix[1],
        c.mix[2]
    )?;
    for (i, ts) in ds.targets.iter().enumerate() {
        for t in ts {
            let b = t.bbox;
            writeln!(out, "{i} {} {} {} {} {}", t.class_id, fmt_sig(b.cx, 6), fmt_sig(b.cy, 6), fmt_sig(b.w, 6), fmt_sig(b.h, 6))?;
        }
    }
    fs::write(dir.join(ANNOTATIONS_FILE), out)?;
    Ok(())
}

pub(super) fn load(dir: &Path) -> Result<Dataset> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| Error::Format(format!("{}: missing manifest header", path.display())))?;
    let mut cfg = SynthConfig::default();
    let mut n_images = None;
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Format(format!("bad manifest field `{kv}`")))?;
        let bad = || Error::Format(format!("bad manifest value `{kv}`"));
        match k {
            "extent" => cfg.extent = v.parse().map_err(|_| bad())?,
            "num_classes" => cfg.num_classes = v.parse().map_err(|_| bad())?,
            "seed" => cfg.seed = v.parse().map_err(|_| bad())?,
            "images" => n_images = Some(v.parse::<usize>().map_err(|_| bad())?),
            "objects_min" => cfg.objects_min = v.parse().map_err(|_| bad())?,
            "objects_max" => cfg.objects_max = v.parse().map_err(|_| bad())?,
            "mix" => {
                let parts: Vec<f64> = v.split(',').map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                cfg.mix = parts.try_into().map_err(|_| bad())?;
            }
            // derived from the extent; recorded for readers of the file
            "small_area" | "medium_area" => {}
            _ => return Err(Error::Format(format!("unknown manifest field `{k}`"))),
        }
    }
    let n = n_images.ok_or_else(|| Error::Format("manifest lacks an image count".into()))?;
    let mut targets = vec![Vec::new(); n];
    for (ln, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("{}: line {}: `{line}`", path.display(), ln + 2));
        if f.len() != 6 {
            return Err(bad());
        }
        let img: usize = f[0].parse().map_err(|_| bad())?;
        let class_id: usize = f[1].parse().map_err(|_| bad())?;
        let v: Vec<f64> = f[2..].iter().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
        if img >= n || class_id >= cfg.num_classes {
            return Err(bad());
        }
        let bbox = BBox::new(v[0], v[1], v[2], v[3]);
        bbox.validate().map_err(|_| bad())?;
        targets[img].push(Target { class_id, bbox });
    }
    let images = (0..n)
        .map(|i| {
            let img = read_ppm(&image_path(dir, i))?;
            if img.width != cfg.extent || img.height != cfg.extent {
                return Err(Error::Format(format!("image {i} is {}x{}, manifest says {}", img.width, img.height, cfg.extent)));
            }
            Ok(img)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { cfg, images, targets })
}
