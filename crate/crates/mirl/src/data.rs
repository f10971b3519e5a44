//! Data sources and augmentation: a seeded synthetic texture generator with
//! ten class labels, a directory loader for binary PPM/PGM images, and the
//! basic augmentation pair (random resized crop, horizontal flip).

use std::path::Path;

use crate::rng::Rng;
use crate::tokenizer::ImageBatch;
use crate::{MirlError, Result};

#[derive(Debug, Clone)]
pub struct Dataset {
    /// One C*H*W buffer per image, values in [0,1].
    pub images: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Assemble a batch (no augmentation).
    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let mut out = ImageBatch::new(indices.len(), self.channels, self.height, self.width);
        let il = out.image_len();
        for (slot, &i) in indices.iter().enumerate() {
            out.values[slot * il..(slot + 1) * il].copy_from_slice(&self.images[i]);
        }
        out.labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        out
    }

    /// Assemble a batch with random resized crop and horizontal flip.
    pub fn batch_augmented(&self, indices: &[usize], rng: &mut Rng) -> ImageBatch {
        let mut out = self.batch(indices);
        let il = out.image_len();
        for slot in 0..indices.len() {
            let view = &mut out.values[slot * il..(slot + 1) * il];
            let img = view.to_vec();
            let augmented =
                random_resized_crop(&img, self.channels, self.height, self.width, rng);
            view.copy_from_slice(&augmented);
            if rng.next_f64() < 0.5 {
                hflip(view, self.channels, self.height, self.width);
            }
        }
        out
    }
}

/// Ten relational texture classes under heavy pixel noise.
///
/// Every image is a vertical-stripe carrier whose right half is phase
/// shifted against the left half by 2*pi*k/10; the shift index k is the
/// class. Absolute phase is uniform per image and the seam sits between
/// patch columns, so the marginal distribution of any local patch is
/// identical across classes: the label is carried only by the cross-half
/// phase relation. The noise amplitude matches the carrier amplitude, which
/// buries that relation for generic random features while a model trained
/// to inpaint masked patches must recover the coherent structure.
pub fn synthetic_textures(
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Dataset {
    let mut rng = Rng::for_role(seed, "synthetic-data");
    let classes = 10;
    let cycles = 4.0;
    let amp = 0.35;
    let noise = 0.30;
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        let delta = std::f64::consts::TAU * class as f64 / classes as f64;
        let phase = rng.uniform(0.0, std::f64::consts::TAU);
        let tints: Vec<f64> = (0..channels).map(|_| rng.uniform(-0.05, 0.05)).collect();
        let mut img = vec![0.0; channels * height * width];
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    let t = x as f64 / width as f64;
                    let p = if x < width / 2 { phase } else { phase + delta };
                    let wave = (std::f64::consts::TAU * cycles * t + p).sin();
                    let v = 0.5 + tints[c] + amp * wave + rng.uniform(-noise, noise);
                    img[(c * height + y) * width + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        images.push(img);
        labels.push(class);
    }
    Dataset {
        images,
        labels: Some(labels),
        classes,
        channels,
        height,
        width,
    }
}

/// Load a directory of binary PPM (P6) / PGM (P5) images, resized to the
/// requested geometry. A flat directory gives an unlabeled set; a directory
/// of subdirectories labels each image by its (sorted) subdirectory.
pub fn load_directory(
    dir: &Path,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Dataset> {
    let mut subdirs: Vec<std::path::PathBuf> = Vec::new();
    let mut files: Vec<std::path::PathBuf> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            subdirs.push(path);
        } else if is_netpbm(&path) {
            files.push(path);
        }
    }
    subdirs.sort();
    files.sort();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut classes = 0;
    if !subdirs.is_empty() {
        for (class, sub) in subdirs.iter().enumerate() {
            let mut inner: Vec<std::path::PathBuf> = std::fs::read_dir(sub)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| is_netpbm(p))
                .collect();
            inner.sort();
            for file in inner {
                images.push(load_netpbm(&file, channels, height, width)?);
                labels.push(class);
            }
            classes = class + 1;
        }
    } else {
        for file in &files {
            images.push(load_netpbm(file, channels, height, width)?);
        }
    }
    if images.is_empty() {
        return Err(MirlError::Data(format!(
            "no PPM/PGM images found under {}",
            dir.display()
        )));
    }
    Ok(Dataset {
        images,
        labels: if classes > 0 { Some(labels) } else { None },
        classes,
        channels,
        height,
        width,
    })
}

fn is_netpbm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("ppm") | Some("pgm")
    )
}

fn load_netpbm(path: &Path, channels: usize, height: usize, width: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    let (img, c0, h0, w0) = parse_netpbm(&bytes)
        .map_err(|e| MirlError::Data(format!("{}: {e}", path.display())))?;
    // adapt channels then resize
    let adapted: Vec<f64> = if c0 == channels {
        img
    } else if c0 == 1 {
        // replicate gray into every requested channel
        let mut out = vec![0.0; channels * h0 * w0];
        for c in 0..channels {
            out[c * h0 * w0..(c + 1) * h0 * w0].copy_from_slice(&img);
        }
        out
    } else if channels == 1 {
        let mut out = vec![0.0; h0 * w0];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..c0).map(|c| img[c * h0 * w0 + i]).sum::<f64>() / c0 as f64;
        }
        out
    } else {
        return Err(MirlError::Data(format!(
            "{}: cannot adapt {c0} channels to {channels}",
            path.display()
        )));
    };
    Ok(bilinear_resize(&adapted, channels, h0, w0, height, width))
}

fn parse_netpbm(bytes: &[u8]) -> std::result::Result<(Vec<f64>, usize, usize, usize), String> {
    let mut pos = 0usize;
    let mut token = || -> std::result::Result<String, String> {
        // skip whitespace and # comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic {other}")),
    };
    let width: usize = token()?.parse().map_err(|_| "bad width")?;
    let height: usize = token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err("truncated pixel data".into());
    }
    // interleaved bytes to planar floats
    let mut out = vec![0.0; need];
    for i in 0..width * height {
        for c in 0..channels {
            out[c * width * height + i] = bytes[pos + i * channels + c] as f64 / maxval as f64;
        }
    }
    Ok((out, channels, height, width))
}

/// Bilinear resampling of a planar C*H*W image.
pub fn bilinear_resize(
    img: &[f64],
    channels: usize,
    h0: usize,
    w0: usize,
    h1: usize,
    w1: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; channels * h1 * w1];
    for c in 0..channels {
        for y in 0..h1 {
            // align corners = false convention
            let sy = ((y as f64 + 0.5) * h0 as f64 / h1 as f64 - 0.5)
                .clamp(0.0, (h0 - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h0 - 1);
            let fy = sy - y0 as f64;
            for x in 0..w1 {
                let sx = ((x as f64 + 0.5) * w0 as f64 / w1 as f64 - 0.5)
                    .clamp(0.0, (w0 - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w0 - 1);
                let fx = sx - x0 as f64;
                let at = |yy: usize, xx: usize| img[(c * h0 + yy) * w0 + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(c * h1 + y) * w1 + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Random resized crop: sample an area fraction in [0.6, 1.0] and an aspect
/// ratio in [3/4, 4/3], then resize the crop back to the full geometry.
pub fn random_resized_crop(
    img: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    let area = (height * width) as f64;
    for _ in 0..10 {
        let target = area * rng.uniform(0.6, 1.0);
        let ratio = rng.uniform(0.75, 4.0 / 3.0);
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw == 0 || ch == 0 || cw > width || ch > height {
            continue;
        }
        let ox = rng.next_below(width - cw + 1);
        let oy = rng.next_below(height - ch + 1);
        let mut crop = vec![0.0; channels * ch * cw];
        for c in 0..channels {
            for y in 0..ch {
                for x in 0..cw {
                    crop[(c * ch + y) * cw + x] =
                        img[(c * height + oy + y) * width + ox + x];
                }
            }
        }
        return bilinear_resize(&crop, channels, ch, cw, height, width);
    }
    img.to_vec()
}

fn hflip(img: &mut [f64], channels: usize, height: usize, width: usize) {
    for c in 0..channels {
        for y in 0..height {
            let row = (c * height + y) * width;
            for x in 0..width / 2 {
                img.swap(row + x, row + width - 1 - x);
            }
        }
    }
}

/// Deterministic epoch ordering driven by the augmentation stream.
pub fn epoch_order(len: usize, rng: &mut Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    order
}
