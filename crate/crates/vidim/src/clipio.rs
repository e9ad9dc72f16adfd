//! Clip directories, manifests and synthetic dataset generation.
//!
//! A clip directory holds `frame_0.png` .. `frame_8.png` (8-bit RGB) and a
//! `meta.txt` of `key=value` lines (`resolution`, `seed`, `split`). A manifest
//! is a text file listing one clip directory per line, relative to the
//! manifest's own directory.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use vidim_core::conditioning::CLIP_FRAMES;
use vidim_core::rng::mix_seed;
use vidim_core::synth::{gen_synthetic_clip, training_example, VideoClip, CHANNELS};
use vidim_core::Tensor;

use crate::error::{IoContext, Result, VidimError};

pub const META_FILE: &str = "meta.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SPLITS: [&str; 3] = ["train", "linear", "ambiguous"];

const LINEAR_SPLIT_STREAM: u64 = 0x11ea7;
const AMBIGUOUS_SPLIT_STREAM: u64 = 0xa4b1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipMeta {
    pub resolution: usize,
    pub seed: Option<u64>,
    pub split: String,
}

pub fn frame_file(i: usize) -> String {
    format!("frame_{i}.png")
}

/// `[-1, 1]` to 8-bit.
pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(q: u8) -> f32 {
    q as f32 / 127.5 - 1.0
}

fn write_png(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = (frame.dim(0), frame.dim(1), frame.dim(2));
    if c != CHANNELS {
        return Err(VidimError::Format(format!("only RGB frames can be written, got {c} channels")));
    }
    let mut rgb = vec![0u8; h * w * c];
    for ch in 0..c {
        for (p, &v) in frame.data()[ch * h * w..(ch + 1) * h * w].iter().enumerate() {
            rgb[p * c + ch] = quantize(v);
        }
    }
    let file = fs::File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| VidimError::Format(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&rgb).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// One 8-bit RGB PNG as a `[3, H, W]` frame in `[-1, 1]`.
pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).at(path)?;
    let fmt = |e: png::DecodingError| VidimError::Format(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| VidimError::Format(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(VidimError::Format(format!(
            "{}: expected 8-bit RGB, got {:?} {:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let pixels = h * w;
    Ok(Tensor::from_fn(&[CHANNELS, h, w], |i| {
        let (ch, p) = (i / pixels, i % pixels);
        dequantize(buf[p * CHANNELS + ch])
    }))
}

/// Write 9 PNG frames and the metadata file. Pixels are quantized to 8 bits.
pub fn save_clip(clip: &VideoClip<f32>, dir: &Path, meta: &ClipMeta) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    for i in 0..CLIP_FRAMES {
        write_png(&dir.join(frame_file(i)), &clip.frames.outer(i)?)?;
    }
    let mut text = format!("resolution={}\n", meta.resolution);
    if let Some(seed) = meta.seed {
        text.push_str(&format!("seed={seed}\n"));
    }
    text.push_str(&format!("split={}\n", meta.split));
    let path = dir.join(META_FILE);
    fs::write(&path, text).at(&path)
}

fn parse_meta(path: &Path) -> Result<ClipMeta> {
    let text = fs::read_to_string(path).at(path)?;
    let mut meta = ClipMeta { resolution: 0, seed: None, split: String::new() };
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let bad = || VidimError::Format(format!("{}: bad metadata line {line:?}", path.display()));
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        match k.trim() {
            "resolution" => meta.resolution = v.trim().parse().map_err(|_| bad())?,
            "seed" => meta.seed = Some(v.trim().parse().map_err(|_| bad())?),
            "split" => meta.split = v.trim().to_string(),
            _ => {}
        }
    }
    Ok(meta)
}

/// Load a clip directory. Exactly `frame_0.png` .. `frame_8.png` must be
/// present; a missing metadata file is tolerated for external data.
pub fn load_clip(dir: &Path) -> Result<(VideoClip<f32>, ClipMeta)> {
    let mut frames_found = Vec::new();
    for entry in fs::read_dir(dir).at(dir)? {
        let name = entry.at(dir)?.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            frames_found.push(name);
        }
    }
    let expected: Vec<String> = (0..CLIP_FRAMES).map(frame_file).collect();
    frames_found.sort();
    let mut sorted_expected = expected.clone();
    sorted_expected.sort();
    if frames_found != sorted_expected {
        return Err(VidimError::Format(format!(
            "{}: expected frame_0.png .. frame_8.png, found {} image files {:?}",
            dir.display(),
            frames_found.len(),
            frames_found
        )));
    }
    let frames: Vec<Tensor<f32>> = expected.iter().map(|f| read_frame(&dir.join(f))).collect::<Result<_>>()?;
    let shape = frames[0].shape().to_vec();
    if frames.iter().any(|f| f.shape() != shape.as_slice()) || shape[1] != shape[2] {
        return Err(VidimError::Format(format!("{}: frames must be square and equally sized", dir.display())));
    }
    let data = frames.into_iter().flat_map(Tensor::into_data).collect();
    let stacked = Tensor::from_vec(&[CLIP_FRAMES, shape[0], shape[1], shape[2]], data)?;
    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        parse_meta(&meta_path)?
    } else {
        ClipMeta { resolution: shape[1], seed: None, split: String::new() }
    };
    if meta.resolution != shape[1] {
        return Err(VidimError::Format(format!(
            "{}: metadata says {} px, frames are {} px",
            dir.display(),
            meta.resolution,
            shape[1]
        )));
    }
    Ok((VideoClip::new(stacked)?, meta))
}

pub fn write_manifest(path: &Path, entries: &[String]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path).at(path)?);
    for e in entries {
        writeln!(out, "{e}").at(path)?;
    }
    out.flush().at(path)
}

/// Clip directories listed in a manifest, resolved against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| VidimError::Path(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| base.join(l)).collect())
}

/// Clip `index` of a named split. Training clips follow the training stream;
/// evaluation clips come from split-specific seed streams.
pub fn split_clip(global_seed: u64, split: &str, index: u64, resolution: usize) -> Result<(VideoClip<f32>, u64)> {
    match split {
        "train" => Ok((training_example(global_seed, index, resolution)?, mix_seed(global_seed, index))),
        "linear" | "ambiguous" => {
            let tag = if split == "linear" { LINEAR_SPLIT_STREAM } else { AMBIGUOUS_SPLIT_STREAM };
            let seed = mix_seed(mix_seed(global_seed, tag), index);
            Ok((gen_synthetic_clip(seed, resolution, split == "ambiguous")?.0, seed))
        }
        other => Err(VidimError::Config(format!("unknown split {other:?}"))),
    }
}

/// Generate `count` clips of `split` under `root/split` with a manifest.
pub fn make_split(root: &Path, split: &str, count: usize, resolution: usize, global_seed: u64) -> Result<PathBuf> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).at(&dir)?;
    let names: Vec<String> = (0..count).map(|i| format!("clip_{i:06}")).collect();
    names.par_iter().enumerate().try_for_each(|(i, name)| {
        let (clip, seed) = split_clip(global_seed, split, i as u64, resolution)?;
        save_clip(&clip, &dir.join(name), &ClipMeta { resolution, seed: Some(seed), split: split.into() })
    })?;
    let manifest = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &names)?;
    Ok(manifest)
}
