//! Synthetic sprite videos. A solid square moves over a solid background
//! along start -> waypoint -> end. With linear motion the waypoint is the
//! midpoint; ambiguous clips pick one of two waypoints mirrored across the
//! midpoint, so the endpoints do not determine the middle frames.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::conditioning::CLIP_FRAMES;
use crate::error::{Error, Result};
use crate::rng::{mix_seed, stream};
use crate::tensor::{Scalar, Tensor};

pub const CHANNELS: usize = 3;
/// Rejection-sampling attempts before giving up on a canvas.
const MAX_ATTEMPTS: usize = 1000;

/// Top-left pixel position `(row, col)`; may be fractional along a path.
pub type Point = (f64, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct SpriteSpec {
    pub size: usize,
    pub start: Point,
    pub waypoint: Point,
    pub end: Point,
    pub sprite_color: [f64; CHANNELS],
    pub background: [f64; CHANNELS],
    /// Ambiguous clips draw a hollow sprite so the two kinds of motion are
    /// distinguishable from the endpoints alone.
    pub hollow: bool,
}

/// Nine frames in `[-1, 1]`, slot `i` at timestamp `i/8`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip<T> {
    pub frames: Tensor<T>,
}

impl<T: Scalar> VideoClip<T> {
    pub fn new(frames: Tensor<T>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[0] != CLIP_FRAMES || s[2] != s[3] {
            return Err(Error::Size(format!("a clip is 9 square frames, got {:?}", s)));
        }
        if frames.data().iter().any(|v| !(v.as_f64() >= -1.0 && v.as_f64() <= 1.0)) {
            return Err(Error::Domain("clip pixels must lie in [-1, 1]".into()));
        }
        Ok(Self { frames })
    }

    pub fn resolution(&self) -> usize {
        self.frames.dim(2)
    }

    pub fn timestamps() -> [f64; CLIP_FRAMES] {
        core::array::from_fn(|i| i as f64 / (CLIP_FRAMES - 1) as f64)
    }
}

/// Sprite edge length for a canvas.
pub fn sprite_size(resolution: usize) -> usize {
    (resolution / 4).max(1)
}

/// Where the sprite sits at path fraction `tau` (unrounded).
pub fn path_position(spec: &SpriteSpec, tau: f64) -> Point {
    let lerp = |a: Point, b: Point, u: f64| (a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u);
    if tau <= 0.5 {
        lerp(spec.start, spec.waypoint, tau / 0.5)
    } else {
        lerp(spec.waypoint, spec.end, (tau - 0.5) / 0.5)
    }
}

fn round_point(p: Point) -> (i64, i64) {
    (libm::round(p.0) as i64, libm::round(p.1) as i64)
}

fn inside(p: Point, size: usize, resolution: usize) -> bool {
    let (r, c) = round_point(p);
    let hi = resolution as i64 - size as i64;
    (0..=hi).contains(&r) && (0..=hi).contains(&c)
}

/// Both legs are straight, so checking the three corners of the path
/// suffices.
fn path_inside(spec: &SpriteSpec, resolution: usize) -> bool {
    [spec.start, spec.waypoint, spec.end].iter().all(|&p| inside(p, spec.size, resolution))
}

/// The two waypoints of an ambiguous clip: the midpoint shifted by half a
/// sprite either way along the axis most perpendicular to start -> end. At
/// the middle frame the candidates sit one sprite width apart.
pub fn waypoint_candidates(start: Point, end: Point, size: usize) -> Result<[Point; 2]> {
    let (dr, dc) = (end.0 - start.0, end.1 - start.1);
    if dr == 0.0 && dc == 0.0 {
        return Err(Error::Respecify("start and end coincide; the mirror axis is undefined".into()));
    }
    let off = size as f64 / 2.0;
    let (nr, nc) = if libm::fabs(dr) >= libm::fabs(dc) { (0.0, off) } else { (off, 0.0) };
    let mid = ((start.0 + end.0) / 2.0, (start.1 + end.1) / 2.0);
    Ok([(mid.0 + nr, mid.1 + nc), (mid.0 - nr, mid.1 - nc)])
}

/// Pick the waypoint for given endpoints; errors if the path would leave
/// the canvas.
pub fn choose_waypoint<R: Rng + ?Sized>(
    rng: &mut R,
    start: Point,
    end: Point,
    size: usize,
    resolution: usize,
    ambiguous: bool,
) -> Result<Point> {
    let wp = if ambiguous {
        let c = waypoint_candidates(start, end, size)?;
        if !c.iter().all(|&p| inside(p, size, resolution)) {
            return Err(Error::Respecify("a waypoint candidate leaves the canvas".into()));
        }
        c[rng.random_range(0..2)]
    } else {
        ((start.0 + end.0) / 2.0, (start.1 + end.1) / 2.0)
    };
    Ok(wp)
}

fn random_spec<R: Rng + ?Sized>(rng: &mut R, resolution: usize, ambiguous: bool) -> Result<SpriteSpec> {
    let size = sprite_size(resolution);
    if resolution < 2 * size {
        return Err(Error::Respecify(format!("{resolution} px canvas too small for a {size} px sprite")));
    }
    let hi = (resolution - size) as i64;
    let background = core::array::from_fn(|_| rng.random_range(-1.0..-0.2));
    let sprite_color = core::array::from_fn(|_| rng.random_range(0.2..1.0));
    for _ in 0..MAX_ATTEMPTS {
        let mut pt = || (rng.random_range(0..=hi) as f64, rng.random_range(0..=hi) as f64);
        let (start, end) = (pt(), pt());
        let d = libm::hypot(end.0 - start.0, end.1 - start.1);
        if d < size as f64 {
            continue;
        }
        match choose_waypoint(rng, start, end, size, resolution, ambiguous) {
            Ok(waypoint) => {
                return Ok(SpriteSpec { size, start, waypoint, end, sprite_color, background, hollow: ambiguous })
            }
            Err(Error::Respecify(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Respecify(format!("no admissible path found on a {resolution} px canvas")))
}

fn render_frame<T: Scalar>(spec: &SpriteSpec, resolution: usize, tau: f64, out: &mut [T]) {
    let (r0, c0) = round_point(path_position(spec, tau));
    let hw = resolution * resolution;
    for ch in 0..CHANNELS {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        plane.fill(T::from_f64_lossy(spec.background[ch]));
        let fg = T::from_f64_lossy(spec.sprite_color[ch]);
        let rim = (spec.size / 4).max(1);
        for i in 0..spec.size {
            for j in 0..spec.size {
                let edge = i < rim || j < rim || i >= spec.size - rim || j >= spec.size - rim;
                if spec.hollow && !edge {
                    continue;
                }
                plane[(r0 as usize + i) * resolution + c0 as usize + j] = fg;
            }
        }
    }
}

/// Render `frames` evenly spaced path positions (a burst).
pub fn render<T: Scalar>(spec: &SpriteSpec, resolution: usize, frames: usize) -> Result<Tensor<T>> {
    if spec.size == 0 || !path_inside(spec, resolution) {
        return Err(Error::Respecify("sprite path leaves the canvas".into()));
    }
    if frames < 2 {
        return Err(Error::Size(format!("a burst needs at least 2 frames, got {frames}")));
    }
    let len = CHANNELS * resolution * resolution;
    let mut data = alloc::vec![T::zero(); frames * len];
    for (f, chunk) in data.chunks_mut(len).enumerate() {
        render_frame(spec, resolution, f as f64 / (frames - 1) as f64, chunk);
    }
    Tensor::from_vec(&[frames, CHANNELS, resolution, resolution], data)
}

/// A random clip: same seed, same clip.
pub fn gen_synthetic_clip<T: Scalar>(seed: u64, resolution: usize, ambiguous: bool) -> Result<(VideoClip<T>, SpriteSpec)> {
    let mut rng = stream(seed, 0x5917e);
    let spec = random_spec(&mut rng, resolution, ambiguous)?;
    let frames = render(&spec, resolution, CLIP_FRAMES)?;
    Ok((VideoClip::new(frames)?, spec))
}

/// Training stream: example `index` under `global_seed`. Half the examples
/// (by a hash of the index) are ambiguous.
pub fn training_example<T: Scalar>(global_seed: u64, index: u64, resolution: usize) -> Result<VideoClip<T>> {
    let seed = mix_seed(global_seed, index);
    let ambiguous = mix_seed(seed, 0xa3b1) & 1 == 1;
    Ok(gen_synthetic_clip(seed, resolution, ambiguous)?.0)
}

/// Indices `round(i (B-1) / (n-1))`, halves rounded away from zero.
pub fn subsample_indices(burst_len: usize, n: usize) -> Result<Vec<usize>> {
    if n < 2 || burst_len < n {
        return Err(Error::Size(format!("cannot pick {n} frames from a burst of {burst_len}")));
    }
    Ok((0..n)
        .map(|i| libm::round((i * (burst_len - 1)) as f64 / (n - 1) as f64) as usize)
        .collect())
}

/// Evenly pick 9 frames from a `[B, C, H, W]` burst.
pub fn subsample_burst<T: Scalar>(burst: &Tensor<T>) -> Result<VideoClip<T>> {
    if burst.shape().len() != 4 {
        return Err(Error::Size(format!("burst must be [B, C, H, W], got {:?}", burst.shape())));
    }
    let idx = subsample_indices(burst.dim(0), CLIP_FRAMES)?;
    let parts = idx.iter().map(|&i| burst.slice_outer(i, 1)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    VideoClip::new(Tensor::concat_outer(&refs)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sprite_origin(frame: &Tensor<f64>, spec: &SpriteSpec) -> (usize, usize) {
        let res = frame.dim(2);
        let plane = &frame.data()[..res * res];
        let k = plane.iter().position(|&v| v == spec.sprite_color[0]).unwrap();
        (k / res, k % res)
    }

    #[test]
    fn linear_clip_passes_the_midpoint() {
        for seed in 0..50 {
            let (clip, spec) = gen_synthetic_clip::<f64>(seed, 32, false).unwrap();
            assert_eq!(spec.size, 8);
            let mid = (libm::round((spec.start.0 + spec.end.0) / 2.0), libm::round((spec.start.1 + spec.end.1) / 2.0));
            let got = sprite_origin(&clip.frames.outer(4).unwrap(), &spec);
            assert_eq!((got.0 as f64, got.1 as f64), mid);
            assert_eq!(sprite_origin(&clip.frames.outer(0).unwrap(), &spec), (spec.start.0 as usize, spec.start.1 as usize));
            assert_eq!(sprite_origin(&clip.frames.outer(8).unwrap(), &spec), (spec.end.0 as usize, spec.end.1 as usize));
        }
    }

    #[test]
    fn same_seed_same_clip() {
        let a = gen_synthetic_clip::<f32>(7, 32, true).unwrap();
        let b = gen_synthetic_clip::<f32>(7, 32, true).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, gen_synthetic_clip::<f32>(8, 32, true).unwrap().0);
        assert!(a.0.frames.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(a.1.hollow);
        // hollow sprites keep the background at their centre
        let f0 = a.0.frames.outer(0).unwrap();
        let (r, c) = (a.1.start.0 as usize + 4, a.1.start.1 as usize + 4);
        assert_eq!(f0.data()[r * 32 + c] as f64, a.1.background[0] as f32 as f64);
    }

    #[test]
    fn waypoint_candidates_are_uniform() {
        let (start, end) = ((4.0, 4.0), (4.0, 20.0));
        assert_eq!(waypoint_candidates(start, end, 8).unwrap(), [(8.0, 12.0), (0.0, 12.0)]);
        let (start, end) = ((12.0, 4.0), (12.0, 20.0));
        let n = 1000;
        let mut counts = [0usize; 2];
        for seed in 0..n {
            let mut rng = stream(seed, 3);
            let wp = choose_waypoint(&mut rng, start, end, 8, 32, true).unwrap();
            let c = waypoint_candidates(start, end, 8).unwrap();
            counts[c.iter().position(|&p| p == wp).unwrap()] += 1;
        }
        let se = (n as f64 * 0.25).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 2.0).abs() < 3.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn middle_frames_vary_only_when_ambiguous() {
        let (start, end) = ((12.0, 4.0), (12.0, 20.0));
        for ambiguous in [false, true] {
            let mids: Vec<Tensor<f64>> = (0..40)
                .map(|seed| {
                    let mut rng = stream(seed, 4);
                    let waypoint = choose_waypoint(&mut rng, start, end, 8, 32, ambiguous).unwrap();
                    let spec = SpriteSpec { size: 8, start, waypoint, end, sprite_color: [0.5; 3], background: [-0.5; 3], hollow: ambiguous };
                    render::<f64>(&spec, 32, 9).unwrap().outer(4).unwrap()
                })
                .collect();
            let var: f64 = (0..mids[0].len())
                .map(|j| {
                    let m = mids.iter().map(|t| t.data()[j]).sum::<f64>() / mids.len() as f64;
                    mids.iter().map(|t| (t.data()[j] - m).powi(2)).sum::<f64>()
                })
                .sum();
            assert_eq!(var > 0.0, ambiguous);
        }
    }

    #[test]
    fn leaving_the_canvas_is_rejected() {
        let spec = SpriteSpec {
            size: 8,
            start: (0.0, 0.0),
            waypoint: (-3.0, 10.0),
            end: (0.0, 20.0),
            sprite_color: [0.5; 3],
            background: [-0.5; 3],
            hollow: false,
        };
        assert!(matches!(render::<f32>(&spec, 32, 9), Err(Error::Respecify(_))));
        let mut rng = stream(0, 0);
        assert!(matches!(choose_waypoint(&mut rng, (0.0, 0.0), (0.0, 20.0), 8, 32, true), Err(Error::Respecify(_))));
        assert!(matches!(choose_waypoint(&mut rng, (3.0, 3.0), (3.0, 3.0), 8, 32, true), Err(Error::Respecify(_))));
        assert!(matches!(gen_synthetic_clip::<f32>(0, 1, false), Err(Error::Respecify(_))));
    }

    #[test]
    fn subsample_examples() {
        assert_eq!(subsample_indices(9, 9).unwrap(), (0..9).collect::<Vec<_>>());
        assert_eq!(subsample_indices(33, 9).unwrap(), [0, 4, 8, 12, 16, 20, 24, 28, 32]);
        assert_eq!(subsample_indices(32, 9).unwrap(), [0, 4, 8, 12, 16, 19, 23, 27, 31]);
        assert!(matches!(subsample_indices(8, 9), Err(Error::Size(_))));
    }

    #[test]
    fn burst_subsampling_picks_frames() {
        let (_, spec) = gen_synthetic_clip::<f32>(3, 32, false).unwrap();
        let burst = render::<f32>(&spec, 32, 33).unwrap();
        let clip = subsample_burst(&burst).unwrap();
        assert_eq!(clip.frames.outer(1).unwrap(), burst.outer(4).unwrap());
        assert_eq!(clip.frames, render::<f32>(&spec, 32, 9).unwrap());
    }

    #[test]
    fn training_stream_is_a_function_of_seed_and_index() {
        let a = training_example::<f32>(5, 17, 32).unwrap();
        assert_eq!(a, training_example::<f32>(5, 17, 32).unwrap());
        assert_ne!(a, training_example::<f32>(5, 18, 32).unwrap());
        let amb = (0..200u64).filter(|&i| mix_seed(mix_seed(5, i), 0xa3b1) & 1 == 1).count();
        assert!((60..140).contains(&amb));
    }
}
