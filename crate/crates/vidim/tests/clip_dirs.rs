use std::fs;

use vidim::clipio::{load_clip, make_split, read_manifest, save_clip, ClipMeta};
use vidim::VidimError;
use vidim_core::synth::gen_synthetic_clip;

#[test]
fn saved_clip_loads_within_one_quantization_step() {
    let dir = tempfile::tempdir().unwrap();
    let (clip, _) = gen_synthetic_clip::<f32>(11, 32, true).unwrap();
    let meta = ClipMeta { resolution: 32, seed: Some(11), split: "ambiguous".into() };
    save_clip(&clip, dir.path(), &meta).unwrap();
    let (back, back_meta) = load_clip(dir.path()).unwrap();
    assert_eq!(back_meta, meta);
    assert!(back.frames.max_abs_diff(&clip.frames) <= 2.0 / 255.0);
    // quantization happens once: a second round trip is exact
    let again = tempfile::tempdir().unwrap();
    save_clip(&back, again.path(), &meta).unwrap();
    assert_eq!(load_clip(again.path()).unwrap().0, back);
}

#[test]
fn missing_or_extra_frames_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (clip, _) = gen_synthetic_clip::<f32>(2, 16, false).unwrap();
    save_clip(&clip, dir.path(), &ClipMeta { resolution: 16, seed: None, split: "x".into() }).unwrap();
    fs::remove_file(dir.path().join("frame_8.png")).unwrap();
    assert!(matches!(load_clip(dir.path()), Err(VidimError::Format(_))));
    fs::copy(dir.path().join("frame_0.png"), dir.path().join("frame_9.png")).unwrap();
    assert!(matches!(load_clip(dir.path()), Err(VidimError::Format(_))));
}

#[test]
fn frames_follow_numeric_names() {
    let dir = tempfile::tempdir().unwrap();
    let (clip, _) = gen_synthetic_clip::<f32>(5, 16, false).unwrap();
    save_clip(&clip, dir.path(), &ClipMeta { resolution: 16, seed: None, split: "x".into() }).unwrap();
    let p = |i: usize| dir.path().join(format!("frame_{i}.png"));
    fs::rename(p(1), dir.path().join("tmp.png")).unwrap();
    fs::rename(p(7), p(1)).unwrap();
    fs::rename(dir.path().join("tmp.png"), p(7)).unwrap();
    let (swapped, _) = load_clip(dir.path()).unwrap();
    assert!(swapped.frames.outer(1).unwrap().max_abs_diff(&clip.frames.outer(7).unwrap()) <= 1.0 / 255.0);
}

#[test]
fn split_generation_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = make_split(a.path(), "linear", 3, 16, 9).unwrap();
    let mb = make_split(b.path(), "linear", 3, 16, 9).unwrap();
    assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
    let dirs = read_manifest(&ma).unwrap();
    assert_eq!(dirs.len(), 3);
    for (da, db) in dirs.iter().zip(read_manifest(&mb).unwrap()) {
        assert_eq!(fs::read(da.join("frame_4.png")).unwrap(), fs::read(db.join("frame_4.png")).unwrap());
    }
}
