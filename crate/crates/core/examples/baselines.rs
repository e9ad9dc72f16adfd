use vidim_core::metrics::psnr;
use vidim_core::synth::gen_synthetic_clip;
fn main() {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for i in 0..8u64 {
        let (clip, _) = gen_synthetic_clip::<f32>(1_000_000 + i, 32, false).unwrap();
        let f = |k| clip.frames.outer(k).unwrap();
        let (s, e, m) = (f(0), f(8), f(4));
        let avg = s.zip_map(&e, |x, y| 0.5 * (x + y)).unwrap();
        a += psnr(&s, &m).unwrap() / 8.0;
        b += psnr(&avg, &m).unwrap() / 8.0;
        // background only: min over start/end per pixel picks background where sprites differ
        let bg = s.zip_map(&e, |x, y| if (x - y).abs() > 1e-6 { x.min(y) } else { x }).unwrap();
        c += psnr(&bg, &m).unwrap() / 8.0;
    }
    println!("copy start {a:.2} avg {b:.2} bg-ish {c:.2}");
}
