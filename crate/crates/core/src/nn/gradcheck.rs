//! Central finite differences against the tape for every operator.

use alloc::vec;
use alloc::vec::Vec;

use super::{Graph, TokenLayout, Var};
use crate::rng::{gaussian, stream, VidimRng};
use crate::tensor::Tensor;

/// Builds the graph from leaf tensors; returns the output var.
type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn project(out: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).clone()
}

fn check(inputs: Vec<Tensor<f64>>, build: &Build, rng: &mut VidimRng) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars);
    let r: Tensor<f64> = gaussian(rng, g.value(out).shape());
    let grads = g.backward(out, r.clone()).unwrap();
    let h = 1e-6;
    for (idx, inp) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[idx]).cloned().unwrap_or_else(|| Tensor::zeros(inp.shape()));
        for j in 0..inp.len() {
            let mut plus = inputs.clone();
            plus[idx].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[idx].data_mut()[j] -= h;
            let fd = (project(&eval(&plus, build), &r) - project(&eval(&minus, build), &r)) / (2.0 * h);
            let an = analytic.data()[j];
            assert!(
                (fd - an).abs() <= 1e-6 + 1e-5 * fd.abs().max(an.abs()),
                "input {idx} elem {j}: fd {fd} vs analytic {an}"
            );
        }
    }
}

fn rnd(rng: &mut VidimRng, shape: &[usize]) -> Tensor<f64> {
    gaussian(rng, shape)
}

#[test]
fn elementwise_and_linear() {
    let mut rng = stream(1, 1);
    let a = rnd(&mut rng, &[3, 4]);
    let b = rnd(&mut rng, &[3, 4]);
    check(vec![a.clone(), b], &|g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let s = g.silu(s);
        g.scale(s, 1.7)
    }, &mut rng);
    let w = rnd(&mut rng, &[5, 4]);
    let bias = rnd(&mut rng, &[5]);
    check(vec![a, w, bias], &|g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(), &mut rng);
}

#[test]
fn conv_variants() {
    let mut rng = stream(1, 2);
    for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (1, 1, 0), (2, 2, 0), (3, 2, 1)] {
        let x = rnd(&mut rng, &[2, 3, 6, 6]);
        let w = rnd(&mut rng, &[4, 3, k, k]);
        let b = rnd(&mut rng, &[4]);
        check(vec![x, w, b], &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap(), &mut rng);
    }
}

#[test]
fn norms_and_film() {
    let mut rng = stream(1, 3);
    let x = rnd(&mut rng, &[2, 4, 3, 3]);
    let gm = rnd(&mut rng, &[4]);
    let bt = rnd(&mut rng, &[4]);
    check(vec![x.clone(), gm, bt], &|g, v| g.group_norm(v[0], v[1], v[2], 2).unwrap(), &mut rng);
    let t = rnd(&mut rng, &[5, 6]);
    let gm = rnd(&mut rng, &[6]);
    let bt = rnd(&mut rng, &[6]);
    check(vec![t, gm, bt], &|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(), &mut rng);
    let m = rnd(&mut rng, &[2, 8]);
    check(vec![x, m], &|g, v| g.film(v[0], v[1]).unwrap(), &mut rng);
}

#[test]
fn resampling_and_layout() {
    let mut rng = stream(1, 4);
    let x = rnd(&mut rng, &[2, 3, 4, 4]);
    let y = rnd(&mut rng, &[2, 2, 4, 4]);
    check(vec![x.clone()], &|g, v| g.avg_pool2(v[0]).unwrap(), &mut rng);
    check(vec![x.clone()], &|g, v| g.upsample2(v[0]).unwrap(), &mut rng);
    check(vec![x.clone(), y], &|g, v| g.concat_channels(v[0], v[1]).unwrap(), &mut rng);
    let d = rnd(&mut rng, &[2, 8, 2, 3]);
    check(vec![d], &|g, v| g.depth_to_space(v[0], 2).unwrap(), &mut rng);
    let clips = rnd(&mut rng, &[6, 3, 2, 2]);
    check(vec![clips.clone()], &|g, v| {
        let t = g.to_tokens(v[0], TokenLayout::Temporal { frames: 3 }).unwrap();
        let t = g.scale(t, 2.0);
        g.from_tokens(t, TokenLayout::Temporal { frames: 3 }, &[6, 3, 2, 2]).unwrap()
    }, &mut rng);
    check(vec![clips.clone()], &|g, v| g.select_frames(v[0], 3, &[0, 2]).unwrap(), &mut rng);
    let e = rnd(&mut rng, &[4, 5]);
    let row = rnd(&mut rng, &[5]);
    check(vec![e, row], &|g, v| g.add_masked_row(v[0], v[1], &[true, false, false, true]).unwrap(), &mut rng);
}

#[test]
fn token_layouts_round_trip() {
    let mut rng = stream(1, 5);
    let x = rnd(&mut rng, &[6, 4, 3, 2]);
    for layout in [TokenLayout::Temporal { frames: 3 }, TokenLayout::Spatial] {
        let back = eval(core::slice::from_ref(&x), &move |g, v| {
            let t = g.to_tokens(v[0], layout).unwrap();
            g.from_tokens(t, layout, &[6, 4, 3, 2]).unwrap()
        });
        assert_eq!(back, x);
    }
    // temporal rows: sequence (clip 1, pixel 2) frame 1 is map 4
    let toks = eval(core::slice::from_ref(&x), &|g, v| g.to_tokens(v[0], TokenLayout::Temporal { frames: 3 }).unwrap());
    let row = (6 + 2) * 3 + 1;
    for ch in 0..4 {
        assert_eq!(toks.data()[row * 4 + ch], x.data()[(4 * 4 + ch) * 6 + 2]);
    }
}

#[test]
fn attention_gradients() {
    let mut rng = stream(1, 6);
    let q = rnd(&mut rng, &[6, 4]);
    let k = rnd(&mut rng, &[6, 4]);
    let v = rnd(&mut rng, &[6, 4]);
    let gain = Tensor::from_vec(&[2], vec![1.5, 3.0]).unwrap();
    check(vec![q, k, v, gain], &|g, v| g.qk_norm_attention(v[0], v[1], v[2], v[3], 2, 3).unwrap(), &mut rng);
}

#[test]
fn dropout_is_identity_in_eval_and_masks_in_training() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(Tensor::full(&[1000], 1.0));
    assert_eq!(g.dropout(x, 0.5), x);
    let mut g: Graph<f64> = Graph::training(stream(4, 4));
    let x = g.variable(Tensor::full(&[1000], 1.0));
    let y = g.dropout(x, 0.5);
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let zeros = vals.iter().filter(|&&v| v == 0.0).count();
    assert!((400..600).contains(&zeros));
    let grads = g.backward(y, Tensor::full(&[1000], 1.0)).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), g.value(y).data());
}
