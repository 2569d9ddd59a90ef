#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng as _;
use vidpad::embed::{Label, QkvMaps};
use vidpad::model::{cross_entropy, forward, randomize_params, BoundParams, ModelConfig, ModelParams};
use vidpad::msmhsa::{msmhsa_forward, ScaleConfig};
use vidpad::rng;
use vidpad::tensor::{Tape, Tensor, Var};
use vidpad::verify::{check_gradients, random_tensor, GradCheckReport};
use vidpad::Result;

pub const SHAPES_PER_PRIMITIVE: usize = 5;

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Gradient check of `sum(op(inputs) ⊙ w)` for a fixed random `w`.
pub fn check_op(inputs: Vec<Tensor<f64>>, seed: u64, op: Op) -> GradCheckReport {
    let mut probe = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.leaf(t.clone())).collect();
    let out = op(&mut probe, &vars).expect("op runs");
    let w = random_tensor(probe.shape(out), seed ^ 0x5eed, 1.0);
    check_gradients(&inputs, |tape, v| {
        let out = op(tape, v)?;
        let wv = tape.constant(w.clone());
        let p = tape.mul(out, wv)?;
        Ok(tape.sum(p))
    })
    .expect("gradient check runs")
}

fn dims(r: &mut rng::Rng, rank: usize, max: usize) -> Vec<usize> {
    (0..rank).map(|_| r.random_range(1..=max)).collect()
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    let shape = t.shape().to_vec();
    let data = t.into_data().into_iter().map(|v| v.signum() * (0.1 + v.abs())).collect();
    Tensor::new(shape, data).unwrap()
}

/// One case per (primitive, random shape): name, inputs and the op.
pub fn primitive_cases() -> Vec<(String, Vec<Tensor<f64>>, Op)> {
    let mut cases: Vec<(String, Vec<Tensor<f64>>, Op)> = Vec::new();
    for k in 0..SHAPES_PER_PRIMITIVE {
        let mut r = rng::indexed(11, "grad-shapes", k as u64);
        let seed = 100 * k as u64;
        let rt = |shape: &[usize], i: u64| random_tensor(shape, seed + i, 1.0);
        let mut push = |name: &str, inputs: Vec<Tensor<f64>>, op: Op| {
            let shapes: Vec<String> = inputs.iter().map(|t| format!("{:?}", t.shape())).collect();
            cases.push((format!("{name} {}", shapes.join(" ")), inputs, op));
        };

        let rank = r.random_range(1..=4);
        let s = dims(&mut r, rank, 4);
        push("add", vec![rt(&s, 1), rt(&s, 2)], Box::new(|t, v| t.add(v[0], v[1])));
        push("mul", vec![rt(&s, 3), rt(&s, 4)], Box::new(|t, v| t.mul(v[0], v[1])));
        let c = r.random_range(-2.0..2.0);
        push("scale", vec![rt(&s, 5)], Box::new(move |t, v| Ok(t.scale(v[0], c))));
        let axis = r.random_range(0..rank);
        push(
            "add_bias",
            vec![rt(&s, 6), rt(&[s[axis]], 7)],
            Box::new(move |t, v| t.add_bias(v[0], v[1], axis)),
        );
        push("relu", vec![away_from_zero(rt(&s, 8))], Box::new(|t, v| Ok(t.relu(v[0]))));
        push("gelu", vec![random_tensor(&s, seed + 9, 3.0)], Box::new(|t, v| Ok(t.gelu(v[0]))));
        push("sum", vec![rt(&s, 10)], Box::new(|t, v| Ok(t.sum(v[0]))));
        push(
            "softmax",
            vec![random_tensor(&s, seed + 11, 3.0)],
            Box::new(move |t, v| t.softmax(v[0], axis)),
        );
        push(
            "layer_norm",
            vec![rt(&s, 12), rt(&[s[axis]], 13), rt(&[s[axis]], 14)],
            Box::new(move |t, v| t.layer_norm(v[0], v[1], v[2], axis, 1e-5)),
        );
        let mut axes: Vec<usize> = (0..rank).filter(|_| r.random_bool(0.5)).collect();
        if axes.is_empty() {
            axes.push(axis);
        }
        push("mean", vec![rt(&s, 15)], Box::new(move |t, v| t.mean(v[0], &axes)));

        let s3 = dims(&mut r, 3, 4);
        let flat = vec![s3[0] * s3[1], s3[2]];
        push("reshape", vec![rt(&s3, 16)], Box::new(move |t, v| t.reshape(v[0], &flat)));
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut r);
        let s4 = dims(&mut r, 4, 3);
        push("permute", vec![rt(&s4, 17)], Box::new(move |t, v| t.permute(v[0], &perm)));
        push("transpose", vec![rt(&s3, 18)], Box::new(|t, v| t.transpose(v[0])));

        let cat_axis = r.random_range(0..3);
        let mut other = s3.clone();
        other[cat_axis] = r.random_range(1..=3);
        push(
            "concat",
            vec![rt(&s3, 19), rt(&other, 20)],
            Box::new(move |t, v| t.concat(&[v[0], v[1]], cat_axis)),
        );
        let mut big = s3.clone();
        big[cat_axis] += 2;
        let start = r.random_range(0..=2);
        let len = s3[cat_axis];
        push("slice", vec![rt(&big, 21)], Box::new(move |t, v| t.slice(v[0], cat_axis, start, len)));
        let parts = r.random_range(2..=3);
        let mut whole = s3.clone();
        whole[cat_axis] *= parts;
        push(
            "split",
            vec![rt(&whole, 22)],
            Box::new(move |t, v| {
                // weight each part differently and reorder, so every part's gradient matters
                let pieces = t.split(v[0], cat_axis, parts)?;
                let scaled: Vec<Var> = pieces
                    .iter()
                    .enumerate()
                    .rev()
                    .map(|(i, &p)| t.scale(p, (i + 1) as f64))
                    .collect();
                t.concat(&scaled, cat_axis)
            }),
        );

        let (b, m, kk, p) = (r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=4));
        push("matmul", vec![rt(&[m, kk], 23), rt(&[kk, p], 24)], Box::new(|t, v| t.matmul(v[0], v[1])));
        push(
            "matmul batched",
            vec![rt(&[b, m, kk], 25), rt(&[b, kk, p], 26)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        );
        push(
            "matmul broadcast",
            vec![rt(&[b, 2, m, kk], 27), rt(&[1, 1, kk, p], 28)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        );

        let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
        let kh = r.random_range(1..=3);
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        push(
            "conv2d",
            vec![rt(&[n, cin, h, w], 29), rt(&[cout, cin, kh, kh], 30), rt(&[cout], 31)],
            Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
        );
        push(
            "conv2d no bias",
            vec![rt(&[n, cin, h, w], 32), rt(&[cout, cin, kh, kh], 33)],
            Box::new(move |t, v| t.conv2d(v[0], v[1], None, stride, pad)),
        );
        let classes = r.random_range(2..=5);
        let label = r.random_range(0..classes);
        push(
            "cross_entropy",
            vec![random_tensor(&[classes], seed + 34, 3.0)],
            Box::new(move |t, v| t.cross_entropy(v[0], label)),
        );
    }
    cases
}

/// Direct evaluation of multi-scale attention: for every head, every query patch `m` and key
/// patch `n` of the stacked frames, `α[m][n] = softmax_n(<q_m, k_n> / √D)` and
/// `out_m = Σ_n α[m][n] v_n`, with patches read straight out of the `T×C×H×W` maps.
pub fn brute_force_msmhsa(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, scales: &[usize]) -> Tensor<f64> {
    let s = q.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ch = c / scales.len();
    let mut out = vec![0.0; q.numel()];
    let at = |x: &Tensor<f64>, f: usize, cc: usize, y: usize, xx: usize| x.data()[((f * c + cc) * h + y) * w + xx];
    for (head, &l) in scales.iter().enumerate() {
        let (cell_h, cell_w) = (h / l, w / l);
        let d = (ch * cell_h * cell_w) as f64;
        let n_tok = t * l * l;
        // patch m -> (frame, row cell, col cell)
        let loc = |m: usize| (m / (l * l), (m % (l * l)) / l, m % l);
        for m in 0..n_tok {
            let (fm, im, jm) = loc(m);
            let mut scores = vec![0.0; n_tok];
            for (n, score) in scores.iter_mut().enumerate() {
                let (fn_, in_, jn) = loc(n);
                let mut acc = 0.0;
                for cc in head * ch..(head + 1) * ch {
                    for y in 0..cell_h {
                        for x in 0..cell_w {
                            acc += at(q, fm, cc, im * cell_h + y, jm * cell_w + x)
                                * at(k, fn_, cc, in_ * cell_h + y, jn * cell_w + x);
                        }
                    }
                }
                *score = acc / d.sqrt();
            }
            let max = scores.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for cc in head * ch..(head + 1) * ch {
                for y in 0..cell_h {
                    for x in 0..cell_w {
                        let mut acc = 0.0;
                        for (n, e) in exps.iter().enumerate() {
                            let (fn_, in_, jn) = loc(n);
                            acc += e / total * at(v, fn_, cc, in_ * cell_h + y, jn * cell_w + x);
                        }
                        out[((fm * c + cc) * h + im * cell_h + y) * w + jm * cell_w + x] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

/// Small whole-model configuration for the end-to-end gradient check.
pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        frames: 2,
        height: 16,
        width: 16,
        cte_stride: 8,
        channels: 6,
        scales: vec![1, 2],
        depth: 1,
        ffn_ratio: 4,
        seed: 3,
    }
}

pub fn end_to_end_check() -> GradCheckReport {
    let cfg = end_to_end_config();
    let mut params = ModelParams::<f64>::init(&cfg).unwrap();
    randomize_params(&mut params, 9, 0.4);
    let mut inputs: Vec<_> = params.tensors().into_iter().cloned().collect();
    inputs.push(random_tensor(&[2, 3, 16, 16], 10, 1.0));
    let n = inputs.len() - 1;
    check_gradients(&inputs, |tape, v| {
        let bound = BoundParams::from_vars(v[..n].to_vec());
        let out = forward(tape, v[n], &bound, &cfg, false)?;
        cross_entropy(tape, out.logits, Label::BonaFide)
    })
    .unwrap()
}

pub struct OracleCase {
    pub frames: usize,
    pub scales: Vec<usize>,
    pub max_abs_diff: f64,
}

/// Every T in {1, 2, 4} against every non-empty subset of {1, 2, 4}: 21 instances.
pub fn oracle_cases() -> Vec<OracleCase> {
    let subsets: [&[usize]; 7] = [&[1], &[2], &[4], &[1, 2], &[1, 4], &[2, 4], &[1, 2, 4]];
    let mut out = Vec::new();
    let mut i = 0;
    for t in [1, 2, 4] {
        for scales in subsets {
            let mut r = rng::indexed(21, "oracle", i);
            i += 1;
            let c = scales.len() * r.random_range(1..=3);
            let h = 4 * r.random_range(1..=2);
            let w = 4 * r.random_range(1..=2);
            let shape = [t, c, h, w];
            let (q, k, v) = (
                random_tensor(&shape, 1000 + i, 2.0),
                random_tensor(&shape, 2000 + i, 2.0),
                random_tensor(&shape, 3000 + i, 2.0),
            );
            let mut tape = Tape::<f64>::new();
            let qkv = QkvMaps {
                q: tape.constant(q.clone()),
                k: tape.constant(k.clone()),
                v: tape.constant(v.clone()),
            };
            let cfg = ScaleConfig::new(scales.to_vec()).unwrap();
            let got = msmhsa_forward(&mut tape, &qkv, &cfg, false).unwrap();
            let expect = brute_force_msmhsa(&q, &k, &v, scales);
            out.push(OracleCase {
                frames: t,
                scales: scales.to_vec(),
                max_abs_diff: tape.value(got.out).max_abs_diff(&expect),
            });
        }
    }
    out
}
