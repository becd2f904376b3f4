//! Brute-force reference implementations in f64, written from the
//! definitions with plain loops and no shared code with the library.

use ifss_core::model::{Group, ModelConfig, OldOperand, ParamSet, PrototypeClassifier};
use ifss_core::tensor::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const COS_EPS: f64 = 1e-8;
pub const RATIO_EPS: f64 = 1e-6;
pub const IGNORE: u8 = 255;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f0a_4c1e)
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / ((na + COS_EPS) * (nb + COS_EPS))
}

/// Same-padded stride-1 convolution. `x` is `[ci][h][w]` flattened, `k` is
/// `[co][ci][kh][kw]`, returns `[co][h][w]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(x: &[f64], ci: usize, h: usize, w: usize, k: &[f64], co: usize, ks: usize, bias: &[f64]) -> Vec<f64> {
    let pad = (ks / 2) as isize;
    let mut out = vec![0.0; co * h * w];
    for o in 0..co {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[o];
                for c in 0..ci {
                    for u in 0..ks {
                        for v in 0..ks {
                            let (y, z) = (i as isize + u as isize - pad, j as isize + v as isize - pad);
                            if y < 0 || z < 0 || y >= h as isize || z >= w as isize {
                                continue;
                            }
                            acc += k[((o * ci + c) * ks + u) * ks + v] * x[(c * h + y as usize) * w + z as usize];
                        }
                    }
                }
                out[(o * h + i) * w + j] = acc;
            }
        }
    }
    out
}

/// `W x + b` for a `[d, d]` row-major `W`.
pub fn affine(wt: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let d = b.len();
    (0..d).map(|i| b[i] + (0..x.len()).map(|j| wt[i * x.len() + j] * x[j]).sum::<f64>()).collect()
}

/// Class probabilities per pixel: softmax over `cos(pixel, projected)/tau`.
/// `pixels` are `d`-vectors, `projected` the prototypes after projection.
pub fn scores(pixels: &[Vec<f64>], projected: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    pixels
        .iter()
        .map(|p| {
            let logits: Vec<f64> = projected.iter().map(|q| cos(p, q) / tau).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Masked average per shot, then averaged over shots with a non-empty mask.
/// `features[s]` is `[h*w][d]`, `masks[s]` is `[h*w]` binary.
pub fn map_prototype(features: &[Vec<Vec<f64>>], masks: &[Vec<f64>]) -> Option<Vec<f64>> {
    let d = features[0][0].len();
    let mut sum = vec![0.0; d];
    let mut shots = 0;
    for (f, m) in features.iter().zip(masks) {
        let count: f64 = m.iter().sum();
        if count == 0.0 {
            continue;
        }
        shots += 1;
        for k in 0..d {
            sum[k] += f.iter().zip(m).map(|(px, mv)| px[k] * mv).sum::<f64>() / count;
        }
    }
    (shots > 0).then(|| sum.iter().map(|v| v / shots as f64).collect())
}

/// Mean IoU from set counts: for each class, |pred ∩ truth| / |pred ∪ truth|
/// over pixels whose truth is not ignored; classes absent from both are
/// skipped.
pub fn miou(pairs: &[(Vec<u8>, Vec<u8>)], classes: &[u32]) -> f64 {
    let mut ious = Vec::new();
    for &c in classes {
        let (mut inter, mut union) = (0u64, 0u64);
        for (pred, truth) in pairs {
            for (&p, &t) in pred.iter().zip(truth) {
                if t == IGNORE {
                    continue;
                }
                let (a, b) = (p as u32 == c, t as u32 == c);
                inter += (a && b) as u64;
                union += (a || b) as u64;
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    if ious.is_empty() {
        0.0
    } else {
        ious.iter().sum::<f64>() / ious.len() as f64
    }
}

fn sim(a: &[f64], b: &[f64]) -> f64 {
    (1.0 + cos(a, b)) / 2.0
}

pub fn redistribution(anchors: &[Vec<f64>], old: &[Vec<f64>], new: &[Vec<f64>], operand: OldOperand) -> f64 {
    let lhs = match operand {
        OldOperand::Anchor => anchors,
        OldOperand::Projected => old,
    };
    let mut num = 0.0;
    for o in lhs {
        for n in new {
            num += sim(o, n);
        }
    }
    let den: f64 = anchors.iter().zip(old).map(|(a, o)| sim(a, o)).sum();
    num / (den + RATIO_EPS)
}

pub fn inter(anchors: &[Vec<f64>], new: &[Vec<f64>]) -> f64 {
    anchors.iter().map(|a| new.iter().map(|n| sim(a, n)).sum::<f64>()).sum()
}

pub fn rows(a: &Array<f64>) -> Vec<Vec<f64>> {
    let d = a.shape()[1];
    a.data().chunks(d).map(|c| c.to_vec()).collect()
}

pub fn to_array(rows: &[Vec<f64>]) -> Array<f64> {
    let d = rows[0].len();
    Array::new([rows.len(), d], rows.concat()).unwrap()
}

/// A small model whose head and projector hold ten numbers: one backbone
/// channel, two embedding dimensions.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        conv_channels: vec![1, 1],
        embed_dim: 2,
        tau: 0.5,
    }
}

/// Head and projector of a toy model as one flat vector, in the order
/// head weight, head bias, projector weight, projector bias.
pub fn adapted_flat(p: &ParamSet) -> Vec<f64> {
    p.indices(&[Group::Head, Group::Projector])
        .into_iter()
        .flat_map(|i| p.value(i).data().iter().map(|&v| v as f64).collect::<Vec<_>>())
        .collect()
}

/// Unpacks [`adapted_flat`] for a model with `c` backbone channels and
/// embedding size `d`.
pub struct Toy<'a> {
    pub theta: &'a [f64],
    pub c: usize,
    pub d: usize,
}

impl Toy<'_> {
    fn head_w(&self) -> &[f64] {
        &self.theta[..self.d * self.c]
    }
    fn head_b(&self) -> &[f64] {
        &self.theta[self.d * self.c..self.d * self.c + self.d]
    }
    fn proj_w(&self) -> &[f64] {
        let s = self.d * self.c + self.d;
        &self.theta[s..s + self.d * self.d]
    }
    fn proj_b(&self) -> &[f64] {
        let s = self.d * self.c + self.d + self.d * self.d;
        &self.theta[s..s + self.d]
    }

    /// Mean over scenes of the mean pixel cross-entropy. Each scene is a
    /// cached `[c][h*w]` backbone output with one label per pixel.
    pub fn ce(&self, scenes: &[(Vec<f64>, Vec<u8>)], classifier: &PrototypeClassifier, tau: f64) -> f64 {
        let ids = classifier.class_ids();
        let projected: Vec<Vec<f64>> = classifier
            .prototypes()
            .iter()
            .map(|p| {
                let v: Vec<f64> = p.vector.iter().map(|&x| x as f64).collect();
                affine(self.proj_w(), self.proj_b(), &v)
            })
            .collect();
        let mut total = 0.0;
        for (feat, labels) in scenes {
            let hw = labels.len();
            let pixels: Vec<Vec<f64>> = (0..hw)
                .map(|q| {
                    let x: Vec<f64> = (0..self.c).map(|ch| feat[ch * hw + q]).collect();
                    affine(self.head_w(), self.head_b(), &x)
                })
                .collect();
            let s = scores(&pixels, &projected, tau);
            let (mut sum, mut n) = (0.0, 0);
            for (q, &l) in labels.iter().enumerate() {
                if l == IGNORE {
                    continue;
                }
                let col = ids.iter().position(|&c| c == l as u32).unwrap();
                sum -= s[q][col].ln();
                n += 1;
            }
            total += sum / n as f64;
        }
        total / scenes.len() as f64
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest absolute difference between two equally long sequences.
pub fn max_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn f32_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    random_vec(r, n).into_iter().map(|v| v as f32).collect()
}

/// Random model with a random projector (so projection is not the identity)
/// and a random classifier of up to six prototypes.
pub fn random_scorer(seed: u64) -> (ParamSet, PrototypeClassifier) {
    let mut r = rng(seed);
    let d = r.gen_range(2..6);
    let cfg = ModelConfig {
        conv_channels: vec![2, 2],
        embed_dim: d,
        tau: [0.1, 0.5, 1.0][r.gen_range(0..3)],
    };
    let mut params = ParamSet::init(&cfg, seed).unwrap();
    for name in ["projector.weight", "projector.bias"] {
        let i = params.names().iter().position(|n| n == name).unwrap();
        let shape = params.value(i).shape().to_vec();
        let n = shape.iter().product();
        params.set(i, Array::new(shape, f32_vec(&mut r, n)).unwrap()).unwrap();
    }
    let base = (1..r.gen_range(2..6)).map(|c| (c as u32, f32_vec(&mut r, d))).collect();
    let classifier = PrototypeClassifier::new(f32_vec(&mut r, d), base).unwrap();
    (params, classifier)
}

pub fn conv2d_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (ci, co, h, w) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..7), r.gen_range(1..7));
    let ks = [1, 3, 5][r.gen_range(0..3)];
    let x = random_vec(&mut r, ci * h * w);
    let k = random_vec(&mut r, co * ci * ks * ks);
    let b = random_vec(&mut r, co);
    let mut g = ifss_core::Graph::<f64>::new();
    let xv = g.input(Array::new([ci, h, w], x.clone()).unwrap());
    let kv = g.input(Array::new([co, ci, ks, ks], k.clone()).unwrap());
    let bv = g.input(Array::new([co], b.clone()).unwrap());
    let y = g.conv2d(xv, kv, bv).unwrap();
    max_diff(g.value(y).data().iter().copied(), conv2d(&x, ci, h, w, &k, co, ks, &b))
}

pub fn score_pixels_error(seed: u64) -> f64 {
    let (params, classifier) = random_scorer(seed);
    let mut r = rng(seed + 1);
    let d = params.config().embed_dim;
    let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
    let feats = Array::new([h, w, d], random_vec(&mut r, h * w * d)).unwrap();
    let tau = params.config().tau;
    let got = ifss_core::model::score_pixels(&params, &feats, &classifier, tau).unwrap();
    let pw: Vec<f64> = params.get("projector.weight").unwrap().data().iter().map(|&v| v as f64).collect();
    let pb: Vec<f64> = params.get("projector.bias").unwrap().data().iter().map(|&v| v as f64).collect();
    let projected: Vec<Vec<f64>> = classifier
        .prototypes()
        .iter()
        .map(|p| affine(&pw, &pb, &p.vector.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect();
    let expected = scores(&feats.data().chunks(d).map(|c| c.to_vec()).collect::<Vec<_>>(), &projected, tau);
    assert_eq!(got.shape(), [h, w, classifier.len()]);
    max_diff(got.data().iter().copied(), expected.into_iter().flatten())
}

pub fn map_prototype_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (h, w, d, shots) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..5), r.gen_range(1..5));
    let mut feats = Vec::new();
    let mut masks = Vec::new();
    for s in 0..shots {
        feats.push(Array::new([h, w, d], random_vec(&mut r, h * w * d)).unwrap());
        // The first shot always has a pixel; later ones may be empty.
        let mut m: Vec<f64> = (0..h * w).map(|_| f64::from(r.gen_bool(0.4) as u8)).collect();
        if s == 0 {
            m[r.gen_range(0..h * w)] = 1.0;
        }
        masks.push(Array::new([h, w], m).unwrap());
    }
    let got = ifss_core::model::map_prototype(&feats, &masks).unwrap();
    let expected = map_prototype(
        &feats.iter().map(|f| f.data().chunks(d).map(|c| c.to_vec()).collect()).collect::<Vec<_>>(),
        &masks.iter().map(|m| m.data().to_vec()).collect::<Vec<_>>(),
    )
    .unwrap();
    max_diff(got.data().iter().copied(), expected)
}

pub fn miou_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut acc = ifss_core::eval::ConfusionAccumulator::new();
    let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..r.gen_range(1..4))
        .map(|_| {
            let n = r.gen_range(1..80);
            let pred: Vec<u8> = (0..n).map(|_| r.gen_range(0..6)).collect();
            let truth: Vec<u8> = (0..n).map(|_| if r.gen_bool(0.1) { IGNORE } else { r.gen_range(0..6) }).collect();
            (pred, truth)
        })
        .collect();
    for (p, t) in &pairs {
        acc.add(p, t);
    }
    let classes: Vec<u32> = (0..8).filter(|_| r.gen_bool(0.6)).collect();
    let classes = if classes.is_empty() { vec![7] } else { classes };
    let got = ifss_core::eval::compute_miou(&acc, &classes).unwrap();
    (got - miou(&pairs, &classes)).abs()
}

/// Worst error over both operands of the redistribution loss and the
/// separation-only loss.
pub fn redistribution_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (nb, nt, d) = (r.gen_range(1..5), r.gen_range(1..4), r.gen_range(1..6));
    let set = |r: &mut ChaCha8Rng, n: usize| (0..n).map(|_| random_vec(r, d)).collect::<Vec<_>>();
    let anchors = set(&mut r, nb);
    // Old prototypes sit near their anchors, as they do right after expansion.
    let old: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| a.iter().map(|v| v + 0.3 * r.gen_range(-1.0..1.0)).collect())
        .collect();
    let new = set(&mut r, nt);
    let (a, o, n) = (to_array(&anchors), to_array(&old), to_array(&new));
    let mut worst: f64 = 0.0;
    for op in [OldOperand::Anchor, OldOperand::Projected] {
        let got = ifss_core::model::loss::redistribution_value(&a, &o, &n, op).unwrap();
        worst = worst.max((got - redistribution(&anchors, &old, &new, op)).abs());
    }
    let got = ifss_core::model::loss::inter_value(&a, &n).unwrap();
    worst.max((got - inter(&anchors, &new)).abs())
}

/// One named oracle comparison.
pub struct OracleCheck {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

pub const CHECKS: [OracleCheck; 5] = [
    OracleCheck { name: "conv2d", run: conv2d_error },
    OracleCheck { name: "score_pixels", run: score_pixels_error },
    OracleCheck { name: "map_prototype", run: map_prototype_error },
    OracleCheck { name: "compute_miou", run: miou_error },
    OracleCheck { name: "redistribution_loss", run: redistribution_error },
];

/// Agreement required between library and oracle.
pub const ORACLE_TOL: f64 = 1e-6;
