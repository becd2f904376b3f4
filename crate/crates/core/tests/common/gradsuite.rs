//! Finite-difference cases for every differentiable op and every loss.

use ifss_core::gradcheck::{grad_check_sampled, GradReport, ScalarBuilder};
use ifss_core::graph::{Graph, Var};
use ifss_core::model::{
    ce_loss, expand_classifier, inter_loss, redistribution_loss, Bound, ModelConfig, OldOperand, ParamSet,
    PrototypeClassifier,
};
use ifss_core::objective::{build, Input, Regularizer, Sample};
use ifss_core::tensor::{Array, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative tolerance for single ops and losses.
pub const OP_TOL: f64 = 1e-4;
/// Relative tolerance for losses differentiated through the extractor.
pub const EXTRACTOR_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Conv2d,
    Relu,
    Linear,
    MeanPool,
    MaskedAvgPool,
    Softmax,
    CosinePairwise,
    CosineRowwise,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddConst,
    Log,
    Sum,
    Mean,
    Pick,
    Concat,
    Reshape,
    Transpose,
    CrossEntropy,
    Redistribution,
    RedistributionProjected,
    Inter,
    MetaObjective,
    Extractor,
}

impl Case {
    pub const ALL: [Case; 27] = [
        Case::Conv2d,
        Case::Relu,
        Case::Linear,
        Case::MeanPool,
        Case::MaskedAvgPool,
        Case::Softmax,
        Case::CosinePairwise,
        Case::CosineRowwise,
        Case::Add,
        Case::Sub,
        Case::Mul,
        Case::Div,
        Case::Scale,
        Case::AddConst,
        Case::Log,
        Case::Sum,
        Case::Mean,
        Case::Pick,
        Case::Concat,
        Case::Reshape,
        Case::Transpose,
        Case::CrossEntropy,
        Case::Redistribution,
        Case::RedistributionProjected,
        Case::Inter,
        Case::MetaObjective,
        Case::Extractor,
    ];

    pub fn tolerance(self) -> f64 {
        if self == Case::Extractor {
            EXTRACTOR_TOL
        } else {
            OP_TOL
        }
    }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

/// Uniform values in `[lo, hi)`, kept at least `gap` away from zero.
fn uniform(seed: u64, salt: u64, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Array<f64> {
    let mut r = rng(seed, salt);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = r.gen_range(lo..hi);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

fn constant<T: Real>(g: &mut Graph<T>, a: Array<f64>) -> Var {
    g.input(a.cast())
}

/// Contracts `x` with fixed random weights so every output element reaches
/// the scalar with a distinct coefficient.
fn contract<T: Real>(g: &mut Graph<T>, seed: u64, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let w = constant(g, uniform(seed, 999, &shape, -1.0, 1.0, 0.0));
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

const TINY_IMAGE: usize = 8;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        conv_channels: vec![3, 4, 4, 4],
        embed_dim: 4,
        tau: 0.5,
    }
}

fn tiny_labels(seed: u64, n: usize, classes: &[u32]) -> Vec<u8> {
    let mut r = rng(seed, 77);
    (0..n).map(|_| classes[r.gen_range(0..classes.len())] as u8).collect()
}

/// Two old classes plus background, one new class; anchors set.
fn tiny_classifier(seed: u64, params: &ParamSet) -> PrototypeClassifier {
    let d = params.config().embed_dim;
    let v = |salt: u64| {
        uniform(seed, salt, &[d], -1.0, 1.0, 0.0)
            .data()
            .iter()
            .map(|&x| x as f32)
            .collect::<Vec<f32>>()
    };
    let c = PrototypeClassifier::new(v(1), vec![(1, v(2)), (2, v(3))]).unwrap();
    expand_classifier(&c, params, vec![(3, v(4))]).unwrap()
}

pub struct Builder(pub Case);

impl ScalarBuilder for Builder {
    fn name(&self) -> String {
        format!("{:?}", self.0)
    }

    fn init(&self, seed: u64) -> Vec<Array<f64>> {
        let u = |salt, shape: &[usize]| uniform(seed, salt, shape, -1.0, 1.0, 0.0);
        match self.0 {
            Case::Conv2d => vec![u(1, &[2, 5, 4]), u(2, &[3, 2, 3, 3]), u(3, &[3])],
            Case::Relu => vec![uniform(seed, 1, &[4, 5], -1.0, 1.0, 0.05)],
            Case::Linear => vec![u(1, &[4, 3]), u(2, &[5, 3]), u(3, &[5])],
            Case::MeanPool => vec![u(1, &[2, 4, 6])],
            Case::MaskedAvgPool => vec![u(1, &[3, 4, 4])],
            Case::Softmax => vec![u(1, &[3, 4])],
            Case::CosinePairwise => vec![u(1, &[4, 3]), u(2, &[5, 3])],
            Case::CosineRowwise => vec![u(1, &[4, 3]), u(2, &[4, 3])],
            Case::Add | Case::Sub | Case::Mul => vec![u(1, &[3, 4]), u(2, &[3, 4])],
            Case::Div => vec![u(1, &[3, 4]), uniform(seed, 2, &[3, 4], -2.0, 2.0, 0.5)],
            Case::Scale | Case::AddConst | Case::Sum | Case::Mean | Case::Reshape => vec![u(1, &[3, 4])],
            Case::Log => vec![uniform(seed, 1, &[3, 4], 0.2, 2.0, 0.0)],
            Case::Pick => vec![u(1, &[12])],
            Case::Concat => vec![u(1, &[2, 3]), u(2, &[3, 3])],
            Case::Transpose => vec![u(1, &[3, 5])],
            Case::CrossEntropy => vec![u(1, &[6, 4]), u(2, &[3, 4])],
            Case::Redistribution | Case::RedistributionProjected => vec![u(1, &[2, 4]), u(2, &[3, 4])],
            Case::Inter => vec![u(1, &[3, 4])],
            // Bias-dominated pre-activations stay clear of ReLU kinks and keep
            // pixel embeddings away from the origin, where cosine curvature
            // would swamp a 1e-3 difference step. Units with negative bias
            // still exercise the zero branch.
            Case::MetaObjective | Case::Extractor => {
                let params = ParamSet::init(&tiny_config(), seed).unwrap();
                params
                    .names()
                    .iter()
                    .zip(params.values())
                    .enumerate()
                    .map(|(i, (name, a))| {
                        if name.ends_with("bias") {
                            uniform(seed, 40 + i as u64, a.shape(), -1.0, 1.0, 0.5)
                        } else if name.starts_with("extractor") {
                            let mut w: Array<f64> = a.cast();
                            w.data_mut().iter_mut().for_each(|x| *x *= 0.3);
                            w
                        } else {
                            a.cast()
                        }
                    })
                    .collect()
            }
        }
    }

    fn build<T: Real>(&self, seed: u64, g: &mut Graph<T>, p: &[Var]) -> ifss_core::Result<Var> {
        let out = match self.0 {
            Case::Conv2d => g.conv2d(p[0], p[1], p[2])?,
            Case::Relu => g.relu(p[0]),
            Case::Linear => g.linear(p[0], p[1], p[2])?,
            Case::MeanPool => g.mean_pool(p[0], 2, 2)?,
            Case::MaskedAvgPool => {
                let mut r = rng(seed, 5);
                let mut m: Vec<f64> = (0..16).map(|_| f64::from(r.gen_bool(0.5) as u8)).collect();
                m[0] = 1.0;
                g.masked_avg_pool(p[0], &Array::new([4, 4], m)?.cast())?
            }
            Case::Softmax => g.softmax(p[0], 1)?,
            Case::CosinePairwise => g.cosine_pairwise(p[0], p[1])?,
            Case::CosineRowwise => g.cosine_rowwise(p[0], p[1])?,
            Case::Add => g.add(p[0], p[1])?,
            Case::Sub => g.sub(p[0], p[1])?,
            Case::Mul => g.mul(p[0], p[1])?,
            Case::Div => g.div(p[0], p[1])?,
            Case::Scale => g.scale(p[0], -1.7),
            Case::AddConst => {
                let s = g.add_const(p[0], 0.3);
                g.mul(s, s)?
            }
            Case::Log => g.log(p[0]),
            Case::Sum => {
                let s = g.mul(p[0], p[0])?;
                return Ok(g.sum(s));
            }
            Case::Mean => {
                let s = g.mul(p[0], p[0])?;
                return Ok(g.mean(s));
            }
            Case::Pick => g.pick(p[0], vec![3, 0, 3, 11, 7])?,
            Case::Concat => g.concat(&[p[0], p[1]])?,
            Case::Reshape => g.reshape(p[0], [2, 6])?,
            Case::Transpose => g.transpose(p[0])?,
            Case::CrossEntropy => {
                let cos = g.cosine_pairwise(p[0], p[1])?;
                let s = g.scale(cos, 1.0 / 0.1);
                let s = g.softmax(s, 1)?;
                let mut labels = tiny_labels(seed, 6, &[0, 1, 2]);
                labels[5] = 255;
                return ce_loss(g, s, &labels, &[0, 1, 2]);
            }
            Case::Redistribution | Case::RedistributionProjected => {
                let anchors = constant(g, uniform(seed, 9, &[2, 4], -1.0, 1.0, 0.0));
                let op = if self.0 == Case::Redistribution {
                    OldOperand::Anchor
                } else {
                    OldOperand::Projected
                };
                return redistribution_loss(g, anchors, p[0], p[1], op);
            }
            Case::Inter => {
                let anchors = constant(g, uniform(seed, 9, &[2, 4], -1.0, 1.0, 0.0));
                return inter_loss(g, anchors, p[0]);
            }
            Case::MetaObjective | Case::Extractor => {
                let cfg = tiny_config();
                let params = ParamSet::init(&cfg, seed)?;
                let bound = Bound::new(cfg.conv_channels.len(), p.to_vec());
                let classifier = tiny_classifier(seed, &params);
                let fh = TINY_IMAGE / 4;
                let cached: Vec<Array<f32>> = (0..2)
                    .map(|k| uniform(seed, 30 + k, &[cfg.backbone_channels(), fh, fh], 0.0, 1.0, 0.0).cast())
                    .collect();
                let samples: Vec<Sample<'_>> = (0..2u64)
                    .map(|k| Sample {
                        input: if self.0 == Case::Extractor {
                            Input::Image(uniform(seed, 20 + k, &[3, TINY_IMAGE, TINY_IMAGE], 0.0, 1.0, 0.0).cast())
                        } else {
                            Input::Cached(&cached[k as usize])
                        },
                        labels: tiny_labels(seed + k, fh * fh, &[0, 1, 2, 3]),
                    })
                    .collect();
                let reg = Regularizer::Redistribution {
                    lambda: 0.3,
                    operand: OldOperand::Anchor,
                };
                return Ok(build(g, &bound, &classifier, &samples, reg, cfg.tau)?.total);
            }
        };
        Ok(contract(g, seed, out))
    }
}

/// Largest number of coordinates probed per case.
pub const MAX_COORDS: usize = 60;

pub fn check(case: Case, seed: u64) -> GradReport {
    grad_check_sampled(&Builder(case), seed, case.tolerance(), MAX_COORDS).unwrap()
}

/// Every case at every seed.
pub fn run_suite(seeds: std::ops::Range<u64>) -> Vec<GradReport> {
    Case::ALL
        .iter()
        .flat_map(|&c| seeds.clone().map(move |s| check(c, s)))
        .collect()
}
