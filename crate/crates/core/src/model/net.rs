use super::params::{Bound, ParamSet, POOLED_LAYERS};
use crate::data::corpus::{CHANNELS, FEATURE_STRIDE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Array, Real};

fn check<T: Real>(g: &Graph<T>, v: Var, layer: usize) -> Result<Var> {
    if g.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::NumericBlowup { layer })
    }
}

/// Conv stack on a `[3, H, W]` image; returns `[C, H/4, W/4]`.
pub fn backbone<T: Real>(g: &mut Graph<T>, p: &Bound, image: Var) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != CHANNELS || s[1] % FEATURE_STRIDE != 0 || s[2] % FEATURE_STRIDE != 0 {
        return Err(Error::invalid(
            "extract",
            format!("image must be [3, H, W] with H, W multiples of {FEATURE_STRIDE}, got {s:?}"),
        ));
    }
    let mut x = image;
    for i in 0..p.layers() {
        let (w, b) = p.conv(i);
        x = g.conv2d(x, w, b)?;
        // Checked before relu, which would clamp NaN to zero.
        x = check(g, x, i)?;
        x = g.relu(x);
        if i < POOLED_LAYERS {
            x = g.mean_pool(x, 2, 2)?;
        }
    }
    Ok(x)
}

/// 1×1 conv from backbone channels to the embedding, `[d, h, w]`.
pub fn head<T: Real>(g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
    let (w, b) = p.head();
    let y = g.conv2d(features, w, b)?;
    check(g, y, p.layers())
}

/// `[d, h, w]` → one row per pixel, `[h·w, d]`.
pub fn pixel_rows<T: Real>(g: &mut Graph<T>, embedding: Var) -> Result<Var> {
    let s = g.shape(embedding).to_vec();
    let flat = g.reshape(embedding, [s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Applies the projector to the rows of `vectors` (`[N, d]`).
pub fn project_rows<T: Real>(g: &mut Graph<T>, p: &Bound, vectors: Var) -> Result<Var> {
    let (w, b) = p.projector();
    let y = g.linear(vectors, w, b)?;
    check(g, y, p.layers() + 1)
}

/// Extractor output for one image, `[C, h, w]`. With a frozen extractor
/// this is cacheable per scene.
pub fn backbone_features(params: &ParamSet, image_chw: &Array<f32>) -> Result<Array<f32>> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g);
    let x = g.input(image_chw.clone());
    let y = backbone(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Embedding `[d, h, w]` from cached extractor output.
pub fn embed(params: &ParamSet, backbone_out: &Array<f32>) -> Result<Array<f32>> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g);
    let x = g.input(backbone_out.clone());
    let y = head(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Full feature map of a `[3, H, W]` image as `[H/4, W/4, d]`.
pub fn extract(params: &ParamSet, image_chw: &Array<f32>) -> Result<Array<f32>> {
    let e = embed(params, &backbone_features(params, image_chw)?)?;
    Ok(chw_to_hwc(&e))
}

pub fn chw_to_hwc<T: Real>(x: &Array<T>) -> Array<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    Array::from_fn([h, w, c], |i| {
        let (p, ch) = (i / c, i % c);
        d[ch * h * w + p]
    })
}

pub fn hwc_to_chw<T: Real>(x: &Array<T>) -> Array<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    Array::from_fn([c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        d[p * c + ch]
    })
}

/// Applies the projector to `[N, d]` vectors outside any training graph.
pub fn project(params: &ParamSet, vectors: &Array<f32>) -> Result<Array<f32>> {
    if !vectors.is_finite() {
        return Err(Error::invalid("project", "vectors must be finite"));
    }
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g);
    let x = g.input(vectors.clone());
    let y = project_rows(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}
