use crate::data::corpus::FEATURE_STRIDE;
use crate::error::Result;
use crate::graph::Graph;
use crate::model::net::{head, pixel_rows, project_rows};
use crate::model::proto::score_projected;
use crate::model::{ParamSet, PrototypeClassifier};
use crate::tensor::Array;

/// Arg-max class id per feature pixel, from extractor output `[C, h, w]`.
/// Ties go to the earlier prototype.
pub fn predict_labels(
    params: &ParamSet,
    classifier: &PrototypeClassifier,
    backbone_out: &Array<f32>,
) -> Result<Vec<u8>> {
    let mut g = Graph::<f32>::new();
    let p = params.bind(&mut g);
    let x = g.input(backbone_out.clone());
    let emb = head(&mut g, &p, x)?;
    let rows = pixel_rows(&mut g, emb)?;
    let protos = g.input(classifier.matrix());
    let projected = project_rows(&mut g, &p, protos)?;
    let s = score_projected(&mut g, rows, projected, params.config().tau)?;
    let n = classifier.len();
    let ids = classifier.class_ids();
    Ok(g.value(s)
        .data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            ids[best] as u8
        })
        .collect())
}

/// Nearest-neighbour upsampling of a feature-resolution label grid to the
/// image grid.
pub fn upsample_labels(labels: &[u8], fh: usize, fw: usize) -> Vec<u8> {
    let (h, w) = (fh * FEATURE_STRIDE, fw * FEATURE_STRIDE);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let row = &labels[(y / FEATURE_STRIDE) * fw..][..fw];
        for x in 0..w {
            out.push(row[x / FEATURE_STRIDE]);
        }
    }
    out
}
