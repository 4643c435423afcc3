//! Mosaic composition of training scenes.

use rand::seq::index::sample;
use rand::Rng;

use super::TrainError;
use crate::boxgeom::MosaicLayout;
use crate::dataset::{Dataset, Sample, ScoredBox};
use crate::encoder::{SceneObject, SceneSpec};

/// A composed training example: supervision comes from the target cell only.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicSample {
    pub scene: SceneSpec,
    pub text: String,
    /// Ground truth in global mosaic coordinates.
    pub gt: Vec<ScoredBox>,
    pub layout: MosaicLayout,
    pub target_sample: usize,
    pub text_index: usize,
}

/// Ground truth for one text: dense proposals, or annotator boxes at score 5.
pub fn ground_truth(sample: &Sample, text_index: usize) -> Vec<ScoredBox> {
    let t = &sample.texts[text_index];
    match (&t.proposals, &t.annotator_boxes) {
        (Some(p), _) => p.clone(),
        (None, Some(boxes)) => boxes.iter().map(|b| ScoredBox { bbox: *b, score: 5.0 }).collect(),
        (None, None) => Vec::new(),
    }
}

/// Composes cell scenes into one scene, mapping each object box into its cell.
pub fn compose(layout: &MosaicLayout, scenes: &[&SceneSpec]) -> Result<SceneSpec, TrainError> {
    let cells: Vec<(usize, usize)> = layout.cells().collect();
    if cells.len() != scenes.len() {
        return Err(TrainError::Mosaic(format!(
            "{} scenes for a {}x{} mosaic",
            scenes.len(),
            layout.grid(),
            layout.grid()
        )));
    }
    let g = layout.grid() as u32;
    let (tr, tc) = layout.target();
    let target = scenes[tr * layout.grid() + tc];
    let mut objects = Vec::new();
    for (cell, scene) in cells.iter().zip(scenes) {
        for o in &scene.objects {
            objects.push(SceneObject {
                bbox: layout.to_global(*cell, &o.bbox)?,
                ..o.clone()
            });
        }
    }
    Ok(SceneSpec {
        canvas: [target.canvas[0] * g, target.canvas[1] * g],
        background: target.background,
        objects,
    })
}

/// Draws a 1x1, 2x2 or 3x3 mosaic with equal probability, fills it with
/// distinct samples, and supervises with a uniformly chosen target cell.
/// Each drawn sample is mirrored horizontally with probability `flip_prob`.
pub fn sample_mosaic<R: Rng>(dataset: &Dataset, rng: &mut R, flip_prob: f64) -> Result<MosaicSample, TrainError> {
    let grid = rng.random_range(1..=3usize);
    let cells = grid * grid;
    if dataset.len() < cells {
        return Err(TrainError::Mosaic(format!(
            "a {grid}x{grid} mosaic needs {cells} samples, dataset has {}",
            dataset.len()
        )));
    }
    let picks = sample(rng, dataset.len(), cells).into_vec();
    let target_cell = rng.random_range(0..cells);
    let layout = MosaicLayout::new(grid, (target_cell / grid, target_cell % grid))?;
    let flips: Vec<bool> = (0..cells).map(|_| flip_prob > 0.0 && rng.random_bool(flip_prob)).collect();
    let target = &dataset.samples[picks[target_cell]];
    let text_index = rng.random_range(0..target.texts.len());

    let scenes: Vec<SceneSpec> = picks
        .iter()
        .zip(&flips)
        .map(|(&i, &f)| {
            let s = &dataset.samples[i].scene;
            if f {
                s.flip_horizontal()
            } else {
                s.clone()
            }
        })
        .collect();
    let refs: Vec<&SceneSpec> = scenes.iter().collect();
    let scene = compose(&layout, &refs)?;
    let gt = ground_truth(target, text_index)
        .into_iter()
        .map(|sb| {
            let b = if flips[target_cell] { sb.bbox.flip_horizontal() } else { sb.bbox };
            Ok(ScoredBox {
                bbox: layout.to_global(layout.target(), &b)?,
                score: sb.score,
            })
        })
        .collect::<Result<_, TrainError>>()?;
    Ok(MosaicSample {
        scene,
        text: target.texts[text_index].text.clone(),
        gt,
        layout,
        target_sample: picks[target_cell],
        text_index,
    })
}
