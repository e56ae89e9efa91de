//! Dataset evaluation: runs the inference pipeline on every entry of a
//! manifest and scores classification, ordering and layer masks.

use std::collections::BTreeMap;

use crate::compositor::threshold_mask;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::infer::{run_pipeline, Inference, InferenceOptions, OracleOperators};
use crate::manifest::{DatasetManifest, ManifestEntry};
use crate::metrics::{dl_distance, mean_average_precision, EvalReport, IouAccumulator};
use crate::nets::Model;

/// Where the operators come from.
#[derive(Clone, Copy)]
pub enum EvalMode<'a> {
    /// Trained operators and discriminator.
    Model(&'a Model<f32>),
    /// Operators derived from each scene's ground truth.
    Oracle,
}

/// Threshold turning soft removal masks into binary layer masks.
pub const MASK_THRESHOLD: f32 = 0.5;

/// Per-image evaluation record.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub id: String,
    pub labels: Vec<u8>,
    /// Ground-truth order, top first.
    pub gt_order: Vec<usize>,
    pub inference: Inference,
    /// Binarized removal mask per removed class.
    pub pred_masks: BTreeMap<usize, Mask>,
    pub amodal: BTreeMap<usize, Mask>,
    pub visible: BTreeMap<usize, Mask>,
    /// `None` for scenes without toppings.
    pub dl: Option<f64>,
}

impl ImageEval {
    pub fn final_image(&self) -> &Image {
        &self.inference.decomposition.final_image
    }
}

fn evaluate_entry(
    manifest: &DatasetManifest,
    e: &ManifestEntry,
    mode: EvalMode,
    opts: InferenceOptions,
) -> Result<ImageEval> {
    let image = manifest.load_image(e)?;
    let scene = manifest.load_scene(e)?;
    let (amodal, visible) = manifest.load_masks(e)?;
    let inference = match mode {
        EvalMode::Model(m) => run_pipeline(m, m, &image, opts)?,
        EvalMode::Oracle => {
            let ops = OracleOperators::new(&scene);
            run_pipeline(&ops, &ops, &image, opts)?
        }
    };
    let pred_masks = inference
        .decomposition
        .steps
        .iter()
        .map(|s| (s.class_id, threshold_mask(&s.layer.mask, MASK_THRESHOLD)))
        .collect();
    let gt_order = scene.top_to_bottom();
    let dl = if gt_order.is_empty() {
        None
    } else {
        Some(dl_distance(&gt_order, &inference.ordering.order)?)
    };
    Ok(ImageEval {
        id: e.id.clone(),
        labels: e.labels.clone(),
        gt_order,
        inference,
        pred_masks,
        amodal,
        visible,
        dl,
    })
}

/// Evaluates every entry of `manifest`, in parallel, in manifest order.
pub fn evaluate_images(manifest: &DatasetManifest, mode: EvalMode, opts: InferenceOptions) -> Result<Vec<ImageEval>> {
    layergan_autograd::par::map_slice(&manifest.entries, |e| evaluate_entry(manifest, e, mode, opts))
        .into_iter()
        .collect()
}

/// Aggregates per-image records into a report over `num_classes` classes.
pub fn summarize(num_classes: usize, images: &[ImageEval]) -> Result<EvalReport> {
    if let Some(bad) = images.iter().find(|i| i.labels.len() != num_classes) {
        return Err(Error::Invalid(format!(
            "{} has {} labels, expected {num_classes}",
            bad.id,
            bad.labels.len()
        )));
    }
    let scores: Vec<Vec<f64>> = images.iter().map(|i| i.inference.probs.clone()).collect();
    let labels: Vec<Vec<u8>> = images.iter().map(|i| i.labels.clone()).collect();
    let (per_class_ap, map) = mean_average_precision(&scores, &labels)?;
    let dls: Vec<f64> = images.iter().filter_map(|i| i.dl).collect();
    let mean_dl = (!dls.is_empty()).then(|| dls.iter().sum::<f64>() / dls.len() as f64);
    let mut acc = IouAccumulator::default();
    for i in images {
        acc.add(&i.pred_masks, &i.amodal, &i.visible)?;
    }
    let amodal = acc.amodal_summary();
    Ok(EvalReport {
        per_class_ap,
        map,
        mean_dl,
        per_class_iou: (0..num_classes).map(|c| amodal.per_class.get(&c).copied()).collect(),
        miou: amodal.mean,
        miou_occluded: acc.occluded_summary().mean,
        miou_visible: acc.visible_summary().mean,
        n_images: images.len(),
    })
}

pub fn evaluate(
    manifest: &DatasetManifest,
    num_classes: usize,
    mode: EvalMode,
    opts: InferenceOptions,
) -> Result<EvalReport> {
    summarize(num_classes, &evaluate_images(manifest, mode, opts)?)
}
