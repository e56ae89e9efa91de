//! Evaluation metrics: average precision, normalized edit distance between
//! orderings, and per-class mask IoU split by visibility.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;

/// Average precision of a ranking by `scores` against binary `labels`.
/// Equal scores keep their input order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Invalid(format!("score {i} is NaN")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(Some(sum / positives as f64))
}

/// Per-class AP over images (`scores[i][c]`, `labels[i][c]`) and their
/// mean over classes with at least one positive.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<(Vec<Option<f64>>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} score rows for {} label rows",
            scores.len(),
            labels.len()
        )));
    }
    let k = labels.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != k) || labels.iter().any(|r| r.len() != k) {
        return Err(Error::Invalid("ragged score or label rows".into()));
    }
    let per_class = (0..k)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let l: Vec<bool> = labels.iter().map(|r| r[c] != 0).collect();
            average_precision(&s, &l)
        })
        .collect::<Result<Vec<_>>>()?;
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok((per_class, map))
}

/// Damerau–Levenshtein distance (insert, delete, substitute, transpose
/// adjacent symbols; unrestricted, so a transposed pair may be edited
/// further).
pub fn edit_distance<T: Ord + Clone>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    let inf = n + m;
    // d[i + 1][j + 1] is the distance between a[..i] and b[..j].
    let mut d = vec![vec![0usize; m + 2]; n + 2];
    d[0][0] = inf;
    for i in 0..=n {
        d[i + 1][0] = inf;
        d[i + 1][1] = i;
    }
    for j in 0..=m {
        d[0][j + 1] = inf;
        d[1][j + 1] = j;
    }
    let mut last_row: BTreeMap<&T, usize> = BTreeMap::new();
    for i in 1..=n {
        let mut last_col = 0;
        for j in 1..=m {
            let i1 = last_row.get(&b[j - 1]).copied().unwrap_or(0);
            let j1 = last_col;
            let cost = usize::from(a[i - 1] != b[j - 1]);
            if cost == 0 {
                last_col = j;
            }
            d[i + 1][j + 1] = (d[i][j] + cost)
                .min(d[i + 1][j] + 1)
                .min(d[i][j + 1] + 1)
                .min(d[i1][j1] + (i - i1 - 1) + 1 + (j - j1 - 1));
        }
        last_row.insert(&a[i - 1], i);
    }
    d[n + 1][m + 1]
}

/// Edit distance normalized by the ground-truth length.
pub fn dl_distance(gt: &[usize], pred: &[usize]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::Invalid(
            "normalized edit distance needs a non-empty ground-truth sequence".into(),
        ));
    }
    Ok(edit_distance(gt, pred) as f64 / gt.len() as f64)
}

/// Intersection and union pixel counts of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }

    fn add(&mut self, o: IouCounts) {
        self.intersection += o.intersection;
        self.union += o.union;
    }
}

fn check_shape(a: &Mask, b: &Mask) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn counts_within(pred: &Mask, gt: &Mask, region: Option<&Mask>) -> Result<IouCounts> {
    check_shape(pred, gt)?;
    if let Some(r) = region {
        check_shape(pred, r)?;
    }
    let mut c = IouCounts::default();
    for i in 0..pred.data().len() {
        if region.is_some_and(|r| !r.contains(i)) {
            continue;
        }
        let (p, g) = (pred.contains(i), gt.contains(i));
        c.intersection += u64::from(p && g);
        c.union += u64::from(p || g);
    }
    Ok(c)
}

fn class_union(a: &BTreeMap<usize, Mask>, b: &BTreeMap<usize, Mask>) -> Vec<usize> {
    let mut ks: Vec<usize> = a.keys().chain(b.keys()).copied().collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

fn mask_or_empty<'a>(m: &'a BTreeMap<usize, Mask>, c: usize, like: &Mask, empty: &'a mut Option<Mask>) -> &'a Mask {
    match m.get(&c) {
        Some(x) => x,
        None => empty.get_or_insert_with(|| Mask::zeros(like.height(), like.width())),
    }
}

/// Per-class IoU of binary predicted masks against ground-truth amodal
/// masks. A class missing from one side counts as an empty mask there;
/// classes with an empty union are left out.
pub fn multilayer_iou_counts(
    pred: &BTreeMap<usize, Mask>,
    gt: &BTreeMap<usize, Mask>,
) -> Result<BTreeMap<usize, IouCounts>> {
    let mut out = BTreeMap::new();
    for c in class_union(pred, gt) {
        let like = pred.get(&c).or_else(|| gt.get(&c)).expect("class from one side");
        let (mut e1, mut e2) = (None, None);
        let p = mask_or_empty(pred, c, like, &mut e1);
        let g = mask_or_empty(gt, c, like, &mut e2);
        let counts = counts_within(p, g, None)?;
        if counts.union > 0 {
            out.insert(c, counts);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub per_class: BTreeMap<usize, f64>,
    pub mean: Option<f64>,
}

fn summarize(counts: &BTreeMap<usize, IouCounts>) -> IouSummary {
    let per_class: BTreeMap<usize, f64> = counts.iter().filter_map(|(&c, n)| n.iou().map(|v| (c, v))).collect();
    let mean = (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64);
    IouSummary { per_class, mean }
}

pub fn multilayer_miou(pred: &BTreeMap<usize, Mask>, gt: &BTreeMap<usize, Mask>) -> Result<IouSummary> {
    Ok(summarize(&multilayer_iou_counts(pred, gt)?))
}

/// IoU counts restricted to the visible part of each ground-truth class and
/// to its hidden part (amodal minus visible). Inside either region the
/// ground truth covers every pixel, so the score is the fraction of the
/// region the prediction covers.
pub fn occlusion_counts(
    pred: &BTreeMap<usize, Mask>,
    amodal: &BTreeMap<usize, Mask>,
    visible: &BTreeMap<usize, Mask>,
) -> Result<(BTreeMap<usize, IouCounts>, BTreeMap<usize, IouCounts>)> {
    let mut vis_out = BTreeMap::new();
    let mut occ_out = BTreeMap::new();
    for (&c, am) in amodal {
        let vis = visible
            .get(&c)
            .cloned()
            .unwrap_or_else(|| Mask::zeros(am.height(), am.width()));
        let hidden = am.minus(&vis);
        let mut empty = None;
        let p = mask_or_empty(pred, c, am, &mut empty);
        let v = counts_within(p, &vis, Some(&vis))?;
        let o = counts_within(p, &hidden, Some(&hidden))?;
        if v.union > 0 {
            vis_out.insert(c, v);
        }
        if o.union > 0 {
            occ_out.insert(c, o);
        }
    }
    Ok((vis_out, occ_out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionBreakdown {
    pub visible: IouSummary,
    pub occluded: IouSummary,
}

pub fn occlusion_breakdown(
    pred: &BTreeMap<usize, Mask>,
    amodal: &BTreeMap<usize, Mask>,
    visible: &BTreeMap<usize, Mask>,
) -> Result<OcclusionBreakdown> {
    let (v, o) = occlusion_counts(pred, amodal, visible)?;
    Ok(OcclusionBreakdown {
        visible: summarize(&v),
        occluded: summarize(&o),
    })
}

/// Dataset-level IoU: pixel counts are pooled over images per class before
/// dividing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    pub amodal: BTreeMap<usize, IouCounts>,
    pub visible: BTreeMap<usize, IouCounts>,
    pub occluded: BTreeMap<usize, IouCounts>,
}

impl IouAccumulator {
    pub fn add(
        &mut self,
        pred: &BTreeMap<usize, Mask>,
        amodal: &BTreeMap<usize, Mask>,
        visible: &BTreeMap<usize, Mask>,
    ) -> Result<()> {
        let merge = |into: &mut BTreeMap<usize, IouCounts>, from: BTreeMap<usize, IouCounts>| {
            for (c, n) in from {
                into.entry(c).or_default().add(n);
            }
        };
        merge(&mut self.amodal, multilayer_iou_counts(pred, amodal)?);
        let (v, o) = occlusion_counts(pred, amodal, visible)?;
        merge(&mut self.visible, v);
        merge(&mut self.occluded, o);
        Ok(())
    }

    pub fn amodal_summary(&self) -> IouSummary {
        summarize(&self.amodal)
    }

    pub fn visible_summary(&self) -> IouSummary {
        summarize(&self.visible)
    }

    pub fn occluded_summary(&self) -> IouSummary {
        summarize(&self.occluded)
    }
}

/// Evaluation summary written by `eval`. Per-class entries are `null` for
/// classes without support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub mean_dl: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub miou_occluded: Option<f64>,
    pub miou_visible: Option<f64>,
    pub n_images: usize,
}
