//! Test-time pipeline: detect the classes in an image, infer their depth
//! order from how the removal masks overlap, then peel the layers off one
//! by one from the top.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compositor::{composite, soft_intersection, threshold_mask, LayerOutput};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::nets::{Direction, Model};
use crate::scene::LayeredScene;

/// Anything that can remove one class's layer from an image.
pub trait RemovalOperator: Sync {
    fn remove(&self, class_id: usize, image: &Image) -> Result<LayerOutput>;
}

/// Anything that scores class presence.
pub trait Classifier: Sync {
    fn class_probs(&self, image: &Image) -> Result<Vec<f64>>;
}

impl RemovalOperator for Model<f32> {
    fn remove(&self, class_id: usize, image: &Image) -> Result<LayerOutput> {
        if class_id >= self.num_classes() {
            return Err(Error::Invalid(format!("no remove operator for class {class_id}")));
        }
        Ok(self.generate(class_id, Direction::Remove, &[image])?.remove(0))
    }
}

impl Classifier for Model<f32> {
    fn class_probs(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.classify_probs(&[image])?.remove(0))
    }
}

/// Operators derived from a scene's ground truth. On any render of a subset
/// `S` of the scene's layers, removing `c ∈ S` yields the mask of `c` not
/// covered by layers of `S` above it and the render of `S \ {c}`; on
/// anything else it is the identity.
#[derive(Debug, Clone)]
pub struct OracleOperators {
    scene: LayeredScene,
    /// Render of every subset of present classes, keyed by the subset.
    renders: Vec<(BTreeSet<usize>, Image)>,
}

impl OracleOperators {
    pub fn new(scene: &LayeredScene) -> Self {
        let present = &scene.ordering;
        let renders = (0u32..1 << present.len())
            .map(|bits| {
                let subset: BTreeSet<usize> = present
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| bits >> i & 1 == 1)
                    .map(|(_, &c)| c)
                    .collect();
                let img = scene.spec.render_filtered(|c| subset.contains(&c));
                (subset, img)
            })
            .collect();
        OracleOperators {
            scene: scene.clone(),
            renders,
        }
    }

    /// The subset whose render equals `image` exactly, if any.
    pub fn subset_of(&self, image: &Image) -> Option<&BTreeSet<usize>> {
        self.renders.iter().find(|(_, r)| r == image).map(|(s, _)| s)
    }

    fn render(&self, subset: &BTreeSet<usize>) -> &Image {
        &self
            .renders
            .iter()
            .find(|(s, _)| s == subset)
            .expect("all subsets rendered")
            .1
    }
}

impl RemovalOperator for OracleOperators {
    fn remove(&self, class_id: usize, image: &Image) -> Result<LayerOutput> {
        let (h, w) = (image.height(), image.width());
        let Some(subset) = self.subset_of(image) else {
            return Ok(LayerOutput::identity(h, w));
        };
        if !subset.contains(&class_id) {
            return Ok(LayerOutput::identity(h, w));
        }
        let rank = self.scene.depth_rank(class_id).expect("present class");
        let mut mask = self.scene.amodal_masks[&class_id].clone();
        for &above in &self.scene.ordering[rank + 1..] {
            if subset.contains(&above) {
                mask = mask.minus(&self.scene.amodal_masks[&above]);
            }
        }
        let mut rest = subset.clone();
        rest.remove(&class_id);
        LayerOutput::new(self.render(&rest).clone(), mask)
    }
}

impl Classifier for OracleOperators {
    fn class_probs(&self, image: &Image) -> Result<Vec<f64>> {
        let mut p = vec![0.0; self.scene.num_classes()];
        if let Some(s) = self.subset_of(image) {
            for &c in s {
                p[c] = 1.0;
            }
        }
        Ok(p)
    }
}

/// Classes with probability at least `tau`.
pub fn classify(probs: &[f64], tau: f64) -> Vec<usize> {
    (0..probs.len()).filter(|&c| probs[c] >= tau).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// `Σ m1 ⊙ m2` on the soft masks.
    #[default]
    Soft,
    /// Pixel count of the intersection after thresholding both masks.
    Thresholded(f32),
}

impl OverlapMode {
    fn overlap(self, m1: &Mask, m2: &Mask) -> Result<f64> {
        match self {
            OverlapMode::Soft => soft_intersection(m1, m2),
            OverlapMode::Thresholded(t) => soft_intersection(&threshold_mask(m1, t), &threshold_mask(m2, t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseRecord {
    pub a: usize,
    pub b: usize,
    /// Overlap of `M⁻_a(I)` with `M⁻_b` after removing `a`.
    pub overlap_a_first: f64,
    pub overlap_b_first: f64,
    /// The class judged to lie on top.
    pub winner: usize,
    /// `|overlap_a_first − overlap_b_first|`; 0 marks an unresolved tie.
    pub confidence: f64,
}

impl PairwiseRecord {
    pub fn loser(&self) -> usize {
        if self.winner == self.a {
            self.b
        } else {
            self.a
        }
    }
}

fn overlap_removing_first(
    ops: &dyn RemovalOperator,
    image: &Image,
    first: usize,
    second: usize,
    mode: OverlapMode,
) -> Result<f64> {
    let l1 = ops.remove(first, image)?;
    let after = composite(image, &l1)?;
    let l2 = ops.remove(second, &after)?;
    mode.overlap(&l1.mask, &l2.mask)
}

/// Decides which of `a` and `b` is on top: the class whose removal first
/// gives the larger overlap between the two successive removal masks.
/// Ties go to the smaller class id with confidence 0.
pub fn pairwise_order(
    ops: &dyn RemovalOperator,
    image: &Image,
    a: usize,
    b: usize,
    mode: OverlapMode,
) -> Result<PairwiseRecord> {
    if a == b {
        return Err(Error::Invalid(format!(
            "pairwise_order needs two distinct classes, got {a} twice"
        )));
    }
    let oa = overlap_removing_first(ops, image, a, b, mode)?;
    let ob = overlap_removing_first(ops, image, b, a, mode)?;
    let winner = if oa > ob {
        a
    } else if ob > oa {
        b
    } else {
        a.min(b)
    };
    Ok(PairwiseRecord {
        a,
        b,
        overlap_a_first: oa,
        overlap_b_first: ob,
        winner,
        confidence: (oa - ob).abs(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderingResult {
    pub present: Vec<usize>,
    /// Top to bottom.
    pub order: Vec<usize>,
    pub pairwise: Vec<PairwiseRecord>,
}

/// Topological order (top first) of the dominance graph `winner → loser`.
/// Zero-confidence pairs contribute no edge. While the graph has a cycle,
/// the weakest edge lying on a cycle is dropped (ties: smallest
/// `(winner, loser)`). Unconstrained classes come out in ascending id.
pub fn full_ordering(present: &[usize], pairwise: &[PairwiseRecord]) -> Vec<usize> {
    let nodes: BTreeSet<usize> = present.iter().copied().collect();
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for r in pairwise {
        let (w, l) = (r.winner, r.loser());
        if r.confidence > 0.0 && nodes.contains(&w) && nodes.contains(&l) {
            edges.insert((w, l), r.confidence);
        }
    }
    let reaches = |edges: &BTreeMap<(usize, usize), f64>, from: usize, to: usize| {
        let mut seen = BTreeSet::from([from]);
        let mut stack = vec![from];
        while let Some(u) = stack.pop() {
            if u == to {
                return true;
            }
            for (&(x, y), _) in edges.range((u, 0)..=(u, usize::MAX)) {
                debug_assert_eq!(x, u);
                if seen.insert(y) {
                    stack.push(y);
                }
            }
        }
        false
    };
    loop {
        let weakest = edges
            .iter()
            .filter(|(&(u, v), _)| reaches(&edges, v, u))
            .min_by(|(ka, ca), (kb, cb)| ca.total_cmp(cb).then(ka.cmp(kb)))
            .map(|(&k, _)| k);
        match weakest {
            Some(k) => {
                edges.remove(&k);
            }
            None => break,
        }
    }
    let mut indegree: BTreeMap<usize, usize> = nodes.iter().map(|&n| (n, 0)).collect();
    for &(_, v) in edges.keys() {
        *indegree.get_mut(&v).expect("node") += 1;
    }
    let mut ready: BinaryHeap<Reverse<usize>> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&n, _)| Reverse(n))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse(u)) = ready.pop() {
        order.push(u);
        for (&(_, v), _) in edges.range((u, 0)..=(u, usize::MAX)) {
            let d = indegree.get_mut(&v).expect("node");
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(v));
            }
        }
    }
    order
}

/// Pairwise records for all pairs of `present` (evaluated in parallel) and
/// the resulting order.
pub fn order_classes(
    ops: &dyn RemovalOperator,
    image: &Image,
    present: &[usize],
    mode: OverlapMode,
) -> Result<OrderingResult> {
    let mut pairs = Vec::new();
    for (i, &a) in present.iter().enumerate() {
        for &b in &present[i + 1..] {
            pairs.push((a, b));
        }
    }
    let pairwise = layergan_autograd::par::map_slice(&pairs, |&(a, b)| pairwise_order(ops, image, a, b, mode))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(OrderingResult {
        present: present.to_vec(),
        order: full_ordering(present, &pairwise),
        pairwise,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionStep {
    pub class_id: usize,
    pub pre: Image,
    pub layer: LayerOutput,
    pub post: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub steps: Vec<DecompositionStep>,
    pub final_image: Image,
}

/// Applies the removal operators in `order` (top first), chaining the
/// composites.
pub fn decompose(ops: &dyn RemovalOperator, image: &Image, order: &[usize]) -> Result<Decomposition> {
    let mut current = image.clone();
    let mut steps = Vec::with_capacity(order.len());
    for &c in order {
        let layer = ops.remove(c, &current)?;
        let post = composite(&current, &layer)?;
        steps.push(DecompositionStep {
            class_id: c,
            pre: std::mem::replace(&mut current, post.clone()),
            layer,
            post,
        });
    }
    Ok(Decomposition {
        steps,
        final_image: current,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub tau: f64,
    pub overlap: OverlapMode,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            tau: 0.5,
            overlap: OverlapMode::Soft,
        }
    }
}

/// Full pipeline result for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub probs: Vec<f64>,
    pub ordering: OrderingResult,
    pub decomposition: Decomposition,
}

pub fn run_pipeline(
    classifier: &dyn Classifier,
    ops: &dyn RemovalOperator,
    image: &Image,
    opts: InferenceOptions,
) -> Result<Inference> {
    let probs = classifier.class_probs(image)?;
    let present = classify(&probs, opts.tau);
    let ordering = order_classes(ops, image, &present, opts.overlap)?;
    let decomposition = decompose(ops, image, &ordering.order)?;
    Ok(Inference {
        probs,
        ordering,
        decomposition,
    })
}

#[derive(Serialize)]
struct OrderFile<'a> {
    present: &'a [usize],
    order: &'a [usize],
    probs: &'a [f64],
    pairwise: &'a [PairwiseRecord],
}

/// Writes `step_<i>_<class>.png` (image after the step),
/// `mask_<i>_<class>.png`, `appearance_<i>_<class>.png`, `final.png` and
/// `order.json` into `dir`.
pub fn export(inf: &Inference, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in inf.decomposition.steps.iter().enumerate() {
        let c = s.class_id;
        s.post.save_png(&dir.join(format!("step_{i}_{c}.png")))?;
        s.layer.mask.save_png(&dir.join(format!("mask_{i}_{c}.png")))?;
        s.layer
            .appearance
            .save_png(&dir.join(format!("appearance_{i}_{c}.png")))?;
    }
    inf.decomposition.final_image.save_png(&dir.join("final.png"))?;
    let order = OrderFile {
        present: &inf.ordering.present,
        order: &inf.ordering.order,
        probs: &inf.probs,
        pairwise: &inf.ordering.pairwise,
    };
    let path = dir.join("order.json");
    let json = serde_json::to_vec_pretty(&order).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, Instance, Layer, SceneConfig, ShapeKind};

    fn rec(a: usize, b: usize, winner: usize, confidence: f64) -> PairwiseRecord {
        PairwiseRecord {
            a,
            b,
            overlap_a_first: 0.0,
            overlap_b_first: 0.0,
            winner,
            confidence,
        }
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(&[0.9, 0.2, 0.6, 0.1], 0.5), vec![0, 2]);
        assert_eq!(classify(&[0.9, 0.2, 0.6, 0.1], 0.0), vec![0, 1, 2, 3]);
        assert!(classify(&[0.1, 0.2], 0.5).is_empty());
    }

    #[test]
    fn consistent_edges_give_their_order() {
        let p = [rec(0, 1, 0, 1.0), rec(1, 2, 1, 1.0), rec(0, 2, 0, 1.0)];
        assert_eq!(full_ordering(&[0, 1, 2], &p), vec![0, 1, 2]);
        assert_eq!(full_ordering(&[3], &[]), vec![3]);
        assert!(full_ordering(&[], &[]).is_empty());
    }

    #[test]
    fn weakest_cycle_edge_is_dropped() {
        let p = [rec(0, 1, 0, 0.9), rec(1, 2, 1, 0.8), rec(0, 2, 2, 0.1)];
        assert_eq!(full_ordering(&[0, 1, 2], &p), vec![0, 1, 2]);
    }

    #[test]
    fn ties_fall_back_to_class_id() {
        let p = [rec(1, 4, 1, 0.0), rec(2, 4, 4, 3.0), rec(1, 2, 1, 0.0)];
        assert_eq!(full_ordering(&[1, 2, 4], &p), vec![1, 4, 2]);
    }

    fn disc(cx: f32, cy: f32, color: [u8; 3]) -> Instance {
        Instance {
            shape: ShapeKind::Disc,
            cx,
            cy,
            size: 7.0,
            angle: 0.0,
            color,
        }
    }

    fn red_over_green() -> LayeredScene {
        let cfg = SceneConfig {
            topping_count_range: [0, 0],
            ..SceneConfig::desk(2)
        };
        let mut spec = generate_scene(&cfg, 4).unwrap().spec;
        spec.layers = vec![
            Layer {
                class_id: 1,
                instances: vec![disc(28.0, 30.0, [40, 200, 40])],
            },
            Layer {
                class_id: 0,
                instances: vec![disc(34.0, 32.0, [200, 30, 30])],
            },
        ];
        LayeredScene::build(spec)
    }

    #[test]
    fn red_over_green_is_ordered_red_first() {
        let s = red_over_green();
        let ops = OracleOperators::new(&s);
        let img = s.render();
        let r = pairwise_order(&ops, &img, 1, 0, OverlapMode::Soft).unwrap();
        assert_eq!(r.winner, 0);
        assert!(r.overlap_b_first > r.overlap_a_first);
        let overlap = s.amodal_masks[&0].intersect(&s.amodal_masks[&1]).count() as f64;
        assert!(r.confidence >= overlap);
        let swapped = pairwise_order(&ops, &img, 0, 1, OverlapMode::Soft).unwrap();
        assert_eq!((swapped.winner, swapped.confidence), (r.winner, r.confidence));
        let t = pairwise_order(&ops, &img, 1, 0, OverlapMode::Thresholded(0.5)).unwrap();
        assert_eq!(t.winner, 0);
    }

    #[test]
    fn identical_masks_tie() {
        struct Same;
        impl RemovalOperator for Same {
            fn remove(&self, _: usize, image: &Image) -> Result<LayerOutput> {
                LayerOutput::new(image.clone(), Mask::filled(image.height(), image.width(), 0.5))
            }
        }
        let img = Image::filled(4, 4, [0.0; 3]);
        let r = pairwise_order(&Same, &img, 2, 1, OverlapMode::Soft).unwrap();
        assert_eq!(r.confidence, 0.0);
        assert!(pairwise_order(&Same, &img, 1, 1, OverlapMode::Soft).is_err());
    }

    #[test]
    fn oracle_decomposition_reaches_the_base_render() {
        let cfg = SceneConfig {
            topping_count_range: [1, 3],
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            let ops = OracleOperators::new(&s);
            let inf = run_pipeline(&ops, &ops, &s.render(), InferenceOptions::default()).unwrap();
            let d = &inf.decomposition;
            assert_eq!(d.final_image, s.spec.render_base(), "seed {seed}");
            assert_eq!(d.steps.len(), s.ordering.len());
            for (i, st) in d.steps.iter().enumerate() {
                assert_eq!(st.post, composite(&st.pre, &st.layer).unwrap());
                if i + 1 < d.steps.len() {
                    assert_eq!(st.post, d.steps[i + 1].pre);
                }
            }
        }
    }

    #[test]
    fn empty_order_is_a_no_op() {
        let img = Image::filled(8, 8, [0.2; 3]);
        let s = red_over_green();
        let d = decompose(&OracleOperators::new(&s), &img, &[]).unwrap();
        assert!(d.steps.is_empty());
        assert_eq!(d.final_image, img);
    }

    #[test]
    fn export_writes_expected_files() {
        let s = red_over_green();
        let ops = OracleOperators::new(&s);
        let inf = run_pipeline(&ops, &ops, &s.render(), InferenceOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        export(&inf, dir.path()).unwrap();
        for f in [
            "step_0_0.png",
            "mask_0_0.png",
            "appearance_1_1.png",
            "final.png",
            "order.json",
        ] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        let order: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("order.json")).unwrap()).unwrap();
        assert_eq!(order["order"], serde_json::json!([0, 1]));
    }
}
