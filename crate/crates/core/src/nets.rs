//! Generator modules (one add/remove pair per class) and the shared
//! discriminator with an adversarial patch head and a multi-label head.

use layergan_autograd::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compositor::{LayerOutput, LayerVars};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Generator base width; the encoder uses `ngf, 2ngf, 4ngf` channels.
    pub ngf: usize,
    pub n_res: usize,
    /// Discriminator base width; the trunk uses `ndf, 2ndf, 4ndf` channels.
    pub ndf: usize,
    pub norm_eps: f64,
    pub leaky_slope: f64,
    pub init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            image_size: 64,
            num_classes: 4,
            ngf: 16,
            n_res: 4,
            ndf: 64,
            norm_eps: 1e-5,
            leaky_slope: 0.2,
            init_std: 0.02,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return bad(format!(
                "image_size {} must be a multiple of 8 and >= 16",
                self.image_size
            ));
        }
        if !(1..=10).contains(&self.num_classes) {
            return bad(format!("num_classes {} must be in 1..=10", self.num_classes));
        }
        if self.ngf == 0 || self.ndf == 0 {
            return bad("network widths must be positive".into());
        }
        if !(self.norm_eps > 0.0 && self.init_std > 0.0 && self.leaky_slope >= 0.0) {
            return bad("norm_eps and init_std must be positive, leaky_slope non-negative".into());
        }
        Ok(())
    }

    /// Side of the square adversarial patch map.
    pub fn patch_size(&self) -> usize {
        self.image_size / 8 - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Add,
    Remove,
}

impl Direction {
    pub fn tag(self) -> &'static str {
        match self {
            Direction::Add => "add",
            Direction::Remove => "remove",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    /// Absent when an instance norm follows, which would cancel it.
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    /// `Some(output_pad)` for a transposed convolution.
    pub transposed: Option<usize>,
}

impl Conv {
    fn forward<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        Ok(match self.transposed {
            None => tape.conv2d(x, w, b, self.stride, self.pad)?,
            Some(op) => tape.conv_transpose2d(x, w, b, self.stride, self.pad, op)?,
        })
    }

    fn ids(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub class_id: usize,
    pub direction: Direction,
    pub stem: Conv,
    pub down: [Conv; 2],
    pub res: Vec<[Conv; 2]>,
    pub up: [Conv; 2],
    pub appearance_head: Conv,
    pub mask_head: Conv,
}

impl GeneratorParams {
    fn convs(&self) -> impl Iterator<Item = &Conv> {
        std::iter::once(&self.stem)
            .chain(&self.down)
            .chain(self.res.iter().flatten())
            .chain(&self.up)
            .chain([&self.appearance_head, &self.mask_head])
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.convs().flat_map(Conv::ids).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorPair {
    pub class_id: usize,
    pub add: GeneratorParams,
    pub remove: GeneratorParams,
}

impl OperatorPair {
    pub fn get(&self, dir: Direction) -> &GeneratorParams {
        match dir {
            Direction::Add => &self.add,
            Direction::Remove => &self.remove,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.add.ids();
        ids.extend(self.remove.ids());
        ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams {
    pub trunk: [Conv; 3],
    pub patch_head: Conv,
    pub cls_weight: ParamId,
    pub cls_bias: ParamId,
}

impl DiscriminatorParams {
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .trunk
            .iter()
            .chain([&self.patch_head])
            .flat_map(Conv::ids)
            .collect();
        ids.extend([self.cls_weight, self.cls_bias]);
        ids
    }
}

/// Discriminator outputs for a batch: raw patch scores `[n, 1, p, p]`,
/// class logits and sigmoid probabilities `[n, k]`.
#[derive(Debug, Clone, Copy)]
pub struct DiscOutput {
    pub patch: Var,
    pub logits: Var,
    pub probs: Var,
}

/// All trainable state: `2k` generators and one discriminator sharing a
/// parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: ArchConfig,
    pub params: ParamStore<T>,
    pub pairs: Vec<OperatorPair>,
    pub disc: DiscriminatorParams,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl<T: Float> Builder<'_, T> {
    fn conv(
        &mut self,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        pad: usize,
        transposed: Option<usize>,
        bias: bool,
    ) -> Conv {
        let normal = self.normal;
        let rng = &mut self.rng;
        let weight = Tensor::from_fn(&shape, |_| T::of(normal.sample(rng)));
        let cout = if transposed.is_some() { shape[1] } else { shape[0] };
        Conv {
            weight: self.store.add(format!("{name}.weight"), weight),
            bias: bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]))),
            stride,
            pad,
            transposed,
        }
    }

    fn generator(&mut self, arch: &ArchConfig, class_id: usize, direction: Direction) -> GeneratorParams {
        let p = format!("g{class_id}.{}", direction.tag());
        let (c1, c2, c3) = (arch.ngf, 2 * arch.ngf, 4 * arch.ngf);
        GeneratorParams {
            class_id,
            direction,
            stem: self.conv(&format!("{p}.stem"), [c1, 3, 7, 7], 1, 3, None, false),
            down: [
                self.conv(&format!("{p}.down0"), [c2, c1, 3, 3], 2, 1, None, false),
                self.conv(&format!("{p}.down1"), [c3, c2, 3, 3], 2, 1, None, false),
            ],
            res: (0..arch.n_res)
                .map(|i| {
                    [
                        self.conv(&format!("{p}.res{i}.conv0"), [c3, c3, 3, 3], 1, 1, None, false),
                        self.conv(&format!("{p}.res{i}.conv1"), [c3, c3, 3, 3], 1, 1, None, false),
                    ]
                })
                .collect(),
            up: [
                self.conv(&format!("{p}.up0"), [c3, c2, 3, 3], 2, 1, Some(1), false),
                self.conv(&format!("{p}.up1"), [c2, c1, 3, 3], 2, 1, Some(1), false),
            ],
            appearance_head: self.conv(&format!("{p}.appearance"), [3, c1, 7, 7], 1, 3, None, true),
            mask_head: self.conv(&format!("{p}.mask"), [1, c1, 7, 7], 1, 3, None, true),
        }
    }
}

impl<T: Float> Model<T> {
    /// Gaussian `N(0, init_std²)` weights and zero biases, deterministic in
    /// `seed`.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, arch.init_std).map_err(|e| Error::Config(e.to_string()))?,
        };
        let pairs = (0..arch.num_classes)
            .map(|c| OperatorPair {
                class_id: c,
                add: b.generator(arch, c, Direction::Add),
                remove: b.generator(arch, c, Direction::Remove),
            })
            .collect();
        let (d1, d2, d3) = (arch.ndf, 2 * arch.ndf, 4 * arch.ndf);
        let trunk = [
            b.conv("d.trunk0", [d1, 3, 4, 4], 2, 1, None, true),
            b.conv("d.trunk1", [d2, d1, 4, 4], 2, 1, None, true),
            b.conv("d.trunk2", [d3, d2, 4, 4], 2, 1, None, true),
        ];
        let patch_head = b.conv("d.patch", [1, d3, 4, 4], 1, 1, None, true);
        let normal = b.normal;
        let rng = &mut b.rng;
        let cls_w = Tensor::from_fn(&[d3, arch.num_classes], |_| T::of(normal.sample(rng)));
        let disc = DiscriminatorParams {
            trunk,
            patch_head,
            cls_weight: store.add("d.cls.weight", cls_w),
            cls_bias: store.add("d.cls.bias", Tensor::zeros(&[arch.num_classes])),
        };
        Ok(Model {
            arch: arch.clone(),
            params: store,
            pairs,
            disc,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn generator(&self, class_id: usize, dir: Direction) -> &GeneratorParams {
        self.pairs[class_id].get(dir)
    }

    /// Same structure with every tensor converted to `U`.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (_, name, t) in self.params.iter() {
            let id = params.add(name, t.cast::<U>());
            params.get_mut(id).set_requires_grad(t.requires_grad());
        }
        Model {
            arch: self.arch.clone(),
            params,
            pairs: self.pairs.clone(),
            disc: self.disc.clone(),
        }
    }

    fn check_input(&self, tape: &Tape<T>, x: Var, what: &str) -> Result<()> {
        let s = tape.shape(x);
        let n = self.arch.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::Invalid(format!(
                "{what}: expected input [_, 3, {n}, {n}], got {s:?}"
            )));
        }
        Ok(())
    }

    fn norm_relu(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.instance_norm(x, T::of(self.arch.norm_eps))?;
        Ok(tape.relu(y))
    }

    /// Appearance (tanh) and mask (sigmoid) for a batch `[n, 3, s, s]`.
    pub fn generator_forward(&self, tape: &mut Tape<T>, g: &GeneratorParams, input: Var) -> Result<LayerVars> {
        self.check_input(tape, input, "generator")?;
        let store = &self.params;
        let mut h = g.stem.forward(tape, store, input)?;
        h = self.norm_relu(tape, h)?;
        for c in &g.down {
            h = c.forward(tape, store, h)?;
            h = self.norm_relu(tape, h)?;
        }
        for [c0, c1] in &g.res {
            let mut r = c0.forward(tape, store, h)?;
            r = self.norm_relu(tape, r)?;
            r = c1.forward(tape, store, r)?;
            r = tape.instance_norm(r, T::of(self.arch.norm_eps))?;
            h = tape.add(h, r)?;
        }
        for c in &g.up {
            h = c.forward(tape, store, h)?;
            h = self.norm_relu(tape, h)?;
        }
        let a = g.appearance_head.forward(tape, store, h)?;
        let m = g.mask_head.forward(tape, store, h)?;
        Ok(LayerVars {
            appearance: tape.tanh(a),
            mask: tape.sigmoid(m),
        })
    }

    pub fn discriminator_forward(&self, tape: &mut Tape<T>, input: Var) -> Result<DiscOutput> {
        self.check_input(tape, input, "discriminator")?;
        let store = &self.params;
        let d = &self.disc;
        let slope = T::of(self.arch.leaky_slope);
        let mut h = input;
        for c in &d.trunk {
            h = c.forward(tape, store, h)?;
            h = tape.leaky_relu(h, slope);
        }
        let patch = d.patch_head.forward(tape, store, h)?;
        let pooled = tape.global_avg_pool(h)?;
        let w = tape.param(store, d.cls_weight);
        let b = tape.param(store, d.cls_bias);
        let logits = tape.matmul(pooled, w)?;
        let logits = tape.add_row_bias(logits, b)?;
        let probs = tape.sigmoid(logits);
        Ok(DiscOutput { patch, logits, probs })
    }

    /// Runs one generator on a batch of images without tracking gradients
    /// into the parameters.
    pub fn generate(&self, class_id: usize, dir: Direction, images: &[&Image]) -> Result<Vec<LayerOutput>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let frozen = self.frozen();
        let mut tape = Tape::new();
        let x = tape.constant(Image::batch(images)?);
        let out = frozen.generator_forward(&mut tape, frozen.generator(class_id, dir), x)?;
        (0..images.len())
            .map(|i| {
                LayerOutput::new(
                    Image::from_batch(tape.value(out.appearance), i)?,
                    Mask::from_batch(tape.value(out.mask), i)?,
                )
            })
            .collect()
    }

    /// Class probabilities for each image.
    pub fn classify_probs(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let frozen = self.frozen();
        let mut tape = Tape::new();
        let x = tape.constant(Image::batch(images)?);
        let out = frozen.discriminator_forward(&mut tape, x)?;
        let k = self.num_classes();
        let p = tape.value(out.probs).data();
        Ok((0..images.len())
            .map(|i| p[i * k..(i + 1) * k].iter().map(|v| v.as_f64()).collect())
            .collect())
    }

    /// Marks every parameter as constant, so inference calls run on the
    /// model itself instead of a frozen copy.
    pub fn freeze(&mut self) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        self.params.set_requires_grad(&ids, false);
    }

    fn frozen(&self) -> std::borrow::Cow<'_, Self> {
        if self.params.iter().any(|(_, _, t)| t.requires_grad()) {
            let mut m = self.clone();
            let ids: Vec<ParamId> = m.params.ids().collect();
            m.params.set_requires_grad(&ids, false);
            std::borrow::Cow::Owned(m)
        } else {
            std::borrow::Cow::Borrowed(self)
        }
    }

    pub fn disc_ids(&self) -> Vec<ParamId> {
        self.disc.ids()
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.pairs.iter().flat_map(OperatorPair::ids).collect()
    }
}
