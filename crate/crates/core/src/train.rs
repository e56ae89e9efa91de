//! Joint training of all operator pairs and the shared discriminator.
//!
//! Each step trains one class: the discriminator is updated on real images
//! from both domains and on the pair's fakes, then the class's add and
//! remove generators are updated against the freshly updated discriminator.
//! Classes take turns round-robin within an epoch.

use std::io::Write;
use std::path::{Path, PathBuf};

use layergan_autograd::{adam_step, AdamConfig, AdamState, ParamId, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{
    adversarial_d_term, classification_loss, generator_objective, label_tensor, objective_d, pair_forward,
    AdversarialMode, LossWeights,
};
use crate::manifest::DatasetManifest;
use crate::nets::{ArchConfig, Model};
use crate::scene::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let c = AdamConfig::default();
        AdamSettings {
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

impl From<AdamSettings> for AdamConfig {
    fn from(s: AdamSettings) -> Self {
        AdamConfig {
            beta1: s.beta1,
            beta2: s.beta2,
            epsilon: s.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub adversarial: AdversarialMode,
    pub lr: f64,
    pub const_epochs: usize,
    pub decay_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamSettings,
    /// Capacity of the per-generator history of fakes shown to the
    /// discriminator; 0 disables it.
    pub pool_size: usize,
    /// Checkpoint after every this many epochs (and always at the end).
    pub checkpoint_every: usize,
    /// Defaults to `ceil(n_train / (2 * batch_size))`.
    pub steps_per_epoch: Option<usize>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchConfig::default(),
            weights: LossWeights::default(),
            adversarial: AdversarialMode::default(),
            lr: 2e-4,
            const_epochs: 20,
            decay_epochs: 20,
            batch_size: 4,
            seed: 0,
            adam: AdamSettings::default(),
            pool_size: 0,
            checkpoint_every: 5,
            steps_per_epoch: None,
            data: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.const_epochs + self.decay_epochs
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        let a = self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Constant `base_lr` for `const_epochs`, then linear decay towards zero
/// over `decay_epochs`.
pub fn lr_schedule(epoch: usize, base_lr: f64, const_epochs: usize, decay_epochs: usize) -> Result<f64> {
    if epoch >= const_epochs + decay_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {const_epochs} + {decay_epochs} epochs"
        )));
    }
    if epoch < const_epochs {
        Ok(base_lr)
    } else {
        Ok(base_lr * (1.0 - (epoch - const_epochs) as f64 / decay_epochs as f64))
    }
}

/// Indices of training images with (`positives`) and without (`negatives`)
/// class `class_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSplit {
    pub class_id: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

pub fn split_labels(labels: &[Vec<u8>], class_id: usize) -> Result<DomainSplit> {
    let (positives, negatives): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i][class_id] == 1);
    if positives.is_empty() {
        return Err(Error::DegenerateDomain {
            class: class_id,
            which: "positive",
        });
    }
    if negatives.is_empty() {
        return Err(Error::DegenerateDomain {
            class: class_id,
            which: "negative",
        });
    }
    Ok(DomainSplit {
        class_id,
        positives,
        negatives,
    })
}

pub fn split_domains(manifest: &DatasetManifest, class_id: usize) -> Result<DomainSplit> {
    if manifest.is_empty() {
        return Err(Error::Invalid("cannot split an empty manifest".into()));
    }
    let labels: Vec<Vec<u8>> = manifest.entries.iter().map(|e| e.labels.clone()).collect();
    if let Some(e) = manifest.entries.iter().find(|e| e.labels.len() <= class_id) {
        return Err(Error::Invalid(format!(
            "entry {} has no label for class {class_id}",
            e.id
        )));
    }
    split_labels(&labels, class_id)
}

/// Training images and labels held in memory.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub images: Vec<Image>,
    pub labels: Vec<Vec<u8>>,
}

impl TrainData {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        let images = layergan_autograd::par::map_slice(&manifest.entries, |e| manifest.load_image(e))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let labels = manifest.entries.iter().map(|e| e.labels.clone()).collect();
        Ok(TrainData { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// History of generated images; with probability 1/2 a query returns a
/// stored image in place of the fresh one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Vec<f32>>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        ImagePool {
            capacity,
            images: Vec::new(),
        }
    }

    fn query(&mut self, batch: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        if self.capacity == 0 {
            return batch.clone();
        }
        let n = batch.shape()[0];
        let per = batch.numel() / n;
        let mut out = Vec::with_capacity(batch.numel());
        for item in batch.data().chunks(per) {
            if self.images.len() < self.capacity {
                self.images.push(item.to_vec());
                out.extend_from_slice(item);
            } else if rng.random_bool(0.5) {
                let j = rng.random_range(0..self.capacity);
                out.extend_from_slice(&self.images[j]);
                self.images[j] = item.to_vec();
            } else {
                out.extend_from_slice(item);
            }
        }
        Tensor::new(batch.shape().to_vec(), out).expect("same shape")
    }
}

/// Loss values recorded for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub d_adv_add: f64,
    pub d_adv_remove: f64,
    pub d_cls: f64,
    pub d_total: f64,
    pub g_adv_add: f64,
    pub g_adv_remove: f64,
    pub g_cls_add: f64,
    pub g_cls_remove: f64,
    pub cycle_image: f64,
    pub cycle_mask: f64,
    pub mask_reg: f64,
    pub g_total: f64,
}

impl StepLosses {
    pub fn named(&self) -> [(&'static str, f64); 12] {
        [
            ("d_adv_add", self.d_adv_add),
            ("d_adv_remove", self.d_adv_remove),
            ("d_cls", self.d_cls),
            ("d_total", self.d_total),
            ("g_adv_add", self.g_adv_add),
            ("g_adv_remove", self.g_adv_remove),
            ("g_cls_add", self.g_cls_add),
            ("g_cls_remove", self.g_cls_remove),
            ("cycle_image", self.cycle_image),
            ("cycle_mask", self.cycle_mask),
            ("mask_reg", self.mask_reg),
            ("g_total", self.g_total),
        ]
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam_d: AdamState<f32>,
    /// One optimizer per operator pair.
    pub adam_g: Vec<AdamState<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps over the whole run.
    pub step: u64,
    pub pools: Vec<[ImagePool; 2]>,
}

impl TrainState {
    /// Freshly initialized model and optimizers.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::<f32>::init(&config.arch, config.seed)?;
        let adam = AdamConfig::from(config.adam);
        let adam_d = AdamState::new(&model.params, &model.disc_ids(), adam);
        let adam_g = model
            .pairs
            .iter()
            .map(|p| AdamState::new(&model.params, &p.ids(), adam))
            .collect();
        let pools = (0..config.arch.num_classes)
            .map(|_| [ImagePool::new(config.pool_size), ImagePool::new(config.pool_size)])
            .collect();
        Ok(TrainState {
            config,
            model,
            adam_d,
            adam_g,
            epoch: 0,
            step: 0,
            pools,
        })
    }

    fn set_trainable(&mut self, ids: &[ParamId]) {
        let all: Vec<ParamId> = self.model.params.ids().collect();
        self.model.params.set_requires_grad(&all, false);
        self.model.params.set_requires_grad(ids, true);
    }
}

fn value(tape: &Tape<f32>, v: Var, term: &'static str, class: usize) -> Result<f64> {
    let x = tape.value(v).data().iter().map(|&x| x as f64).sum::<f64>();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { term, class })
    }
}

/// The class-`c` minibatch: `B` images containing the class and `B`
/// without it.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub plus: &'a [&'a Image],
    pub plus_labels: &'a [&'a [u8]],
    pub minus: &'a [&'a Image],
    pub minus_labels: &'a [&'a [u8]],
}

/// One discriminator update followed by one update of class `c`'s add and
/// remove generators, at learning rate `lr`.
pub fn train_step(state: &mut TrainState, c: usize, batch: Batch<'_>, lr: f64) -> Result<StepLosses> {
    let k = state.model.num_classes();
    if c >= k {
        return Err(Error::Invalid(format!("class {c} out of range for {k} classes")));
    }
    let b = batch.plus.len();
    if b == 0 || batch.minus.len() != b || batch.plus_labels.len() != b || batch.minus_labels.len() != b {
        return Err(Error::Invalid(
            "batch halves must be non-empty and equally sized".into(),
        ));
    }
    if batch.plus_labels.iter().chain(batch.minus_labels).any(|l| l.len() != k) {
        return Err(Error::Invalid(format!("label vectors must have length {k}")));
    }
    let mode = state.config.adversarial;
    let weights = state.config.weights;
    let pair = state.model.pairs[c].clone();
    let pair_ids = pair.ids();
    let disc_ids = state.model.disc_ids();
    let mut out = StepLosses::default();

    // Generators forward, kept on the tape for their own update.
    state.set_trainable(&pair_ids);
    let mut gt = Tape::<f32>::new();
    let i_plus = gt.constant(Image::batch(batch.plus)?);
    let i_minus = gt.constant(Image::batch(batch.minus)?);
    let pf = pair_forward(&mut gt, &state.model, &pair, i_minus, i_plus)?;

    // Discriminator update on reals and detached fakes.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.config.seed ^ 0x5EED, state.step));
    let fake_plus = state.pools[c][0].query(gt.value(pf.fake_plus), &mut rng);
    let fake_minus = state.pools[c][1].query(gt.value(pf.fake_minus), &mut rng);
    state.set_trainable(&disc_ids);
    {
        let mut dt = Tape::<f32>::new();
        let parts = [
            dt.constant(gt.value(i_plus).clone()),
            dt.constant(gt.value(i_minus).clone()),
            dt.constant(fake_plus),
            dt.constant(fake_minus),
        ];
        let x = dt.concat_batch(&parts)?;
        let d = state.model.discriminator_forward(&mut dt, x)?;
        let patch = |dt: &mut Tape<f32>, i: usize| dt.slice_batch(d.patch, i * b, b);
        let (rp, rm, fp, fm) = (
            patch(&mut dt, 0)?,
            patch(&mut dt, 1)?,
            patch(&mut dt, 2)?,
            patch(&mut dt, 3)?,
        );
        let d_add = adversarial_d_term(&mut dt, rp, fp, mode)?;
        let d_remove = adversarial_d_term(&mut dt, rm, fm, mode)?;
        let real_probs = dt.slice_batch(d.probs, 0, 2 * b)?;
        let real_labels: Vec<&[u8]> = batch.plus_labels.iter().chain(batch.minus_labels).copied().collect();
        let target = dt.constant(label_tensor(&real_labels)?);
        let cls = classification_loss(&mut dt, real_probs, target)?;
        let total = objective_d(&mut dt, &[d_add, d_remove], &[cls], &weights)?;
        out.d_adv_add = value(&dt, d_add, "d_adv_add", c)?;
        out.d_adv_remove = value(&dt, d_remove, "d_adv_remove", c)?;
        out.d_cls = value(&dt, cls, "d_cls", c)?;
        out.d_total = value(&dt, total, "d_total", c)?;
        let grads = dt.backward(total)?;
        state.model.params.zero_grad(&disc_ids);
        grads.accumulate_into(&mut state.model.params);
        adam_step(&mut state.model.params, &disc_ids, &mut state.adam_d, lr)?;
    }

    // Generator update against the updated, frozen discriminator.
    state.set_trainable(&[]);
    let (terms, total) = generator_objective(
        &mut gt,
        &state.model,
        c,
        &pf,
        i_minus,
        i_plus,
        batch.plus_labels,
        batch.minus_labels,
        mode,
        &weights,
    )?;
    out.g_adv_add = value(&gt, terms.adv_add, "g_adv_add", c)?;
    out.g_adv_remove = value(&gt, terms.adv_remove, "g_adv_remove", c)?;
    out.g_cls_add = value(&gt, terms.cls_add, "g_cls_add", c)?;
    out.g_cls_remove = value(&gt, terms.cls_remove, "g_cls_remove", c)?;
    out.cycle_image = value(&gt, terms.cycle_image, "cycle_image", c)?;
    out.cycle_mask = value(&gt, terms.cycle_mask, "cycle_mask", c)?;
    out.mask_reg = value(&gt, terms.reg, "mask_reg", c)?;
    out.g_total = value(&gt, total, "g_total", c)?;
    let grads = gt.backward(total)?;
    state.model.params.zero_grad(&pair_ids);
    grads.accumulate_into(&mut state.model.params);
    adam_step(&mut state.model.params, &pair_ids, &mut state.adam_g[c], lr)?;
    state.step += 1;
    Ok(out)
}

/// `ceil(n / (2 * batch_size))` unless overridden.
pub fn steps_per_epoch(config: &TrainConfig, n_train: usize) -> usize {
    config
        .steps_per_epoch
        .unwrap_or_else(|| n_train.div_ceil(2 * config.batch_size).max(1))
}

/// Uniform sample with replacement of `b` items from `pool`.
fn sample(rng: &mut ChaCha8Rng, pool: &[usize], b: usize) -> Vec<usize> {
    (0..b).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

/// Observer for per-step losses and finished epochs.
pub trait TrainObserver {
    fn on_step(&mut self, _epoch: usize, _step: u64, _class: usize, _losses: &StepLosses) -> Result<()> {
        Ok(())
    }
    fn on_epoch_end(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Runs the remaining epochs of `state` over `data`. The minibatch of a
/// step depends only on the seed and the global step index, so a resumed
/// run continues exactly where the interrupted one stopped.
pub fn train_epochs(state: &mut TrainState, data: &TrainData, observer: &mut dyn TrainObserver) -> Result<()> {
    let k = state.model.num_classes();
    let splits = (0..k)
        .map(|c| split_labels(&data.labels, c))
        .collect::<Result<Vec<_>>>()?;
    let cfg = state.config.clone();
    let spe = steps_per_epoch(&cfg, data.len()) as u64;
    let b = cfg.batch_size;
    while state.epoch < cfg.total_epochs() {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, cfg.lr, cfg.const_epochs, cfg.decay_epochs)?;
        let first = state.step - epoch as u64 * spe;
        for j in first..spe {
            let c = (j % k as u64) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, state.step));
            let plus = sample(&mut rng, &splits[c].positives, b);
            let minus = sample(&mut rng, &splits[c].negatives, b);
            let img = |ix: &[usize]| ix.iter().map(|&i| &data.images[i]).collect::<Vec<_>>();
            let lab = |ix: &[usize]| ix.iter().map(|&i| data.labels[i].as_slice()).collect::<Vec<_>>();
            let (pi, pl, mi, ml) = (img(&plus), lab(&plus), img(&minus), lab(&minus));
            let batch = Batch {
                plus: &pi,
                plus_labels: &pl,
                minus: &mi,
                minus_labels: &ml,
            };
            let losses = train_step(state, c, batch, lr)?;
            observer.on_step(epoch, state.step - 1, c, &losses)?;
        }
        state.epoch += 1;
        observer.on_epoch_end(state)?;
    }
    Ok(())
}

/// Appends `(epoch, step, class, loss_name, value)` rows to a CSV file and
/// checkpoints the state periodically.
pub struct RunLogger {
    out_dir: PathBuf,
    csv: std::io::BufWriter<std::fs::File>,
    checkpoint_every: usize,
}

pub const LOSS_LOG: &str = "losses.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";

impl RunLogger {
    /// Opens the log for appending. Rows for steps at or past `resume_step`
    /// (left over from an interrupted run) are dropped first.
    pub fn open(out_dir: &Path, checkpoint_every: usize, resume_step: u64) -> Result<Self> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(LOSS_LOG);
        if path.is_file() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let kept: String = text
                .lines()
                .enumerate()
                .filter(|(i, line)| {
                    *i == 0
                        || line
                            .split(',')
                            .nth(1)
                            .and_then(|s| s.parse::<u64>().ok())
                            .is_some_and(|s| s < resume_step)
                })
                .map(|(_, line)| format!("{line}\n"))
                .collect();
            if kept.len() != text.len() {
                std::fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
            }
        }
        let fresh = !path.is_file();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut csv = std::io::BufWriter::new(file);
        if fresh {
            writeln!(csv, "epoch,step,class,loss_name,value").map_err(|e| Error::io(&path, e))?;
        }
        Ok(RunLogger {
            out_dir: out_dir.to_path_buf(),
            csv,
            checkpoint_every,
        })
    }

    fn csv_err(&self, e: std::io::Error) -> Error {
        Error::io(self.out_dir.join(LOSS_LOG), e)
    }
}

impl TrainObserver for RunLogger {
    fn on_step(&mut self, epoch: usize, step: u64, class: usize, losses: &StepLosses) -> Result<()> {
        for (name, v) in losses.named() {
            writeln!(self.csv, "{epoch},{step},{class},{name},{v}").map_err(|e| self.csv_err(e))?;
        }
        Ok(())
    }

    fn on_epoch_end(&mut self, state: &TrainState) -> Result<()> {
        self.csv.flush().map_err(|e| self.csv_err(e))?;
        let last = state.epoch == state.config.total_epochs();
        if last || (self.checkpoint_every > 0 && state.epoch.is_multiple_of(self.checkpoint_every)) {
            crate::checkpoint::save_checkpoint(state, &self.out_dir.join(CHECKPOINT_DIR))?;
        }
        log::info!(
            "epoch {} of {} done (step {})",
            state.epoch,
            state.config.total_epochs(),
            state.step
        );
        Ok(())
    }
}

/// Trains on the `train` split of `manifest`, writing the loss log and
/// checkpoints to `out_dir`. Resumes from `out_dir/checkpoint` if present.
pub fn train(config: &TrainConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainState> {
    config.validate()?;
    let train_split = manifest.split("train");
    let train_split = if train_split.is_empty() {
        manifest.clone()
    } else {
        train_split
    };
    let data = TrainData::from_manifest(&train_split)?;
    for c in 0..config.arch.num_classes {
        split_labels(&data.labels, c)?;
    }
    let ckpt = out_dir.join(CHECKPOINT_DIR);
    let mut state = if ckpt.join(crate::checkpoint::MANIFEST_NAME).is_file() {
        let s = crate::checkpoint::load_checkpoint(&ckpt)?;
        if s.config.arch != config.arch {
            return Err(Error::Config(
                "checkpoint architecture differs from the configuration".into(),
            ));
        }
        log::info!("resuming from epoch {}", s.epoch);
        s
    } else {
        TrainState::new(config.clone())?
    };
    let mut logger = RunLogger::open(out_dir, config.checkpoint_every, state.step)?;
    if state.epoch == 0 && state.step == 0 {
        crate::checkpoint::save_checkpoint(&state, &ckpt)?;
    }
    train_epochs(&mut state, &data, &mut logger)?;
    Ok(state)
}
