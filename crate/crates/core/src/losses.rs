//! Training objectives. Norms are per-element means, so the loss weights do
//! not depend on the image resolution.

use layergan_autograd::{Float, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::compositor::{composite_var, LayerVars};
use crate::error::{Error, Result};
use crate::nets::{Model, OperatorPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_cyc: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 1.0,
            lambda_cyc: 10.0,
            lambda_reg: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_cyc, self.lambda_reg];
        if all.iter().all(|l| *l >= 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {all:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// Squared error against 1 (real) and 0 (fake) on raw patch scores.
    #[default]
    LeastSquares,
    /// Log-likelihood form on patch probabilities.
    Log,
}

// Keeps the log form finite when a probability saturates in f32.
const LOG_FLOOR: f64 = 1e-12;

fn mean_sq_dist<T: Float>(tape: &mut Tape<T>, x: Var, target: f64) -> Var {
    let d = tape.add_scalar(x, T::of(-target));
    let sq = tape.square(d);
    tape.mean(sq)
}

fn mean_neg_log<T: Float>(tape: &mut Tape<T>, p: Var) -> Var {
    let p = tape.add_scalar(p, T::of(LOG_FLOOR));
    let l = tape.log(p);
    let m = tape.mean(l);
    tape.scale(m, T::of(-1.0))
}

/// Discriminator term for one generator: real patches pushed to 1, fake
/// patches to 0.
pub fn adversarial_d_term<T: Float>(tape: &mut Tape<T>, real: Var, fake: Var, mode: AdversarialMode) -> Result<Var> {
    Ok(match mode {
        AdversarialMode::LeastSquares => {
            let r = mean_sq_dist(tape, real, 1.0);
            let f = mean_sq_dist(tape, fake, 0.0);
            tape.add(r, f)?
        }
        AdversarialMode::Log => {
            let r = mean_neg_log(tape, real);
            let not_fake = tape.one_minus(fake);
            let f = mean_neg_log(tape, not_fake);
            tape.add(r, f)?
        }
    })
}

/// Generator term. In log mode this is the fake half of the log-likelihood
/// the discriminator maximizes, `mean(log(1 − D(fake)))`, which is ≤ 0.
pub fn adversarial_g_term<T: Float>(tape: &mut Tape<T>, fake: Var, mode: AdversarialMode) -> Var {
    match mode {
        AdversarialMode::LeastSquares => mean_sq_dist(tape, fake, 1.0),
        AdversarialMode::Log => {
            let not_fake = tape.one_minus(fake);
            let nl = mean_neg_log(tape, not_fake);
            tape.scale(nl, T::of(-1.0))
        }
    }
}

/// `(d_term, g_term)` for one generator.
pub fn adversarial_losses<T: Float>(
    tape: &mut Tape<T>,
    patch_real: Var,
    patch_fake: Var,
    mode: AdversarialMode,
) -> Result<(Var, Var)> {
    if tape.shape(patch_real) != tape.shape(patch_fake) {
        return Err(Error::Invalid(format!(
            "adversarial_losses: patch maps {:?} and {:?} differ",
            tape.shape(patch_real),
            tape.shape(patch_fake)
        )));
    }
    let d = adversarial_d_term(tape, patch_real, patch_fake, mode)?;
    let g = adversarial_g_term(tape, patch_fake, mode);
    Ok((d, g))
}

/// `‖probs − target‖²` summed over classes, averaged over the batch.
/// Both are `[n, k]`.
pub fn classification_loss<T: Float>(tape: &mut Tape<T>, probs: Var, target: Var) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || tape.shape(target) != shape.as_slice() {
        return Err(Error::Invalid(format!(
            "classification_loss: probabilities {shape:?} vs targets {:?}",
            tape.shape(target)
        )));
    }
    let d = tape.sub(probs, target)?;
    let sq = tape.sq_l2_norm(d);
    Ok(tape.scale(sq, T::of(1.0 / shape[0] as f64)))
}

/// Label vector after adding (`present = true`) or removing class `c`.
pub fn edited_labels(labels: &[u8], c: usize, present: bool) -> Vec<u8> {
    let mut l = labels.to_vec();
    l[c] = present as u8;
    l
}

/// `mean |a − b|`.
pub fn l1_mean<T: Float>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let ad = tape.abs(d);
    Ok(tape.mean(ad))
}

/// Everything one operator pair produces on a minibatch:
/// `I^{f+} = G⁺(I^{r−})`, `I^{f−} = G⁻(I^{r+})` and the two cycles.
#[derive(Debug, Clone, Copy)]
pub struct PairForward {
    pub add: LayerVars,
    pub remove: LayerVars,
    pub fake_plus: Var,
    pub fake_minus: Var,
    /// `G⁻` applied to `I^{f+}`.
    pub remove_cycle: LayerVars,
    /// `G⁺` applied to `I^{f−}`.
    pub add_cycle: LayerVars,
    pub rec_minus: Var,
    pub rec_plus: Var,
}

pub fn pair_forward<T: Float>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pair: &OperatorPair,
    image_minus: Var,
    image_plus: Var,
) -> Result<PairForward> {
    let add = model.generator_forward(tape, &pair.add, image_minus)?;
    let fake_plus = composite_var(tape, image_minus, add)?;
    let remove = model.generator_forward(tape, &pair.remove, image_plus)?;
    let fake_minus = composite_var(tape, image_plus, remove)?;
    let remove_cycle = model.generator_forward(tape, &pair.remove, fake_plus)?;
    let rec_minus = composite_var(tape, fake_plus, remove_cycle)?;
    let add_cycle = model.generator_forward(tape, &pair.add, fake_minus)?;
    let rec_plus = composite_var(tape, fake_minus, add_cycle)?;
    Ok(PairForward {
        add,
        remove,
        fake_plus,
        fake_minus,
        remove_cycle,
        add_cycle,
        rec_minus,
        rec_plus,
    })
}

/// `(image_term, mask_term)` of the cycle loss.
pub fn cycle_terms<T: Float>(
    tape: &mut Tape<T>,
    f: &PairForward,
    image_minus: Var,
    image_plus: Var,
) -> Result<(Var, Var)> {
    let a = l1_mean(tape, f.rec_minus, image_minus)?;
    let b = l1_mean(tape, f.rec_plus, image_plus)?;
    let image_term = tape.add(a, b)?;
    let c = l1_mean(tape, f.add.mask, f.remove_cycle.mask)?;
    let d = l1_mean(tape, f.remove.mask, f.add_cycle.mask)?;
    let mask_term = tape.add(c, d)?;
    Ok((image_term, mask_term))
}

/// Runs the pair on both domains and returns `(image_term, mask_term)`.
pub fn cycle_losses<T: Float>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    pair: &OperatorPair,
    image_minus: Var,
    image_plus: Var,
) -> Result<(Var, Var)> {
    let f = pair_forward(tape, model, pair, image_minus, image_plus)?;
    cycle_terms(tape, &f, image_minus, image_plus)
}

/// Root mean square of `1 − M` per sample, averaged over the batch, for
/// both masks and summed. Masks are `[n, 1, h, w]`.
pub fn mask_regularization<T: Float>(tape: &mut Tape<T>, m_plus: Var, m_minus: Var) -> Result<Var> {
    let mut rms = |m: Var| -> Result<Var> {
        let inv = tape.one_minus(m);
        let sq = tape.square(inv);
        let ms = tape.mean_per_sample(sq)?;
        let r = tape.sqrt(ms);
        Ok(tape.mean(r))
    };
    let a = rms(m_plus)?;
    let b = rms(m_minus)?;
    Ok(tape.add(a, b)?)
}

fn sum_all<T: Float>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = tape.constant(layergan_autograd::Tensor::scalar(T::zero()));
    for &t in terms {
        let t = tape.reshape(t, &[])?;
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// `Σ d_terms + λ_cls Σ cls_real`.
pub fn objective_d<T: Float>(tape: &mut Tape<T>, d_terms: &[Var], cls_real: &[Var], w: &LossWeights) -> Result<Var> {
    let adv = sum_all(tape, d_terms)?;
    let cls = sum_all(tape, cls_real)?;
    let cls = tape.scale(cls, T::of(w.lambda_cls));
    Ok(tape.add(adv, cls)?)
}

/// Per-class generator terms on one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct GeneratorTerms {
    pub adv_add: Var,
    pub adv_remove: Var,
    pub cls_add: Var,
    pub cls_remove: Var,
    pub cycle_image: Var,
    pub cycle_mask: Var,
    pub reg: Var,
}

/// `adv⁺ + adv⁻ + λ_cls (cls⁺ + cls⁻) + λ_cyc (cyc_I + cyc_M) + λ_reg reg`.
pub fn objective_g<T: Float>(tape: &mut Tape<T>, t: &GeneratorTerms, w: &LossWeights) -> Result<Var> {
    let adv = sum_all(tape, &[t.adv_add, t.adv_remove])?;
    let cls = sum_all(tape, &[t.cls_add, t.cls_remove])?;
    let cyc = sum_all(tape, &[t.cycle_image, t.cycle_mask])?;
    let reg = sum_all(tape, &[t.reg])?;
    let cls = tape.scale(cls, T::of(w.lambda_cls));
    let cyc = tape.scale(cyc, T::of(w.lambda_cyc));
    let reg = tape.scale(reg, T::of(w.lambda_reg));
    sum_all(tape, &[adv, cls, cyc, reg])
}

/// `[n, k]` tensor of 0/1 label vectors.
pub fn label_tensor<T: Float>(labels: &[&[u8]]) -> Result<Tensor<T>> {
    let k = labels.first().map_or(0, |l| l.len());
    if labels.iter().any(|l| l.len() != k) {
        return Err(Error::Invalid("label vectors differ in length".into()));
    }
    let data = labels
        .iter()
        .flat_map(|l| l.iter().map(|&v| T::of(f64::from(v))))
        .collect();
    Ok(Tensor::new(vec![labels.len(), k], data)?)
}

/// Generator terms and objective for class `c`. Both fakes go through the
/// discriminator in one batch; the add direction should make the plus
/// fakes carry `c` on top of the minus images' labels, the remove direction
/// should clear it from the plus images' labels.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective<T: Float>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    c: usize,
    pf: &PairForward,
    image_minus: Var,
    image_plus: Var,
    plus_labels: &[&[u8]],
    minus_labels: &[&[u8]],
    mode: AdversarialMode,
    w: &LossWeights,
) -> Result<(GeneratorTerms, Var)> {
    let b = plus_labels.len();
    let fakes = tape.concat_batch(&[pf.fake_plus, pf.fake_minus])?;
    let d = model.discriminator_forward(tape, fakes)?;
    let patch_fp = tape.slice_batch(d.patch, 0, b)?;
    let patch_fm = tape.slice_batch(d.patch, b, b)?;
    let probs_fp = tape.slice_batch(d.probs, 0, b)?;
    let probs_fm = tape.slice_batch(d.probs, b, b)?;
    let target_plus: Vec<Vec<u8>> = minus_labels.iter().map(|l| edited_labels(l, c, true)).collect();
    let target_minus: Vec<Vec<u8>> = plus_labels.iter().map(|l| edited_labels(l, c, false)).collect();
    let tp = tape.constant(label_tensor(
        &target_plus.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    )?);
    let tm = tape.constant(label_tensor(
        &target_minus.iter().map(Vec::as_slice).collect::<Vec<_>>(),
    )?);
    let (cycle_image, cycle_mask) = cycle_terms(tape, pf, image_minus, image_plus)?;
    let terms = GeneratorTerms {
        adv_add: adversarial_g_term(tape, patch_fp, mode),
        adv_remove: adversarial_g_term(tape, patch_fm, mode),
        cls_add: classification_loss(tape, probs_fp, tp)?,
        cls_remove: classification_loss(tape, probs_fm, tm)?,
        cycle_image,
        cycle_mask,
        reg: mask_regularization(tape, pf.add.mask, pf.remove.mask)?,
    };
    let total = objective_g(tape, &terms, w)?;
    Ok((terms, total))
}
