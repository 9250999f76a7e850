//! SGD with momentum and weight decay, a per-epoch cosine schedule, crop
//! and flip augmentation, and the epoch loop.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Model, ModelState};
use crate::ops::{softmax_cross_entropy, Mode, ParamGroup};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_fc: f64,
    /// Conv-group learning rate as a fraction of `lr_fc`.
    pub conv_lr_ratio: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub augment: bool,
    pub pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 60,
            lr_fc: 0.1,
            conv_lr_ratio: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_min: 0.0,
            seed: 1,
            augment: true,
            pad: 4,
        }
    }
}

impl TrainConfig {
    /// `lr_fc = 0` is accepted so a frozen run can be expressed.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::arg("epochs must be >= 1"));
        }
        if !(self.lr_fc >= 0.0 && self.lr_fc.is_finite()) {
            return Err(Error::arg(format!("lr must be finite and >= 0, got {}", self.lr_fc)));
        }
        if !(0.0..=self.lr_fc).contains(&self.lr_min) {
            return Err(Error::arg(format!("lr_min must lie in [0, lr], got {}", self.lr_min)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::arg(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.conv_lr_ratio >= 0.0 && self.conv_lr_ratio.is_finite()) {
            return Err(Error::arg(format!("conv lr ratio must be >= 0, got {}", self.conv_lr_ratio)));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::arg(format!("cosine schedule needs 0 <= t <= T and T >= 1, got t={t}, T={total}")));
    }
    if t == 0 {
        return Ok(lr_max);
    }
    if t == total {
        return Ok(lr_min);
    }
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t as f64 / total as f64).cos()))
}

/// Momentum buffers, one per parameter in `named_params` order.
#[derive(Clone, Debug)]
pub struct Sgd {
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(state: &ModelState) -> Self {
        Self {
            velocity: state.named_params().iter().map(|(_, p)| p.value.map(|_| 0.0)).collect(),
        }
    }

    /// Applies one update with the epoch's scheduled learning rate.
    pub fn step(&mut self, state: &mut ModelState, cfg: &TrainConfig, epoch: usize) -> Result<()> {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_fc, cfg.lr_min)?;
        self.step_with_lr(state, cfg, lr)
    }

    /// Applies one update with fc-group learning rate `lr_fc`.
    pub fn step_with_lr(&mut self, state: &mut ModelState, cfg: &TrainConfig, lr_fc: f64) -> Result<()> {
        let mut params = state.named_params_mut();
        if params.len() != self.velocity.len() {
            return Err(Error::arg("optimizer was created for a different model"));
        }
        if let Some((name, _)) = params.iter().find(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        for ((_, p), v) in params.iter_mut().zip(&mut self.velocity) {
            let lr = match p.group {
                ParamGroup::Conv => lr_fc * cfg.conv_lr_ratio,
                ParamGroup::Fc => lr_fc,
            };
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for ((w, &g), vel) in values.iter_mut().zip(grads).zip(v.data_mut()) {
                let g = g + cfg.weight_decay * *w;
                *vel = cfg.momentum * *vel + g;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }
}

/// One random crop offset and flip decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    pub fn sample(rng: &mut Rng, pad: usize) -> Self {
        let dy = rng.below(2 * pad + 1);
        let dx = rng.below(2 * pad + 1);
        let flip = rng.bernoulli(0.5);
        Self { dy, dx, flip }
    }
}

fn check_mean(images: &Tensor, mean: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let dims = images.dims4()?;
    if mean.shape() != [dims.1, dims.2, dims.3] {
        return Err(Error::shape(format!(
            "mean image has shape {:?}, images are {:?}",
            mean.shape(),
            images.shape()
        )));
    }
    Ok(dims)
}

/// Eval path: per-pixel mean subtraction only.
pub fn subtract_mean(images: &Tensor, mean: &Tensor) -> Result<Tensor> {
    check_mean(images, mean)?;
    let m = mean.data();
    let data = images
        .data()
        .chunks(m.len())
        .flat_map(|img| img.iter().zip(m).map(|(x, mu)| x - mu))
        .collect();
    Tensor::from_vec(images.shape(), data)
}

/// Subtracts the mean, zero-pads by `pad`, crops back to the input size at a
/// random offset and flips horizontally with probability 0.5. Draws are
/// taken from `rng` in sample order.
pub fn augment_batch(images: &Tensor, rng: &mut Rng, mean: &Tensor, pad: usize) -> Result<Tensor> {
    let (b, _, _, _) = check_mean(images, mean)?;
    let draws: Vec<AugmentDraw> = (0..b).map(|_| AugmentDraw::sample(rng, pad)).collect();
    apply_augment(images, mean, pad, &draws)
}

/// Deterministic half of [`augment_batch`].
pub fn apply_augment(images: &Tensor, mean: &Tensor, pad: usize, draws: &[AugmentDraw]) -> Result<Tensor> {
    let (b, c, h, w) = check_mean(images, mean)?;
    if draws.len() != b {
        return Err(Error::arg(format!("{} draws for a batch of {b}", draws.len())));
    }
    let centred = subtract_mean(images, mean)?;
    let src = centred.data();
    let mut out = vec![0.0; src.len()];
    for (n, d) in draws.iter().enumerate() {
        for ch in 0..c {
            let plane = (n * c + ch) * h * w;
            for y in 0..h {
                let sy = (y + d.dy) as isize - pad as isize;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if d.flip { w - 1 - x } else { x };
                    let sx = (xx + d.dx) as isize - pad as isize;
                    if sx >= 0 && sx < w as isize {
                        out[plane + y * w + x] = src[plane + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::from_vec(images.shape(), out)
}

/// Stacks `(C, H, W)` images into a `(B, C, H, W)` batch.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for s in samples {
        match &shape {
            None => shape = Some(s.image.shape().to_vec()),
            Some(sh) if sh.as_slice() != s.image.shape() => {
                return Err(Error::shape(format!("image shapes differ: {sh:?} vs {:?}", s.image.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(s.image.data());
        labels.push(s.label);
    }
    let shape = shape.ok_or_else(|| Error::arg("empty batch"))?;
    let mut full = vec![labels.len()];
    full.extend(shape);
    Ok((Tensor::from_vec(&full, data)?, labels))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and accuracy in eval mode.
pub fn evaluate(model: &mut Model, samples: &[Sample], mean: &Tensor, batch_size: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty split"));
    }
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, labels) = stack_images(chunk)?;
        let (logits, _) = model.forward(&subtract_mean(&x, mean)?, Mode::Eval)?;
        loss += softmax_cross_entropy(&logits, &labels)?.0 * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(EvalReport {
        loss: loss / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Fully connected learning rate used during the epoch.
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,test_acc,lr";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.8},{:.6},{:.6},{:.8}",
            r.epoch, r.train_loss, r.train_acc, r.test_acc, r.lr
        );
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Model after the last epoch.
    pub last: Model,
    /// Model after the epoch with the highest test accuracy (earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub metrics: Vec<MetricsRow>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn best_test_acc(&self) -> f64 {
        self.metrics[self.best_epoch - 1].test_acc
    }
}

pub fn train(model: Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    mut model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::arg("dataset needs non-empty train and test splits"));
    }
    let spec = model.spec();
    let image = data.train[0].image.shape();
    if image != spec.input {
        return Err(Error::shape(format!("model expects images {:?}, dataset has {image:?}", spec.input)));
    }
    if spec.num_classes != data.num_classes() {
        return Err(Error::shape(format!(
            "model has {} classes, dataset has {}",
            spec.num_classes,
            data.num_classes()
        )));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut sgd = Sgd::new(&model.state);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Model, usize, f64)> = None;
    let mut steps = 0;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_fc, cfg.lr_min)?;
        let diverged = |reason: String, best: Option<(Model, usize, f64)>| Error::Diverged {
            epoch: epoch + 1,
            reason,
            checkpoint: best.map(|(m, _, _)| Box::new(m)),
        };
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let (x, labels) = stack_images(batch.iter().map(|&i| &data.train[i]))?;
            let x = if cfg.augment {
                augment_batch(&x, &mut rng, &data.mean, cfg.pad)?
            } else {
                subtract_mean(&x, &data.mean)?
            };
            let (logits, cache) = model.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}"), best));
            }
            model.backward(&cache, &grad)?;
            match sgd.step_with_lr(&mut model.state, cfg, lr) {
                Err(Error::NonFiniteGradient(name)) => {
                    return Err(diverged(format!("non-finite gradient in {name}"), best))
                }
                other => other?,
            }
            steps += 1;
            loss_sum += loss * labels.len() as f64;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let n = data.train.len() as f64;
        let test_acc = evaluate(&mut model, &data.test, &data.mean, cfg.batch_size)?.accuracy;
        let row = MetricsRow {
            epoch: epoch + 1,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            test_acc,
            lr,
        };
        on_epoch(&row);
        metrics.push(row);
        if best.as_ref().is_none_or(|(_, _, acc)| test_acc > *acc) {
            best = Some((model.clone(), epoch + 1, test_acc));
        }
    }
    let (best, best_epoch, _) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        last: model,
        best,
        best_epoch,
        metrics,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, DatasetConfig};
    use crate::model::{build_model, Head, ModelSpec, Variant};
    use crate::ops::ParamTensor;
    use proptest::prelude::{prop_assert, proptest};

    fn scalar(value: f64, grad: f64, group: ParamGroup) -> ParamTensor {
        let mut p = ParamTensor::new(Tensor::from_vec(&[1], vec![value]).unwrap(), group);
        p.grad.data_mut()[0] = grad;
        p
    }

    fn manual_step(p: &mut ParamTensor, v: &mut f64, cfg: &TrainConfig, lr_fc: f64) {
        let lr = if p.group == ParamGroup::Conv {
            lr_fc * cfg.conv_lr_ratio
        } else {
            lr_fc
        };
        let w = p.value.data()[0];
        let g = p.grad.data()[0] + cfg.weight_decay * w;
        *v = cfg.momentum * *v + g;
        p.value.data_mut()[0] = w - lr * *v;
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_lr(0, 60, 0.1, 0.0).unwrap(), 0.1);
        assert_eq!(cosine_lr(60, 60, 0.1, 0.0).unwrap(), 0.0);
        assert_eq!(cosine_lr(7, 7, 0.1, 0.003).unwrap(), 0.003);
        assert!((cosine_lr(30, 60, 0.1, 0.0).unwrap() - 0.05).abs() < 1e-12);
        assert!(cosine_lr(61, 60, 0.1, 0.0).is_err());
        assert!(cosine_lr(0, 0, 0.1, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_non_increasing(total in 1usize..400, max in 0.0f64..1.0, frac in 0.0f64..=1.0) {
            let min = max * frac;
            let lrs: Vec<f64> = (0..=total).map(|t| cosine_lr(t, total, max, min).unwrap()).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            prop_assert!(lrs.iter().all(|&lr| lr >= min && lr <= max));
        }
    }

    #[test]
    fn sgd_scalar_example() {
        // w=1, grad=1, lr=0.1, no momentum or decay
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut model = tiny_model();
        let mut sgd = Sgd::new(&model.state);
        for (_, p) in model.state.named_params_mut() {
            p.value.data_mut().fill(1.0);
            p.grad.data_mut().fill(1.0);
        }
        sgd.step_with_lr(&mut model.state, &cfg, 0.1).unwrap();
        for (_, p) in model.state.named_params() {
            let expect = if p.group == ParamGroup::Fc { 0.9 } else { 1.0 - 0.1 * 0.1 };
            assert!(p.value.data().iter().all(|&w| w == expect), "{:?}", p.group);
        }
    }

    #[test]
    fn conv_step_is_a_tenth_of_fc_step() {
        let cfg = TrainConfig::default();
        let mut model = tiny_model();
        let mut sgd = Sgd::new(&model.state);
        let before: Vec<(ParamGroup, Vec<f64>)> = model
            .state
            .named_params_mut()
            .into_iter()
            .map(|(_, p)| {
                p.value.data_mut().fill(0.25);
                p.grad.data_mut().fill(-0.75);
                (p.group, p.value.data().to_vec())
            })
            .collect();
        sgd.step(&mut model.state, &cfg, 0).unwrap();
        let deltas: Vec<(ParamGroup, f64)> = model
            .state
            .named_params()
            .iter()
            .zip(&before)
            .map(|((_, p), (g, b))| (*g, p.value.data()[0] - b[0]))
            .collect();
        let fc = deltas.iter().find(|(g, _)| *g == ParamGroup::Fc).unwrap().1;
        let conv = deltas.iter().find(|(g, _)| *g == ParamGroup::Conv).unwrap().1;
        // identical value and grad, so only the group multiplier differs
        assert_eq!(conv, fc * 0.1);
        assert!(deltas.iter().all(|(g, d)| *d == if *g == ParamGroup::Fc { fc } else { conv }));
    }

    #[test]
    fn sgd_matches_scalar_recurrence() {
        let cfg = TrainConfig::default();
        let mut model = tiny_model();
        let mut sgd = Sgd::new(&model.state);
        let mut oracle: Vec<(ParamTensor, f64)> = Vec::new();
        let mut rng = Rng::new(5);
        for (_, p) in model.state.named_params_mut() {
            p.value.data_mut()[0] = rng.uniform(-1.0, 1.0);
            oracle.push((scalar(p.value.data()[0], 0.0, p.group), 0.0));
        }
        for step in 0..4 {
            for ((_, p), (o, v)) in model.state.named_params_mut().into_iter().zip(&mut oracle) {
                p.zero_grad();
                let g = rng.uniform(-1.0, 1.0);
                p.grad.data_mut()[0] = g;
                o.grad.data_mut()[0] = g;
                manual_step(o, v, &cfg, 0.1 / (step + 1) as f64);
            }
            sgd.step_with_lr(&mut model.state, &cfg, 0.1 / (step + 1) as f64).unwrap();
        }
        for ((_, p), (o, _)) in model.state.named_params().iter().zip(&oracle) {
            assert_eq!(p.value.data()[0], o.value.data()[0]);
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut model = tiny_model();
        let before = model.state.clone();
        let mut sgd = Sgd::new(&model.state);
        sgd.step(&mut model.state, &cfg, 3).unwrap();
        assert_eq!(model.state.layers, before.layers);
    }

    #[test]
    fn nan_gradient_is_reported() {
        let mut model = tiny_model();
        let mut sgd = Sgd::new(&model.state);
        let name = {
            let mut params = model.state.named_params_mut();
            params[1].1.grad.data_mut()[0] = f64::NAN;
            params[1].0.clone()
        };
        match sgd.step(&mut model.state, &TrainConfig::default(), 0) {
            Err(Error::NonFiniteGradient(n)) => assert_eq!(n, name),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lr_fc: -0.1, ..Default::default() },
            TrainConfig { lr_min: 0.2, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    fn images(seed: u64, b: usize) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        (
            Tensor::uniform(&mut rng, &[b, 3, 8, 8], 0.0, 1.0).unwrap(),
            Tensor::uniform(&mut rng, &[3, 8, 8], 0.0, 1.0).unwrap(),
        )
    }

    #[test]
    fn augmentation_disabled_subtracts_mean_exactly() {
        let (x, mean) = images(1, 3);
        let out = subtract_mean(&x, &mean).unwrap();
        for (i, v) in out.data().iter().enumerate() {
            assert_eq!(*v, x.data()[i] - mean.data()[i % mean.len()]);
        }
        let centre = vec![AugmentDraw { dy: 4, dx: 4, flip: false }; 3];
        assert_eq!(apply_augment(&x, &mean, 4, &centre).unwrap(), out);
    }

    #[test]
    fn augmentation_geometry() {
        let (x, mean) = images(2, 2);
        let out = augment_batch(&x, &mut Rng::new(3), &mean, 4).unwrap();
        assert_eq!(out.shape(), x.shape());

        let centred = subtract_mean(&x, &mean).unwrap();
        let at = |t: &Tensor, n: usize, c: usize, y: usize, x: usize| t.data()[((n * 3 + c) * 8 + y) * 8 + x];
        // shift down-right by one pixel: first row and column are padding
        let draws = [AugmentDraw { dy: 3, dx: 3, flip: false }, AugmentDraw { dy: 4, dx: 4, flip: true }];
        let out = apply_augment(&x, &mean, 4, &draws).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for xx in 0..8 {
                    let shifted = if y == 0 || xx == 0 { 0.0 } else { at(&centred, 0, c, y - 1, xx - 1) };
                    assert_eq!(at(&out, 0, c, y, xx), shifted);
                    assert_eq!(at(&out, 1, c, y, xx), at(&centred, 1, c, y, 7 - xx));
                }
            }
        }
    }

    #[test]
    fn flip_frequency() {
        let mut rng = Rng::new(17);
        let flips = (0..10_000).filter(|_| AugmentDraw::sample(&mut rng, 4).flip).count();
        let freq = flips as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&freq), "{freq}");
    }

    #[test]
    fn mean_shape_mismatch() {
        let (x, _) = images(1, 2);
        let bad = Tensor::zeros(&[3, 4, 4]).unwrap();
        assert!(matches!(augment_batch(&x, &mut Rng::new(0), &bad, 4), Err(Error::Shape(_))));
    }

    #[test]
    fn csv_format() {
        let rows = [MetricsRow {
            epoch: 1,
            train_loss: 2.5,
            train_acc: 0.125,
            test_acc: 0.25,
            lr: 0.1,
        }];
        assert_eq!(
            metrics_csv(&rows),
            "epoch,train_loss,train_acc,test_acc,lr\n1,2.50000000,0.125000,0.250000,0.10000000\n"
        );
    }

    fn tiny_data(per_class: usize) -> Dataset {
        synthesize(&DatasetConfig {
            seed: 4,
            num_classes: 2,
            per_class_train: per_class,
            per_class_test: 2,
            image_size: 16,
        })
        .unwrap()
    }

    fn tiny_spec() -> ModelSpec {
        ModelSpec::toycar(Variant::Cmp, Some((4.0, 4)), 16, Head::new(8, 2)).unwrap()
    }

    fn tiny_model() -> Model {
        build_model(&tiny_spec(), 9).unwrap()
    }

    #[test]
    fn one_epoch_of_32_samples_is_one_step() {
        let data = tiny_data(16);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(tiny_model(), &data, &cfg).unwrap();
        assert_eq!(out.steps, 1);
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.metrics[0].lr, 0.1);
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let data = tiny_data(4);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let a = train(tiny_model(), &data, &cfg).unwrap();
        let b = train(tiny_model(), &data, &cfg).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.last.state.layers, b.last.state.layers);
        assert!(a.metrics.iter().all(|r| (0.0..=1.0).contains(&r.train_acc) && (0.0..=1.0).contains(&r.test_acc)));
    }

    #[test]
    fn zero_lr_zero_decay_freezes_parameters() {
        let data = tiny_data(4);
        let cfg = TrainConfig {
            epochs: 2,
            lr_fc: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let model = tiny_model();
        let out = train(model.clone(), &data, &cfg).unwrap();
        for ((_, a), (_, b)) in model.state.named_params().iter().zip(out.last.state.named_params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn divergence_returns_checkpoint() {
        let data = tiny_data(4);
        let cfg = TrainConfig {
            epochs: 3,
            lr_fc: 1e200,
            lr_min: 0.0,
            augment: false,
            ..TrainConfig::default()
        };
        match train(tiny_model(), &data, &cfg) {
            Err(Error::Diverged { epoch, checkpoint, .. }) => {
                assert!(epoch >= 1);
                assert_eq!(checkpoint.is_some(), epoch > 1);
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.metrics)),
        }
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let data = tiny_data(2);
        let spec = ModelSpec::toycar(Variant::Cmp, Some((4.0, 4)), 16, Head::new(8, 3)).unwrap();
        let model = build_model(&spec, 0).unwrap();
        assert!(matches!(train(model, &data, &TrainConfig::default()), Err(Error::Shape(_))));
    }
}
