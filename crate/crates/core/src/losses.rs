//! Classification and hint objectives, built from tape primitives so every
//! loss is differentiable end to end.

use crate::error::{Error, Result};
use crate::image::{HintTransformSpec, RasterImage};
use crate::seed;
use crate::tensor::{Tape, Var};

/// Floor applied to log-probabilities inside the KL terms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "logits need at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn argmax(&self) -> usize {
        // first index wins ties
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    /// `softmax(self / temperature)`.
    pub fn softmax(&self, temperature: f64) -> Result<ProbabilityVector> {
        check_temperature(temperature)?;
        let scaled: Vec<f64> = self.0.iter().map(|v| v / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        ProbabilityVector::new(exps.into_iter().map(|e| e / z).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("probability outside [0, 1]".into()));
        }
        let s: f64 = values.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {s}")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossVariant {
    SymmetricKl,
    Mse,
}

impl LossVariant {
    pub fn name(self) -> &'static str {
        match self {
            LossVariant::SymmetricKl => "symmetric_kl",
            LossVariant::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "symmetric_kl" => Ok(LossVariant::SymmetricKl),
            "mse" => Ok(LossVariant::Mse),
            other => Err(Error::Config(format!(
                "unknown loss variant {other:?} (expected symmetric_kl or mse)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HintLossConfig {
    pub temperature: f64,
    pub variant: LossVariant,
    pub alpha: f64,
}

impl HintLossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidArgument(format!("alpha={} must be >= 0", self.alpha)));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature {t} must be > 0")))
    }
}

fn rows_and_classes(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(v) {
        [n, d] if n > 0 && d >= 2 => Ok((n, d)),
        ref s => Err(Error::ShapeMismatch {
            op,
            left: s.to_vec(),
            right: vec![],
        }),
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
    let dims = rows_and_classes(tape, a, op)?;
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    Ok(dims)
}

/// Batch-mean cross-entropy of `[N, d]` logits against class indices.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, d) = rows_and_classes(tape, logits, "cross_entropy")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: vec![n, d],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= d) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {d} classes")));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(lp, labels)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

/// Mean squared error against one-hot targets, averaged over batch and classes.
pub fn mse_classification(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, d) = rows_and_classes(tape, logits, "mse_classification")?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "mse_classification",
            left: vec![n, d],
            right: vec![labels.len()],
        });
    }
    let mut target = vec![0.0; n * d];
    for (r, &l) in labels.iter().enumerate() {
        if l >= d {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {d} classes")));
        }
        target[r * d + l] = 1.0;
    }
    let t = tape.constant(vec![n, d], target)?;
    let diff = tape.sub(logits, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Row-mean of `½(KL(p‖q) + KL(q‖p))` with `p = softmax(a/T)`, `q = softmax(b/T)`.
///
/// Evaluated as `½ Σ (p − q)(log p − log q)`, which is term-wise
/// nonnegative and exactly symmetric in `a` and `b`.
pub fn symmetric_kl_hint(tape: &mut Tape, a: Var, b: Var, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let (n, _) = same_shape(tape, a, b, "symmetric_kl_hint")?;
    let floor = LOG_FLOOR.ln();
    let mut side = |x: Var| -> Result<(Var, Var)> {
        let z = tape.scale(x, 1.0 / temperature);
        let lp = tape.log_softmax(z, 1)?;
        let p = tape.exp(lp);
        Ok((p, tape.clamp_min(lp, floor)))
    };
    let (p, lp) = side(a)?;
    let (q, lq) = side(b)?;
    let dp = tape.sub(p, q)?;
    let dl = tape.sub(lp, lq)?;
    let prod = tape.mul(dp, dl)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 0.5 / n as f64))
}

/// Row-mean of `(1/d) Σᵢ (aᵢ − bᵢ)²`.
pub fn mse_hint(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "mse_hint")?;
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

pub fn hint_loss(tape: &mut Tape, variant: LossVariant, a: Var, b: Var, temperature: f64) -> Result<Var> {
    match variant {
        LossVariant::SymmetricKl => symmetric_kl_hint(tape, a, b, temperature),
        LossVariant::Mse => mse_hint(tape, a, b),
    }
}

fn logits_matrix(tape: &mut Tape, rows: &[Logits]) -> Result<Var> {
    let d = rows.first().ok_or(Error::Empty("logits"))?.dim();
    if rows.iter().any(|r| r.dim() != d) {
        return Err(Error::InvalidArgument("logit rows differ in length".into()));
    }
    let data = rows.iter().flat_map(|r| r.values().iter().copied()).collect();
    tape.constant(vec![rows.len(), d], data)
}

fn pair_value(
    a: &[Logits],
    b: &[Logits],
    f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "hint loss",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let mut tape = Tape::new();
    let va = logits_matrix(&mut tape, a)?;
    let vb = logits_matrix(&mut tape, b)?;
    let l = f(&mut tape, va, vb)?;
    Ok(tape.scalar(l))
}

pub fn cross_entropy_value(logits: &Logits, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let v = logits_matrix(&mut tape, std::slice::from_ref(logits))?;
    let l = cross_entropy(&mut tape, v, &[label])?;
    Ok(tape.scalar(l))
}

pub fn symmetric_kl_value(a: &Logits, b: &Logits, temperature: f64) -> Result<f64> {
    pair_value(std::slice::from_ref(a), std::slice::from_ref(b), |t, x, y| {
        symmetric_kl_hint(t, x, y, temperature)
    })
}

pub fn mse_hint_value(a: &Logits, b: &Logits) -> Result<f64> {
    pair_value(std::slice::from_ref(a), std::slice::from_ref(b), mse_hint)
}

/// Mean hint loss over paired logit rows.
pub fn hint_loss_value(variant: LossVariant, a: &[Logits], b: &[Logits], temperature: f64) -> Result<f64> {
    pair_value(a, b, |t, x, y| hint_loss(t, variant, x, y, temperature))
}

/// Mean of `loss(f(x), f(h(x)))` over `images`, with `h` drawn per image
/// from `spec` using seeds derived from `(seed, spec.seed_stream, index)`.
///
/// The loss kind comes from `config.variant`; the temperature is
/// `eval_temperature`, not `config.temperature`.
pub fn evaluate_hint_loss_on_set<F>(
    forward: F,
    images: &[RasterImage],
    spec: &HintTransformSpec,
    config: &HintLossConfig,
    eval_temperature: f64,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&[RasterImage]) -> Result<Vec<Logits>>,
{
    if images.is_empty() {
        return Err(Error::Empty("hint evaluation set"));
    }
    spec.validate()?;
    let transformed = transform_set(images, spec, seed)?;
    let a = forward(images)?;
    let b = forward(&transformed)?;
    hint_loss_value(config.variant, &a, &b, eval_temperature)
}

/// Applies `spec` to each image with a per-index seed.
pub fn transform_set(images: &[RasterImage], spec: &HintTransformSpec, seed: u64) -> Result<Vec<RasterImage>> {
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = seed::rng(&[seed, spec.seed_stream, i as u64]);
            spec.sample(&mut rng, img.height(), img.width()).apply(img)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l(v: &[f64]) -> Logits {
        Logits::new(v.to_vec()).unwrap()
    }

    #[test]
    fn logits_validation() {
        assert!(Logits::new(vec![1.0]).is_err());
        assert!(Logits::new(vec![1.0, f64::INFINITY]).is_err());
        assert_eq!(l(&[0.1, 0.5, 0.5]).argmax(), 1);
    }

    #[test]
    fn cross_entropy_examples() {
        let v = cross_entropy_value(&l(&[0.0, 0.0]), 0).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy_value(&l(&[30.0, -30.0]), 0).unwrap() < 1e-12);
        assert!(cross_entropy_value(&l(&[0.0, 0.0]), 2).is_err());
    }

    #[test]
    fn symmetric_kl_examples() {
        let a = l(&[0.3, -1.2, 2.0]);
        assert_eq!(symmetric_kl_value(&a, &a, 0.8).unwrap(), 0.0);
        let p = l(&[0.7f64.ln(), 0.3f64.ln()]);
        let q = l(&[0.0, 0.0]);
        // 40-digit reference values
        let v = symmetric_kl_value(&p, &q, 1.0).unwrap();
        assert!((v - 0.084_729_786_038_720_36).abs() < 1e-14);
        let v2 = symmetric_kl_value(&p, &q, 2.0).unwrap();
        assert!((v2 - 0.022_105_170_033_595_76).abs() < 1e-14);
        assert_eq!(
            symmetric_kl_value(&p, &q, 1.0).unwrap(),
            symmetric_kl_value(&q, &p, 1.0).unwrap()
        );
    }

    #[test]
    fn symmetric_kl_errors() {
        let a = l(&[0.0, 1.0]);
        let b = l(&[0.0, 1.0, 2.0]);
        assert!(symmetric_kl_value(&a, &b, 1.0).is_err());
        assert!(symmetric_kl_value(&a, &a, 0.0).is_err());
        assert!(symmetric_kl_value(&a, &a, -1.0).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = l(&[1.0, 2.0]);
        assert_eq!(mse_hint_value(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_hint_value(&a, &l(&[3.0, 2.0])).unwrap(), 2.0);
        let x = l(&[0.5, -1.0, 3.0]);
        let y = l(&[1.5, 2.0, -0.25]);
        let xp = l(&[3.0, 0.5, -1.0]);
        let yp = l(&[-0.25, 1.5, 2.0]);
        assert_eq!(mse_hint_value(&x, &y).unwrap(), mse_hint_value(&xp, &yp).unwrap());
        assert!(mse_hint_value(&a, &l(&[1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn mse_classification_uses_one_hot() {
        let mut tape = Tape::new();
        let z = tape.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let m = mse_classification(&mut tape, z, &[0]).unwrap();
        assert_eq!(tape.scalar(m), 0.5);
    }

    #[test]
    fn evaluation_on_set() {
        let imgs: Vec<_> = (0..3)
            .map(|i| RasterImage::new(2, 2, vec![0.1 * i as f64, 0.2, 0.3, 0.9]).unwrap())
            .collect();
        let cfg = HintLossConfig {
            temperature: 0.8,
            variant: LossVariant::SymmetricKl,
            alpha: 1.0,
        };
        let constant = |x: &[RasterImage]| Ok(vec![l(&[0.2, 0.1, -0.3]); x.len()]);
        let flip = HintTransformSpec::flip_only();
        assert_eq!(evaluate_hint_loss_on_set(constant, &imgs, &flip, &cfg, 1.0, 0).unwrap(), 0.0);

        // left-column minus right-column, a model that notices flips
        let model = |x: &[RasterImage]| {
            x.iter()
                .map(|i| Logits::new(vec![i.get(1, 0) - i.get(1, 1), 0.0, 0.5]))
                .collect()
        };
        let ident = HintTransformSpec::identity();
        assert_eq!(evaluate_hint_loss_on_set(model, &imgs, &ident, &cfg, 1.0, 0).unwrap(), 0.0);

        let one = &imgs[2..];
        let got = evaluate_hint_loss_on_set(model, one, &flip, &cfg, 1.0, 0).unwrap();
        let a = model(one).unwrap();
        let b = model(&[crate::image::flip_horizontal(&one[0])]).unwrap();
        assert_eq!(got, symmetric_kl_value(&a[0], &b[0], 1.0).unwrap());
        assert!(got > 0.0);
        assert!(evaluate_hint_loss_on_set(model, &[], &flip, &cfg, 1.0, 0).is_err());
    }
}
