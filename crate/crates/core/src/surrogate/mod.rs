//! Surrogate-domain synthesis: a pool of label-preserving image transforms,
//! fixed m-step pipelines built from it, and per-batch application.
//!
//! Every sample gets its own random stream derived from `(seed, index)`, so
//! a pipeline applied to a batch gives the same per-sample output however
//! the data is split into batches.

pub mod ops;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use ops::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// No-op; not part of the pool, used for control pipelines.
    Identity,
    /// Magnitude: sigma in pixels.
    GaussianBlur,
    /// Magnitude: brightness and saturation factor.
    ColorJitter,
    /// Magnitude: hue rotation in turns.
    HsvShift,
    /// Magnitude: factor around the image mean.
    Contrast,
    /// Magnitude: threshold in `[0, 1]`.
    Solarize,
    /// Magnitude: degrees.
    Rotate,
    /// Magnitude: fraction of the side length, drawn separately per axis.
    Translate,
    /// Magnitude: degrees.
    Shear,
    /// Magnitude: blend strength in `[0, 1]`; 1 is `1 - x`.
    Invert,
    /// Magnitude: bits kept, 1 to 8.
    Posterize,
    /// Magnitude: blend strength in `[0, 1]`; 1 is full histogram equalization.
    Equalize,
    /// Magnitude: enhancement factor; 1 is the identity.
    Sharpen,
    /// Magnitude: square side as a fraction of the shorter image side.
    Cutout,
    /// Magnitude: zoom factor.
    Scale,
    /// Magnitude: additive offset.
    BrightnessShift,
}

impl TransformKind {
    /// The fifteen kinds that make up the augmentation pool.
    pub const POOL: [TransformKind; 15] = [
        TransformKind::GaussianBlur,
        TransformKind::ColorJitter,
        TransformKind::HsvShift,
        TransformKind::Contrast,
        TransformKind::Solarize,
        TransformKind::Rotate,
        TransformKind::Translate,
        TransformKind::Shear,
        TransformKind::Invert,
        TransformKind::Posterize,
        TransformKind::Equalize,
        TransformKind::Sharpen,
        TransformKind::Cutout,
        TransformKind::Scale,
        TransformKind::BrightnessShift,
    ];

    /// Default magnitude range used by the training pipelines.
    pub fn default_range(self) -> (f64, f64) {
        use TransformKind::*;
        match self {
            Identity => (0.0, 0.0),
            GaussianBlur => (0.5, 1.5),
            ColorJitter => (0.6, 1.4),
            HsvShift => (-0.1, 0.1),
            Contrast => (0.6, 1.4),
            Solarize => (0.5, 0.5),
            Rotate => (-15.0, 15.0),
            Translate => (-0.1, 0.1),
            Shear => (-10.0, 10.0),
            Invert => (1.0, 1.0),
            Posterize => (4.0, 4.0),
            Equalize => (1.0, 1.0),
            Sharpen => (1.2, 2.0),
            Cutout => (0.25, 0.25),
            Scale => (0.8, 1.2),
            BrightnessShift => (-0.2, 0.2),
        }
    }

    /// Magnitudes accepted at construction.
    fn valid_range(self) -> (f64, f64) {
        use TransformKind::*;
        match self {
            Identity => (0.0, 0.0),
            GaussianBlur => (0.0, 10.0),
            ColorJitter | Contrast | Sharpen => (0.0, 10.0),
            HsvShift => (-1.0, 1.0),
            Solarize | Invert | Equalize | Cutout => (0.0, 1.0),
            Rotate | Shear => (-89.0, 89.0),
            Translate => (-1.0, 1.0),
            Posterize => (1.0, 8.0),
            Scale => (0.05, 20.0),
            BrightnessShift => (-1.0, 1.0),
        }
    }
}

/// One or more closed intervals; a magnitude is drawn uniformly over their union.
///
/// Serialized as `[lo, hi]` for a single interval or `[[lo, hi], ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Magnitude {
    Range([f64; 2]),
    Union(Vec<[f64; 2]>),
}

impl Magnitude {
    pub fn intervals(&self) -> &[[f64; 2]] {
        match self {
            Magnitude::Range(r) => std::slice::from_ref(r),
            Magnitude::Union(v) => v,
        }
    }

    /// `[-hi, -lo] ∪ [lo, hi]`.
    pub fn symmetric(lo: f64, hi: f64) -> Magnitude {
        Magnitude::Union(vec![[-hi, -lo], [lo, hi]])
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let iv = self.intervals();
        let total: f64 = iv.iter().map(|[lo, hi]| hi - lo).sum();
        let u: f64 = rng.gen();
        if total == 0.0 {
            return iv[0][0];
        }
        let mut t = u * total;
        for [lo, hi] in iv {
            let len = hi - lo;
            if t <= len {
                return lo + t;
            }
            t -= len;
        }
        iv[iv.len() - 1][1]
    }

    /// Magnitude used by non-stochastic pipelines: the upper end of the last interval.
    fn fixed(&self) -> f64 {
        let iv = self.intervals();
        iv[iv.len() - 1][1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transform {
    pub kind: TransformKind,
    #[serde(rename = "range")]
    pub magnitude: Magnitude,
}

impl Transform {
    pub fn new(kind: TransformKind, lo: f64, hi: f64) -> Result<Transform> {
        Self::with_magnitude(kind, Magnitude::Range([lo, hi]))
    }

    pub fn with_magnitude(kind: TransformKind, magnitude: Magnitude) -> Result<Transform> {
        let t = Transform { kind, magnitude };
        t.validate()?;
        Ok(t)
    }

    /// The kind with its default training range.
    pub fn default_for(kind: TransformKind) -> Transform {
        let (lo, hi) = kind.default_range();
        Transform {
            kind,
            magnitude: Magnitude::Range([lo, hi]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let iv = self.magnitude.intervals();
        if iv.is_empty() {
            return Err(Error::config(format!("{:?}: empty magnitude range", self.kind)));
        }
        let (vlo, vhi) = self.kind.valid_range();
        for &[lo, hi] in iv {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::config(format!("{:?}: bad magnitude interval [{lo}, {hi}]", self.kind)));
            }
            if lo < vlo || hi > vhi {
                return Err(Error::config(format!(
                    "{:?}: magnitude [{lo}, {hi}] outside [{vlo}, {vhi}]",
                    self.kind
                )));
            }
        }
        Ok(())
    }
}

/// How per-sample random streams are derived. Only one policy exists; the
/// field makes pipeline documents self-describing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    #[default]
    PerSample,
}

/// An ordered list of transforms defining one surrogate domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformPipeline {
    pub id: usize,
    pub name: String,
    pub steps: Vec<Transform>,
    /// Draw magnitudes per sample; otherwise every sample uses the fixed magnitude.
    #[serde(default = "yes")]
    pub stochastic: bool,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
}

fn yes() -> bool {
    true
}

impl TransformPipeline {
    pub fn new(id: usize, name: impl Into<String>, steps: Vec<Transform>) -> Result<TransformPipeline> {
        let p = TransformPipeline {
            id,
            name: name.into(),
            steps,
            stochastic: true,
            seed_policy: SeedPolicy::PerSample,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::config(format!("pipeline {:?} has no steps", self.name)));
        }
        self.steps.iter().try_for_each(Transform::validate)
    }

    /// An m-step pipeline that leaves images unchanged.
    pub fn identity(id: usize, m: usize) -> Result<TransformPipeline> {
        let steps = vec![Transform::default_for(TransformKind::Identity); m];
        TransformPipeline::new(id, "Identity", steps)
    }

    /// `(kind, magnitude)` pairs, for disjointness checks.
    pub fn signature(&self) -> impl Iterator<Item = (TransformKind, &Magnitude)> {
        self.steps.iter().map(|t| (t.kind, &t.magnitude))
    }
}

fn draw(t: &Transform, stochastic: bool, rng: &mut ChaCha8Rng) -> f64 {
    if stochastic {
        t.magnitude.sample(rng)
    } else {
        t.magnitude.fixed()
    }
}

/// Applies one transform in place. Color transforms on single-channel (or
/// any non-RGB) images fall back to brightness shift plus contrast.
pub fn apply_transform(img: &mut Image, t: &Transform, stochastic: bool, rng: &mut ChaCha8Rng) {
    use TransformKind::*;
    let m = draw(t, stochastic, rng);
    match t.kind {
        Identity => {}
        GaussianBlur => ops::gaussian_blur(img, m),
        ColorJitter if img.c == 3 => ops::color_jitter(img, m),
        ColorJitter => {
            ops::brightness_shift(img, m - 1.0);
            ops::contrast(img, m);
        }
        HsvShift if img.c == 3 => ops::hue_shift(img, m),
        HsvShift => {
            ops::brightness_shift(img, m);
            ops::contrast(img, 1.0 + m);
        }
        Contrast => ops::contrast(img, m),
        Solarize => ops::solarize(img, m),
        Rotate => ops::rotate(img, m),
        Translate => {
            let my = draw(t, stochastic, rng);
            ops::translate(img, m * img.w as f64, my * img.h as f64);
        }
        Shear => ops::shear(img, m),
        Invert => ops::invert(img, m),
        Posterize => ops::posterize(img, m),
        Equalize => ops::equalize(img, m),
        Sharpen => ops::sharpen(img, m),
        Cutout => {
            let side = (m * img.h.min(img.w) as f64).round() as usize;
            let cy = rng.gen_range(0..img.h);
            let cx = rng.gen_range(0..img.w);
            ops::cutout(img, side, cy, cx);
        }
        Scale => ops::scale(img, m),
        BrightnessShift => ops::brightness_shift(img, m),
    }
}

fn batch_dims(batch: &Tensor<f32>) -> Result<(usize, usize, usize, usize)> {
    match *batch.shape() {
        [n, c, h, w] if n > 0 && c > 0 && h > 0 && w > 0 => Ok((n, c, h, w)),
        _ => Err(Error::contract(format!(
            "expected a nonempty [N, C, H, W] batch, got {:?}",
            batch.shape()
        ))),
    }
}

/// Applies `p` to every image; sample `i` uses the stream `derive(seed, i)`.
pub fn apply_pipeline(batch: &Tensor<f32>, p: &TransformPipeline, seed: u64) -> Result<Tensor<f32>> {
    apply_pipeline_at(batch, p, seed, 0)
}

/// As [`apply_pipeline`], numbering samples from `first_index` so that a
/// dataset processed in chunks matches the whole-dataset result.
pub fn apply_pipeline_at(
    batch: &Tensor<f32>,
    p: &TransformPipeline,
    seed: u64,
    first_index: u64,
) -> Result<Tensor<f32>> {
    let (_, c, h, w) = batch_dims(batch)?;
    let mut out = batch.clone();
    let stride = c * h * w;
    for (i, chunk) in out.data_mut().chunks_mut(stride).enumerate() {
        let mut r = rng::stream(rng::derive(seed, first_index + i as u64));
        let mut img = Image { data: chunk, c, h, w };
        for t in &p.steps {
            apply_transform(&mut img, t, p.stochastic, &mut r);
        }
    }
    Ok(out)
}

/// One surrogate variant of a labeled batch. The labels are borrowed from
/// the source batch, never copied or modified.
#[derive(Debug, Clone)]
pub struct SurrogateBatch<'a> {
    pub images: Tensor<f32>,
    pub labels: &'a [usize],
}

/// `output[k] = apply_pipeline(x, pipelines[k], derive(seed, k))`.
pub fn surrogate_batches<'a>(
    x: &Tensor<f32>,
    labels: &'a [usize],
    pipelines: &[TransformPipeline],
    seed: u64,
) -> Result<Vec<SurrogateBatch<'a>>> {
    if pipelines.is_empty() {
        return Err(Error::contract("surrogate_batches needs at least one pipeline"));
    }
    let (n, ..) = batch_dims(x)?;
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for {n} images", labels.len())));
    }
    pipelines
        .iter()
        .enumerate()
        .map(|(k, p)| {
            Ok(SurrogateBatch {
                images: apply_pipeline(x, p, rng::derive(seed, k as u64))?,
                labels,
            })
        })
        .collect()
}

/// Themed pipelines; the first three steps of the first five themes are the
/// five standard surrogate domains. Extra steps and extra themes serve
/// sweeps over m and K.
fn themes() -> Vec<(&'static str, [TransformKind; 5])> {
    use TransformKind::*;
    vec![
        ("Color-Shifted", [HsvShift, Contrast, Solarize, BrightnessShift, ColorJitter]),
        ("Geometric Distortion", [Rotate, Translate, Shear, Scale, Sharpen]),
        ("Photometric Degradation", [Invert, Posterize, Equalize, BrightnessShift, Contrast]),
        ("Texture Alteration", [Sharpen, Cutout, Contrast, Posterize, Solarize]),
        ("Scale and Shape Variation", [Scale, Rotate, Cutout, Shear, Translate]),
        ("Tonal Shift", [BrightnessShift, ColorJitter, Sharpen, Contrast, Solarize]),
        ("Occlusion", [Cutout, Translate, BrightnessShift, Scale, Invert]),
        ("Quantized Texture", [Posterize, Sharpen, Shear, Equalize, Rotate]),
        ("Sheared Contrast", [Shear, Contrast, Equalize, Translate, HsvShift]),
    ]
}

pub const MAX_SURROGATES: usize = 9;
pub const MAX_STEPS: usize = 5;

/// The first `k` themed pipelines truncated to `m` steps, default magnitudes.
pub fn pipeline_bank(k: usize, m: usize) -> Result<Vec<TransformPipeline>> {
    if !(1..=MAX_SURROGATES).contains(&k) {
        return Err(Error::config(format!("K must be in 1..={MAX_SURROGATES}, got {k}")));
    }
    if !(1..=MAX_STEPS).contains(&m) {
        return Err(Error::config(format!("m must be in 1..={MAX_STEPS}, got {m}")));
    }
    themes()
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (name, kinds))| {
            let steps = kinds[..m].iter().map(|&kd| Transform::default_for(kd)).collect();
            TransformPipeline::new(i + 1, name, steps)
        })
        .collect()
}

/// The five standard surrogate domains, three steps each.
pub fn default_pipelines() -> Vec<TransformPipeline> {
    pipeline_bank(5, 3).expect("default bank is valid")
}

/// Held-out corruption pipelines for evaluation. Their magnitudes lie up to
/// 25% beyond the training ranges (measured from each kind's identity
/// value), so no `(kind, range)` pair is shared with the training bank.
/// Invert and equalize train at full strength, so their held-out versions
/// use the 25% band below it.
pub fn heldout_pipelines() -> Vec<TransformPipeline> {
    use TransformKind::*;
    let t = |kind, m| Transform::with_magnitude(kind, m).expect("valid held-out magnitude");
    let r = |lo, hi| Magnitude::Range([lo, hi]);
    let defs = vec![
        (
            "Blur-Invert-Translate",
            vec![
                t(GaussianBlur, r(1.5, 1.875)),
                t(Invert, r(0.75, 1.0)),
                t(Translate, Magnitude::symmetric(0.1, 0.125)),
            ],
        ),
        (
            "Posterize-Scale-Shear",
            vec![
                t(Posterize, r(3.0, 3.0)),
                t(Scale, Magnitude::Union(vec![[0.75, 0.8], [1.2, 1.25]])),
                t(Shear, Magnitude::symmetric(10.0, 12.5)),
            ],
        ),
        (
            "Equalize-Cutout-Rotate",
            vec![
                t(Equalize, r(0.75, 1.0)),
                t(Cutout, r(0.3125, 0.3125)),
                t(Rotate, Magnitude::symmetric(15.0, 18.75)),
            ],
        ),
    ];
    defs.into_iter()
        .enumerate()
        .map(|(i, (name, steps))| TransformPipeline::new(i + 1, name, steps).expect("valid held-out pipeline"))
        .collect()
}

/// Errors if any `(kind, range)` pair appears in both lists.
pub fn check_disjoint(training: &[TransformPipeline], heldout: &[TransformPipeline]) -> Result<()> {
    for h in heldout {
        for (kind, mag) in h.signature() {
            for t in training {
                if t.signature().any(|(k2, m2)| k2 == kind && m2 == mag) {
                    return Err(Error::config(format!(
                        "held-out pipeline {:?} shares {kind:?} {mag:?} with training pipeline {:?}",
                        h.name, t.name
                    )));
                }
            }
        }
    }
    Ok(())
}

pub fn pipelines_to_json(pipelines: &[TransformPipeline]) -> Result<String> {
    Ok(serde_json::to_string_pretty(pipelines)?)
}

pub fn pipelines_from_json(text: &str) -> Result<Vec<TransformPipeline>> {
    let v: Vec<TransformPipeline> =
        serde_json::from_str(text).map_err(|e| Error::config(format!("pipeline document: {e}")))?;
    for p in &v {
        p.validate()?;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, c: usize, s: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed);
        let data = (0..n * c * s * s).map(|_| r.gen::<f32>()).collect();
        Tensor::new(vec![n, c, s, s], data).unwrap()
    }

    #[test]
    fn default_bank_shape_and_names() {
        let p = default_pipelines();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|q| q.steps.len() == 3));
        let names: Vec<_> = p.iter().map(|q| q.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "Color-Shifted",
                "Geometric Distortion",
                "Photometric Degradation",
                "Texture Alteration",
                "Scale and Shape Variation"
            ]
        );
        use TransformKind::*;
        let kinds: Vec<_> = p[0].steps.iter().map(|t| t.kind).collect();
        assert_eq!(kinds, [HsvShift, Contrast, Solarize]);
    }

    #[test]
    fn empty_pipeline_is_rejected() {
        assert!(TransformPipeline::new(1, "empty", vec![]).is_err());
        assert!(pipeline_bank(0, 3).is_err());
        assert!(pipeline_bank(5, 6).is_err());
    }

    #[test]
    fn composed_identities_leave_input_unchanged() {
        use TransformKind::*;
        let p = TransformPipeline::new(
            1,
            "noop",
            vec![
                Transform::new(Rotate, 0.0, 0.0).unwrap(),
                Transform::new(Translate, 0.0, 0.0).unwrap(),
                Transform::new(Scale, 1.0, 1.0).unwrap(),
            ],
        )
        .unwrap();
        let x = batch(3, 1, 8, 1);
        assert_eq!(apply_pipeline(&x, &p, 9).unwrap(), x);
    }

    #[test]
    fn deterministic_and_split_invariant() {
        let x = batch(6, 3, 8, 2);
        for p in pipeline_bank(9, 5).unwrap() {
            let a = apply_pipeline(&x, &p, 5).unwrap();
            assert_eq!(a, apply_pipeline(&x, &p, 5).unwrap());
            let head = apply_pipeline_at(&x.slice_rows(0, 4).unwrap(), &p, 5, 0).unwrap();
            let tail = apply_pipeline_at(&x.slice_rows(4, 6).unwrap(), &p, 5, 4).unwrap();
            assert_eq!(Tensor::stack_rows(&[head, tail]).unwrap(), a);
        }
    }

    #[test]
    fn surrogate_batches_share_labels() {
        let x = batch(4, 1, 8, 3);
        let y = vec![0usize, 1, 2, 3];
        let mut pipes = default_pipelines();
        pipes[0] = TransformPipeline::identity(1, 3).unwrap();
        let out = surrogate_batches(&x, &y, &pipes, 11).unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].images, x);
        for b in &out {
            assert_eq!(b.images.shape(), x.shape());
            assert!(std::ptr::eq(b.labels, y.as_slice()));
        }
    }

    #[test]
    fn heldout_is_disjoint_from_training_bank() {
        let h = heldout_pipelines();
        assert_eq!(h.len(), 3);
        check_disjoint(&pipeline_bank(9, 5).unwrap(), &h).unwrap();
        let id = vec![TransformPipeline::identity(1, 3).unwrap()];
        assert!(check_disjoint(&id, &id).unwrap_err().is_config());
    }

    #[test]
    fn json_round_trip() {
        let mut p = default_pipelines();
        p.extend(heldout_pipelines());
        let text = pipelines_to_json(&p).unwrap();
        assert_eq!(pipelines_from_json(&text).unwrap(), p);
        assert!(pipelines_from_json(r#"[{"id":1,"name":"x","steps":[{"kind":"rotate","range":[5,1]}]}]"#).is_err());
        assert!(pipelines_from_json(r#"[{"id":1,"name":"x","steps":[],"bogus":1}]"#).is_err());
    }

    #[test]
    fn magnitude_draws_stay_in_union() {
        let m = Magnitude::symmetric(10.0, 12.5);
        let mut r = rng::stream(4);
        for _ in 0..1000 {
            let v = m.sample(&mut r);
            assert!((10.0..=12.5).contains(&v.abs()), "{v}");
        }
    }
}
