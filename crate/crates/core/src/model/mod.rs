//! Backbone `f_θ`, set-level prompt encoder `M_ω` and the modulated head
//! `h_φ`, all written once over [`Scalar`] so the same code runs in `f32`
//! (training), `f64` (oracles) and dual numbers (exact audit).

pub mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamSet, ParamVars, Partition, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<'t, T: Scalar>(self, x: Var<'t, T>) -> Var<'t, T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Tanh => x.tanh(),
        }
    }

    fn gain(self) -> f64 {
        match self {
            Activation::Relu => std::f64::consts::SQRT_2,
            Activation::Tanh => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackboneSpec {
    /// Flattened input through dense layers `hidden`, then a dense layer to `feature_dim`.
    Mlp { hidden: Vec<usize>, feature_dim: usize },
    /// Two blocks of 3x3 conv + activation + 2x2 max-pool, then a dense layer to `feature_dim`.
    Cnn { channels: [usize; 2], feature_dim: usize },
}

impl BackboneSpec {
    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp { feature_dim, .. } | BackboneSpec::Cnn { feature_dim, .. } => *feature_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    MeanMax,
    /// Softmax-weighted sum with one learned query.
    Attention,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptEncoderSpec {
    /// Per-element MLP widths (applied row-wise before pooling).
    pub element_hidden: Vec<usize>,
    pub pooling: Pooling,
    /// MLP widths after pooling.
    pub post_hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// Batch-standardize features before FiLM.
    pub standardize: bool,
    pub eps_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub activation: Activation,
    pub backbone: BackboneSpec,
    pub encoder: PromptEncoderSpec,
    pub head: HeadSpec,
}

/// FiLM parameters for one domain batch, each of width `d`.
#[derive(Debug, Clone, Copy)]
pub struct DomainPrompt<'t, T: Scalar> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
}

impl<T: Scalar> DomainPrompt<'_, T> {
    /// Primal values `(gamma, beta)`.
    pub fn values(&self) -> (Vec<f64>, Vec<f64>) {
        (self.gamma.value().to_f64_vec(), self.beta.value().to_f64_vec())
    }
}

/// Output of a full forward pass.
pub struct Forward<'t, T: Scalar> {
    pub features: Var<'t, T>,
    pub prompt: DomainPrompt<'t, T>,
    pub logits: Var<'t, T>,
}

struct ParamDef {
    name: String,
    partition: Partition,
    shape: Vec<usize>,
    fan_in: usize,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Zero,
    One,
}

fn push_dense(out: &mut Vec<ParamDef>, prefix: &str, partition: Partition, fan_in: usize, width: usize, w: Init, b: Init) {
    out.push(ParamDef {
        name: format!("{prefix}.w"),
        partition,
        shape: vec![fan_in, width],
        fan_in,
        init: w,
    });
    out.push(ParamDef {
        name: format!("{prefix}.b"),
        partition,
        shape: vec![width],
        fan_in,
        init: b,
    });
}

fn dense<'t, T: Scalar>(v: &ParamVars<'t, T>, prefix: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    x.dense(&v.get(&format!("{prefix}.w"))?, &v.get(&format!("{prefix}.b"))?)
}

impl ModelSpec {
    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("model: {m}")));
        if self.input.contains(&0) {
            return bad("input dims must be positive");
        }
        if self.feature_dim() == 0 || self.num_classes() < 2 {
            return bad("feature_dim must be positive and num_classes at least 2");
        }
        let mut widths = match &self.backbone {
            BackboneSpec::Mlp { hidden, .. } => hidden.clone(),
            BackboneSpec::Cnn { channels, .. } => {
                if !self.input[1].is_multiple_of(4) || !self.input[2].is_multiple_of(4) {
                    return bad("cnn backbone needs H and W divisible by 4");
                }
                channels.to_vec()
            }
        };
        widths.extend(&self.encoder.element_hidden);
        widths.extend(&self.encoder.post_hidden);
        widths.extend(&self.head.hidden);
        if widths.contains(&0) {
            return bad("layer widths must be positive");
        }
        if !(self.head.eps_std > 0.0 && self.head.eps_std.is_finite()) {
            return bad("eps_std must be positive");
        }
        Ok(())
    }

    fn layout(&self) -> Vec<ParamDef> {
        use Init::*;
        let mut out = Vec::new();
        let d = self.feature_dim();
        match &self.backbone {
            BackboneSpec::Mlp { hidden, .. } => {
                let mut width = self.input_dim();
                for (l, &h) in hidden.iter().enumerate() {
                    push_dense(&mut out, &format!("theta.l{l}"), Partition::Theta, width, h, Uniform, Zero);
                    width = h;
                }
                push_dense(&mut out, "theta.out", Partition::Theta, width, d, Uniform, Zero);
            }
            BackboneSpec::Cnn { channels, .. } => {
                let [c, h, w] = self.input;
                let mut cin = c;
                for (l, &co) in channels.iter().enumerate() {
                    out.push(ParamDef {
                        name: format!("theta.conv{l}.w"),
                        partition: Partition::Theta,
                        shape: vec![co, cin, 3, 3],
                        fan_in: cin * 9,
                        init: Uniform,
                    });
                    out.push(ParamDef {
                        name: format!("theta.conv{l}.b"),
                        partition: Partition::Theta,
                        shape: vec![co],
                        fan_in: cin * 9,
                        init: Zero,
                    });
                    cin = co;
                }
                push_dense(&mut out, "theta.out", Partition::Theta, cin * (h / 4) * (w / 4), d, Uniform, Zero);
            }
        }

        let mut width = d;
        for (l, &h) in self.encoder.element_hidden.iter().enumerate() {
            push_dense(&mut out, &format!("omega.elem{l}"), Partition::Omega, width, h, Uniform, Zero);
            width = h;
        }
        match self.encoder.pooling {
            Pooling::Mean => {}
            Pooling::MeanMax => width *= 2,
            Pooling::Attention => out.push(ParamDef {
                name: "omega.query".into(),
                partition: Partition::Omega,
                shape: vec![width, 1],
                fan_in: width,
                init: Uniform,
            }),
        }
        for (l, &h) in self.encoder.post_hidden.iter().enumerate() {
            push_dense(&mut out, &format!("omega.post{l}"), Partition::Omega, width, h, Uniform, Zero);
            width = h;
        }
        push_dense(&mut out, "omega.gamma", Partition::Omega, width, d, Zero, One);
        push_dense(&mut out, "omega.beta", Partition::Omega, width, d, Zero, Zero);

        let mut width = 2 * d;
        for (l, &h) in self.head.hidden.iter().enumerate() {
            push_dense(&mut out, &format!("phi.l{l}"), Partition::Phi, width, h, Uniform, Zero);
            width = h;
        }
        push_dense(&mut out, "phi.out", Partition::Phi, width, self.num_classes(), Uniform, Zero);
        out
    }

    /// Scaled-uniform fan-in initialization. The γ head starts at weights 0,
    /// bias 1 and the β head at all zeros, so the initial prompt is (1, 0)
    /// for every input set.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        self.validate()?;
        let mut params = ParamSet::new();
        for (i, def) in self.layout().into_iter().enumerate() {
            let n: usize = def.shape.iter().product();
            let data: Vec<f64> = match def.init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Uniform => {
                    let bound = self.activation.gain() * (3.0 / def.fan_in as f64).sqrt();
                    let mut r = rng::stream(rng::derive_path(seed, &[rng::labels::INIT, i as u64]));
                    (0..n).map(|_| r.gen_range(-bound..bound)).collect()
                }
            };
            params.insert(def.name, def.partition, Tensor::from_f64(def.shape, &data)?)?;
        }
        Ok(params)
    }

    fn check_input<T: Scalar>(&self, x: &Var<'_, T>) -> Result<usize> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input[..] || s[0] == 0 {
            return Err(Error::contract(format!(
                "expected input [N, {}, {}, {}], got {s:?}",
                self.input[0], self.input[1], self.input[2]
            )));
        }
        Ok(s[0])
    }

    /// `f_θ(X)`: `[N, C, H, W] -> [N, d]`.
    pub fn extract_features<'t, T: Scalar>(&self, v: &ParamVars<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(x)?;
        let act = self.activation;
        let h = match &self.backbone {
            BackboneSpec::Mlp { hidden, .. } => {
                let mut h = x.flatten()?;
                for l in 0..hidden.len() {
                    h = act.apply(dense(v, &format!("theta.l{l}"), &h)?);
                }
                h
            }
            BackboneSpec::Cnn { .. } => {
                let mut h = *x;
                for l in 0..2 {
                    let w = v.get(&format!("theta.conv{l}.w"))?;
                    let b = v.get(&format!("theta.conv{l}.b"))?;
                    h = act.apply(h.conv2d(&w, &b)?).maxpool2d()?;
                }
                h.flatten()?
            }
        };
        Ok(act.apply(dense(v, "theta.out", &h)?))
    }

    /// `M_ω(Z)`: permutation-invariant map from a feature set `[N, d]` to a prompt.
    ///
    /// Callers pass stop-gradient features; the encoder itself only reads ω.
    pub fn encode_prompt<'t, T: Scalar>(&self, v: &ParamVars<'t, T>, z: &Var<'t, T>) -> Result<DomainPrompt<'t, T>> {
        let s = z.shape();
        if s.len() != 2 || s[0] == 0 || s[1] != self.feature_dim() {
            return Err(Error::contract(format!(
                "prompt encoder expects a nonempty [N, {}] set, got {s:?}",
                self.feature_dim()
            )));
        }
        let act = self.activation;
        let mut h = *z;
        for l in 0..self.encoder.element_hidden.len() {
            h = act.apply(dense(v, &format!("omega.elem{l}"), &h)?);
        }
        let width = *h.shape().last().unwrap();
        let pooled = match self.encoder.pooling {
            Pooling::Mean => h.mean_axis0()?,
            Pooling::MeanMax => Var::concat(&[h.mean_axis0()?, h.max_axis0()?])?,
            Pooling::Attention => {
                let n = s[0];
                let scores = h.matmul(&v.get("omega.query")?)?.reshape(vec![1, n])?;
                let weights = scores.softmax()?;
                weights.matmul(&h)?.reshape(vec![width])?
            }
        };
        let pooled_width = pooled.shape()[0];
        let mut g = pooled.reshape(vec![1, pooled_width])?;
        for l in 0..self.encoder.post_hidden.len() {
            g = act.apply(dense(v, &format!("omega.post{l}"), &g)?);
        }
        let d = self.feature_dim();
        Ok(DomainPrompt {
            gamma: dense(v, "omega.gamma", &g)?.reshape(vec![d])?,
            beta: dense(v, "omega.beta", &g)?.reshape(vec![d])?,
        })
    }

    /// Batch mean and population standard deviation of `z`, per feature.
    pub fn batch_stats<'t, T: Scalar>(&self, z: &Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        Ok((z.mean_axis0()?, z.var_axis0()?.sqrt()?))
    }

    /// FiLM: `γ ⊙ (Z − μ)/(σ + ε) + β` with batch statistics when the head
    /// standardizes, `γ ⊙ Z + β` otherwise.
    pub fn modulate<'t, T: Scalar>(&self, z: &Var<'t, T>, prompt: &DomainPrompt<'t, T>) -> Result<Var<'t, T>> {
        if self.head.standardize {
            let (mu, sigma) = self.batch_stats(z)?;
            self.modulate_with_stats(z, prompt, &mu, &sigma)
        } else {
            z.mul(&prompt.gamma)?.add(&prompt.beta)
        }
    }

    /// Standardizing FiLM with caller-supplied statistics.
    pub fn modulate_with_stats<'t, T: Scalar>(
        &self,
        z: &Var<'t, T>,
        prompt: &DomainPrompt<'t, T>,
        mu: &Var<'t, T>,
        sigma: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let centered = z.sub(mu)?;
        let scale = sigma.add_scalar(self.head.eps_std);
        centered.div(&scale)?.mul(&prompt.gamma)?.add(&prompt.beta)
    }

    /// `h_φ(z, z̃)`: logits from the concatenation of raw and modulated features.
    pub fn predict<'t, T: Scalar>(
        &self,
        v: &ParamVars<'t, T>,
        z: &Var<'t, T>,
        prompt: &DomainPrompt<'t, T>,
    ) -> Result<Var<'t, T>> {
        let zt = self.modulate(z, prompt)?;
        let mut h = Var::concat(&[*z, zt])?;
        for l in 0..self.head.hidden.len() {
            h = self.activation.apply(dense(v, &format!("phi.l{l}"), &h)?);
        }
        dense(v, "phi.out", &h)
    }

    /// Prompt from the stop-gradient features of `x` itself.
    pub fn forward<'t, T: Scalar>(&self, v: &ParamVars<'t, T>, x: &Var<'t, T>) -> Result<Forward<'t, T>> {
        let features = self.extract_features(v, x)?;
        let prompt = self.encode_prompt(v, &features.stop_gradient())?;
        let logits = self.predict(v, &features, &prompt)?;
        Ok(Forward {
            features,
            prompt,
            logits,
        })
    }

    /// Logits for `x` with a prompt computed from the stop-gradient features
    /// of a separate set `context`.
    pub fn forward_with_context<'t, T: Scalar>(
        &self,
        v: &ParamVars<'t, T>,
        x: &Var<'t, T>,
        context: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let features = self.extract_features(v, x)?;
        let ctx = self.extract_features(v, context)?.stop_gradient();
        let prompt = self.encode_prompt(v, &ctx)?;
        self.predict(v, &features, &prompt)
    }
}

/// Records `images` on `tape` as a constant of element type `T`.
pub fn images_on<'t, T: Scalar>(tape: &'t Tape<T>, images: &Tensor<f32>) -> Var<'t, T> {
    tape.constant(images.cast())
}

/// Small desk-scale presets.
pub mod presets {
    use super::*;

    /// MLP backbone sized for 16x16 grayscale glyphs.
    pub fn glyph_mlp(input: [usize; 3], num_classes: usize) -> ModelSpec {
        ModelSpec {
            input,
            activation: Activation::Relu,
            backbone: BackboneSpec::Mlp {
                hidden: vec![128],
                feature_dim: 64,
            },
            encoder: PromptEncoderSpec {
                element_hidden: vec![64],
                pooling: Pooling::Mean,
                post_hidden: vec![64],
            },
            head: HeadSpec {
                hidden: vec![64],
                num_classes,
                standardize: true,
                eps_std: 1e-5,
            },
        }
    }

    /// Tanh network small enough for second-order audits.
    pub fn tiny(input: [usize; 3], feature_dim: usize, num_classes: usize) -> ModelSpec {
        ModelSpec {
            input,
            activation: Activation::Tanh,
            backbone: BackboneSpec::Mlp {
                hidden: vec![],
                feature_dim,
            },
            encoder: PromptEncoderSpec {
                element_hidden: vec![feature_dim],
                pooling: Pooling::Mean,
                post_hidden: vec![],
            },
            head: HeadSpec {
                hidden: vec![],
                num_classes,
                standardize: true,
                eps_std: 1e-5,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ModelSpec {
        presets::tiny([1, 2, 2], 3, 4)
    }

    fn set(rows: &[[f64; 3]]) -> Tensor<f64> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::from_f64(vec![rows.len(), 3], &flat).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_prompt_is_identity() {
        let s = spec();
        let a = s.init_params::<f64>(3).unwrap();
        assert_eq!(a, s.init_params::<f64>(3).unwrap());
        assert_ne!(a, s.init_params::<f64>(4).unwrap());
        let tape = Tape::new();
        let v = a.register(&tape);
        let z = tape.constant(set(&[[1.0, -2.0, 0.5], [0.3, 0.2, 0.1]]));
        let p = s.encode_prompt(&v, &z).unwrap();
        assert_eq!(p.values(), (vec![1.0; 3], vec![0.0; 3]));
        let mut raw = s.clone();
        raw.head.standardize = false;
        let zt = raw.modulate(&z, &p).unwrap();
        assert_eq!(*zt.value(), *z.value());
    }

    #[test]
    fn standardization_arithmetic() {
        let mut s = presets::tiny([1, 1, 2], 2, 2);
        s.head.eps_std = 1e-12;
        let tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::from_f64(vec![2, 2], &[1.0, 3.0, 3.0, 5.0]).unwrap());
        let p = DomainPrompt {
            gamma: tape.constant(Tensor::full(vec![2], 1.0)),
            beta: tape.constant(Tensor::zeros(vec![2])),
        };
        let zt = s.modulate(&z, &p).unwrap();
        for (a, b) in zt.value().data().iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-9);
        }
        let mu = tape.constant(Tensor::zeros(vec![2]));
        let sigma = tape.constant(Tensor::full(vec![2], 1.0));
        s.head.eps_std = 1e-5;
        let id = s.modulate_with_stats(&z, &p, &mu, &sigma).unwrap();
        for (a, b) in id.value().data().iter().zip(z.value().data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn single_row_modulates_to_beta() {
        let s = spec();
        let tape = Tape::<f64>::new();
        let z = tape.constant(set(&[[0.7, -1.1, 2.0]]));
        let p = DomainPrompt {
            gamma: tape.constant(Tensor::from_f64(vec![3], &[3.0, -2.0, 0.5]).unwrap()),
            beta: tape.constant(Tensor::from_f64(vec![3], &[0.1, 0.2, 0.3]).unwrap()),
        };
        assert_eq!(s.modulate(&z, &p).unwrap().value().data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn zero_backbone_gives_zero_features() {
        let s = spec();
        let mut p = s.init_params::<f64>(1).unwrap();
        for name in ["theta.out.w", "theta.out.b"] {
            p.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let v = p.register(&tape);
        let x = tape.constant(Tensor::full(vec![2, 1, 2, 2], 0.4));
        let z = s.extract_features(&v, &x).unwrap();
        assert_eq!(z.shape(), vec![2, 3]);
        assert!(z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_shape_and_input_contract() {
        let s = presets::glyph_mlp([1, 16, 16], 10);
        let p = s.init_params::<f32>(0).unwrap();
        let tape = Tape::new();
        let v = p.register(&tape);
        let x = tape.constant(Tensor::full(vec![5, 1, 16, 16], 0.5f32));
        assert_eq!(s.forward(&v, &x).unwrap().logits.shape(), vec![5, 10]);
        let bad = tape.constant(Tensor::full(vec![5, 1, 8, 8], 0.5f32));
        assert!(matches!(s.extract_features(&v, &bad), Err(Error::Contract(_))));
    }

    #[test]
    fn cnn_and_pooling_variants_run() {
        for pooling in [Pooling::Mean, Pooling::MeanMax, Pooling::Attention] {
            let mut s = presets::glyph_mlp([1, 8, 8], 3);
            s.backbone = BackboneSpec::Cnn {
                channels: [2, 3],
                feature_dim: 4,
            };
            s.encoder.pooling = pooling;
            let p = s.init_params::<f64>(0).unwrap();
            let tape = Tape::new();
            let v = p.register(&tape);
            let x = tape.constant(Tensor::full(vec![2, 1, 8, 8], 0.5));
            assert_eq!(s.forward(&v, &x).unwrap().logits.shape(), vec![2, 3]);
        }
    }

    #[test]
    fn prompt_has_no_backbone_gradient() {
        let s = spec();
        let p = s.init_params::<f64>(2).unwrap();
        let tape = Tape::new();
        let v = p.register(&tape);
        let x = tape.constant(Tensor::from_f64(vec![2, 1, 2, 2], &[0.1, 0.5, 0.9, 0.3, 0.2, 0.4, 0.6, 0.8]).unwrap());
        let f = s.forward(&v, &x).unwrap();
        let loss = f.prompt.gamma.sum().add(&f.prompt.beta.sum()).unwrap();
        let g = tape.backward(loss, &[Partition::Theta]).unwrap();
        assert!(g.iter().all(|(_, _, t)| t.data().iter().all(|&x| x == 0.0)));
    }
}
