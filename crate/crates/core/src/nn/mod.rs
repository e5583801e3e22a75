//! Layers, losses and the model architectures.
//!
//! A [`Model`] is an ordered layer list with a named parameter store. The
//! composite structures — [`WholeClassifier`] (an autoencoder glued in front
//! of a classifier) and [`EncoderClassifier`] (a shared encoder feeding a
//! decoder head and a classification head) — are built from plain models.
//!
//! Everything that can answer logits implements [`Classifier`]; attacks and
//! diagnostics only ever see that trait.

pub mod builders;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

/// Architecture description of one layer; hyperparameters only, no weights.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    TransposedConv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize },
    MaxPool2d { window: usize, stride: usize },
    Dense { input: usize, output: usize },
    Activation { function: Activation },
    Flatten,
}

impl LayerSpec {
    /// Per-sample output shape given a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
                let [c, h, w] = chw(input, "conv2d layer")?;
                if c != *in_ch {
                    return Err(CoreError::config(format!(
                        "conv2d expects {in_ch} input channels, got {c}"
                    )));
                }
                let d = crate::tensor::kernels::ConvDims::conv(
                    1, c, h, w, *out_ch, *kernel, *kernel, *stride, *padding,
                )?;
                Ok(vec![*out_ch, d.oh, d.ow])
            }
            LayerSpec::TransposedConv2d { in_ch, out_ch, kernel, stride, padding } => {
                let [c, h, w] = chw(input, "transposed conv layer")?;
                if c != *in_ch {
                    return Err(CoreError::config(format!(
                        "transposed conv expects {in_ch} input channels, got {c}"
                    )));
                }
                let d = crate::tensor::kernels::ConvDims::transposed(
                    1, c, h, w, *out_ch, *kernel, *kernel, *stride, *padding,
                )?;
                Ok(vec![*out_ch, d.h, d.w])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let [c, h, w] = chw(input, "maxpool layer")?;
                let d = crate::tensor::kernels::PoolDims::new(1, c, h, w, *window, *stride)?;
                Ok(vec![c, d.oh, d.ow])
            }
            LayerSpec::Dense { input: fi, output } => {
                if input != [*fi] {
                    return Err(CoreError::config(format!(
                        "dense layer expects flat input of {fi}, got {input:?}"
                    )));
                }
                Ok(vec![*output])
            }
            LayerSpec::Activation { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn chw(shape: &[usize], what: &str) -> Result<[usize; 3]> {
    if shape.len() != 3 {
        return Err(CoreError::config(format!("{what} expects a CHW input, got {shape:?}")));
    }
    Ok([shape[0], shape[1], shape[2]])
}

/// One layer with its weights.
#[derive(Clone, Debug)]
enum Layer {
    Conv2d { weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    TransposedConv2d { weight: Tensor, bias: Tensor, stride: usize, padding: usize },
    MaxPool2d { window: usize, stride: usize },
    Dense { weight: Tensor, bias: Tensor },
    Activation(Activation),
    Flatten,
}

/// Ordered layer list with a named parameter store and a freeze flag.
///
/// Frozen models never expose trainable parameter bindings, so a training
/// step cannot touch their weights even by accident.
#[derive(Clone, Debug)]
pub struct Model {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    frozen: bool,
}

impl Model {
    /// Initialize a model from its architecture. Weights are zero-mean
    /// normal with variance `2 / fan_in`, biases zero; the layer plan is
    /// shape-checked end to end before any allocation is visible.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let output_shape = infer_output_shape(input_shape, &specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        for spec in &specs {
            layers.push(init_layer(spec, rng));
        }
        Ok(Model {
            input_shape: input_shape.to_vec(),
            output_shape,
            specs,
            layers,
            frozen: false,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Named parameters in deterministic (layer, weight-then-bias) order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d { weight, bias, .. }
                | Layer::TransposedConv2d { weight, bias, .. }
                | Layer::Dense { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable access in the same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv2d { weight, bias, .. }
                | Layer::TransposedConv2d { weight, bias, .. }
                | Layer::Dense { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                _ => {}
            }
        }
        out
    }

    /// Replace all parameters (checkpoint restore); shapes must match.
    pub fn load_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(CoreError::contract(format!(
                "expected {} parameters, got {}",
                params.len(),
                values.len()
            )));
        }
        for ((name, slot), value) in params.iter_mut().zip(values) {
            if slot.shape() != value.shape() {
                return Err(CoreError::contract(format!(
                    "parameter {name} shape {:?} does not match checkpoint {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            **slot = value.clone();
        }
        Ok(())
    }

    /// Forward pass with parameters recorded as constants; gradients still
    /// flow to the *input* (the attack path).
    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let vars = self.insert_params(tape, false);
        self.apply_layers(x, &vars)
    }

    /// Forward pass binding unfrozen parameters as trainable leaves;
    /// returns the parameter vars aligned with [`params`](Self::params).
    pub fn forward_bound<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let vars = self.insert_params(tape, !self.frozen);
        let out = self.apply_layers(x, &vars)?;
        Ok((out, vars))
    }

    /// Plain inference on a batch; no gradient bookkeeping survives the call.
    pub fn forward_value(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        Ok(self.forward(&tape, xv)?.value())
    }

    fn insert_params<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    fn apply_layers<'t>(&self, mut x: Var<'t>, params: &[Var<'t>]) -> Result<Var<'t>> {
        let mut p = params.iter();
        let mut next = || -> Var<'t> { *p.next().expect("param var list length") };
        for layer in &self.layers {
            x = match layer {
                Layer::Conv2d { stride, padding, .. } => {
                    let (w, b) = (next(), next());
                    x.conv2d(w, *stride, *padding)?.bias_nchw(b)?
                }
                Layer::TransposedConv2d { stride, padding, .. } => {
                    let (w, b) = (next(), next());
                    x.conv2d_transposed(w, *stride, *padding)?.bias_nchw(b)?
                }
                Layer::MaxPool2d { window, stride } => x.maxpool2d(*window, *stride)?,
                Layer::Dense { .. } => {
                    let (w, b) = (next(), next());
                    x.matmul(w)?.add(b)?
                }
                Layer::Activation(a) => match a {
                    Activation::Relu => x.relu()?,
                    Activation::Sigmoid => x.sigmoid()?,
                    Activation::Tanh => x.tanh()?,
                },
                Layer::Flatten => {
                    let s = x.shape();
                    let flat: usize = s[1..].iter().product();
                    x.reshape(&[s[0], flat])?
                }
            };
        }
        Ok(x)
    }
}

fn infer_output_shape(input: &[usize], specs: &[LayerSpec]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        shape = spec.output_shape(&shape).map_err(|e| {
            CoreError::config(format!("layer {i} rejects input shape: {e}"))
        })?;
    }
    Ok(shape)
}

fn init_layer(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Layer {
    match *spec {
        LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding } => {
            let fan_in = (in_ch * kernel * kernel) as f64;
            Layer::Conv2d {
                weight: Tensor::randn(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
                bias: Tensor::zeros(&[out_ch]),
                stride,
                padding,
            }
        }
        LayerSpec::TransposedConv2d { in_ch, out_ch, kernel, stride, padding } => {
            let fan_in = (in_ch * kernel * kernel) as f64;
            Layer::TransposedConv2d {
                weight: Tensor::randn(&[in_ch, out_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
                bias: Tensor::zeros(&[out_ch]),
                stride,
                padding,
            }
        }
        LayerSpec::Dense { input, output } => Layer::Dense {
            weight: Tensor::randn(&[input, output], (2.0 / input as f64).sqrt(), rng),
            bias: Tensor::zeros(&[output]),
        },
        LayerSpec::MaxPool2d { window, stride } => Layer::MaxPool2d { window, stride },
        LayerSpec::Activation { function } => Layer::Activation(function),
        LayerSpec::Flatten => Layer::Flatten,
    }
}

/// Anything that maps a pixel batch to class logits, both as plain values
/// and as a differentiable tape computation.
pub trait Classifier: Send + Sync {
    /// Forward-only logits; never records gradients.
    fn logits(&self, x: &Tensor) -> Result<Tensor>;

    /// Gradient-capable forward on the caller's tape.
    fn logits_tracked<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>>;

    fn num_classes(&self) -> usize;

    /// Argmax predictions; ties break to the lowest class index.
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        self.logits(x)?.argmax_rows()
    }
}

impl Classifier for Model {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_value(x)
    }

    fn logits_tracked<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.forward(tape, x)
    }

    fn num_classes(&self) -> usize {
        *self.output_shape.last().expect("model output shape")
    }
}

/// The whole classifier: a (typically pretrained, frozen) autoencoder in
/// front of a classifier. Attack gradients traverse both parts down to the
/// raw input.
#[derive(Clone, Debug)]
pub struct WholeClassifier {
    pub autoencoder: Model,
    pub classifier: Model,
}

/// Compose an autoencoder and a classifier; shapes must agree.
pub fn compose_aec(autoencoder: Model, classifier: Model) -> Result<WholeClassifier> {
    if autoencoder.output_shape() != classifier.input_shape() {
        return Err(CoreError::config(format!(
            "autoencoder output {:?} does not feed classifier input {:?}",
            autoencoder.output_shape(),
            classifier.input_shape()
        )));
    }
    Ok(WholeClassifier { autoencoder, classifier })
}

impl Classifier for WholeClassifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        Ok(self.logits_tracked(&tape, xv)?.value())
    }

    fn logits_tracked<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let recon = self.autoencoder.forward(tape, x)?;
        self.classifier.forward(tape, recon)
    }

    fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }
}

/// Shared encoder feeding a reconstruction head and a classification head.
/// Jointly training the two losses routes both gradients into the encoder.
#[derive(Clone, Debug)]
pub struct EncoderClassifier {
    pub encoder: Model,
    pub decoder: Model,
    pub head: Model,
}

/// Joint forward bindings for one training step.
pub struct JointForward<'t> {
    pub logits: Var<'t>,
    pub reconstruction: Var<'t>,
    pub encoder_params: Vec<Var<'t>>,
    pub decoder_params: Vec<Var<'t>>,
    pub head_params: Vec<Var<'t>>,
}

impl EncoderClassifier {
    pub fn new(encoder: Model, decoder: Model, head: Model) -> Result<Self> {
        if encoder.output_shape() != decoder.input_shape() {
            return Err(CoreError::config(format!(
                "encoder output {:?} does not feed decoder input {:?}",
                encoder.output_shape(),
                decoder.input_shape()
            )));
        }
        if encoder.output_shape() != head.input_shape() {
            return Err(CoreError::config(format!(
                "encoder output {:?} does not feed classification head input {:?}",
                encoder.output_shape(),
                head.input_shape()
            )));
        }
        Ok(EncoderClassifier { encoder, decoder, head })
    }

    /// One-tape forward through the encoder and both heads; the encoder
    /// parameters are bound once and shared by the two paths.
    pub fn forward_joint<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<JointForward<'t>> {
        let (latent, encoder_params) = self.encoder.forward_bound(tape, x)?;
        let (logits, head_params) = self.head.forward_bound(tape, latent)?;
        let (reconstruction, decoder_params) = self.decoder.forward_bound(tape, latent)?;
        Ok(JointForward { logits, reconstruction, encoder_params, decoder_params, head_params })
    }
}

impl Classifier for EncoderClassifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        Ok(self.logits_tracked(&tape, xv)?.value())
    }

    fn logits_tracked<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let latent = self.encoder.forward(tape, x)?;
        self.head.forward(tape, latent)
    }

    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }
}

/// Mean cross-entropy of `logits / temperature` against integer labels.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize], temperature: f64) -> Result<Var<'t>> {
    logits.cross_entropy(labels, temperature)
}

/// Mean squared reconstruction error over all elements.
pub fn l2_reconstruction<'t>(output: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    output.mse(target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn shape_inference_runs_at_construction() {
        let bad = vec![
            LayerSpec::Dense { input: 10, output: 4 },
            LayerSpec::Dense { input: 5, output: 2 }, // 4 != 5
        ];
        assert!(Model::new(&[10], bad, &mut rng()).is_err());
    }

    #[test]
    fn dense_stack_forward_shape() {
        let specs = vec![
            LayerSpec::Dense { input: 6, output: 4 },
            LayerSpec::Activation { function: Activation::Relu },
            LayerSpec::Dense { input: 4, output: 3 },
        ];
        let m = Model::new(&[6], specs, &mut rng()).unwrap();
        let x = Tensor::zeros(&[5, 6]);
        assert_eq!(m.forward_value(&x).unwrap().shape(), &[5, 3]);
        assert_eq!(m.num_classes(), 3);
    }

    #[test]
    fn frozen_model_binds_no_trainable_params() {
        let specs = vec![LayerSpec::Dense { input: 2, output: 2 }];
        let mut m = Model::new(&[2], specs, &mut rng()).unwrap();
        m.set_frozen(true);
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2]), false);
        let (_, vars) = m.forward_bound(&tape, x).unwrap();
        assert!(vars.iter().all(|v| !v.requires_grad()));
    }

    #[test]
    fn compose_rejects_shape_mismatch() {
        let ae = Model::new(
            &[4],
            vec![LayerSpec::Dense { input: 4, output: 4 }],
            &mut rng(),
        )
        .unwrap();
        let c = Model::new(
            &[5],
            vec![LayerSpec::Dense { input: 5, output: 2 }],
            &mut rng(),
        )
        .unwrap();
        assert!(compose_aec(ae, c).is_err());
    }
}
