//! Model builders for the experiment zoo.
//!
//! Channel plans that the source material leaves open are fixed here once:
//! the autoencoder uses a 1→16→32→64 encoder (pool after the first two
//! convs) and a mirrored 3-conv/2-transposed-conv decoder; upsampling uses
//! 2x2 stride-2 transposed convs so spatial sizes double exactly.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::{Activation, EncoderClassifier, LayerSpec, Model};

fn require_chw(input_shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if input_shape.len() != 3 {
        return Err(CoreError::config(format!(
            "{what} expects a CHW input shape, got {input_shape:?}"
        )));
    }
    Ok((input_shape[0], input_shape[1], input_shape[2]))
}

fn relu() -> LayerSpec {
    LayerSpec::Activation { function: Activation::Relu }
}

/// Shrink the final dense weights. The relu-gain init is right for hidden
/// layers but leaves untrained logits spread wide; classifiers should start
/// from a near-uniform softmax.
const OUTPUT_INIT_DAMP: f64 = 0.1;

fn damp_output_layer(model: &mut Model) -> Result<()> {
    let mut params = model.params_mut();
    let n = params.len();
    if n >= 2 {
        let (_, weight) = &mut params[n - 2];
        **weight = weight.scale(OUTPUT_INIT_DAMP)?;
    }
    Ok(())
}

/// LeNet5: two conv+pool stages and three dense stages ending in logits.
pub fn build_lenet5(
    num_classes: usize,
    input_shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    lenet5_like(num_classes, input_shape, 6, 16, 120, 84, rng)
}

/// LeNet5 with doubled channel widths; the independently structured
/// substitute used for transfer attacks.
pub fn build_lenet5_wide(
    num_classes: usize,
    input_shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    lenet5_like(num_classes, input_shape, 12, 32, 240, 168, rng)
}

fn lenet5_like(
    num_classes: usize,
    input_shape: &[usize],
    c1: usize,
    c2: usize,
    f1: usize,
    f2: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    let (c, h, w) = require_chw(input_shape, "lenet5")?;
    if h != 28 || w != 28 {
        return Err(CoreError::config(format!(
            "lenet5 is laid out for 28x28 inputs, got {h}x{w}"
        )));
    }
    // 28 -> conv5 pad2 -> 28 -> pool -> 14 -> conv5 -> 10 -> pool -> 5
    let flat = c2 * 5 * 5;
    let specs = vec![
        LayerSpec::Conv2d { in_ch: c, out_ch: c1, kernel: 5, stride: 1, padding: 2 },
        relu(),
        LayerSpec::MaxPool2d { window: 2, stride: 2 },
        LayerSpec::Conv2d { in_ch: c1, out_ch: c2, kernel: 5, stride: 1, padding: 0 },
        relu(),
        LayerSpec::MaxPool2d { window: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { input: flat, output: f1 },
        relu(),
        LayerSpec::Dense { input: f1, output: f2 },
        relu(),
        LayerSpec::Dense { input: f2, output: num_classes },
    ];
    let mut model = Model::new(input_shape, specs, rng)?;
    damp_output_layer(&mut model)?;
    Ok(model)
}

/// Encoder half of the autoencoder: 3 convs with 2 pools, CHW -> 64 x H/4 x W/4.
pub fn encoder_specs(in_ch: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_ch, out_ch: 16, kernel: 3, stride: 1, padding: 1 },
        relu(),
        LayerSpec::MaxPool2d { window: 2, stride: 2 },
        LayerSpec::Conv2d { in_ch: 16, out_ch: 32, kernel: 3, stride: 1, padding: 1 },
        relu(),
        LayerSpec::MaxPool2d { window: 2, stride: 2 },
        LayerSpec::Conv2d { in_ch: 32, out_ch: 64, kernel: 3, stride: 1, padding: 1 },
        relu(),
    ]
}

/// Decoder half: 3 convs with 2 transposed convs, 64 x H/4 x W/4 -> CHW,
/// sigmoid output onto [0, 1].
pub fn decoder_specs(out_ch: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv2d { in_ch: 64, out_ch: 32, kernel: 3, stride: 1, padding: 1 },
        relu(),
        LayerSpec::TransposedConv2d { in_ch: 32, out_ch: 16, kernel: 2, stride: 2, padding: 0 },
        relu(),
        LayerSpec::Conv2d { in_ch: 16, out_ch: 16, kernel: 3, stride: 1, padding: 1 },
        relu(),
        LayerSpec::TransposedConv2d { in_ch: 16, out_ch: 8, kernel: 2, stride: 2, padding: 0 },
        relu(),
        LayerSpec::Conv2d { in_ch: 8, out_ch, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Activation { function: Activation::Sigmoid },
    ]
}

/// Convolutional autoencoder whose output shape equals its input shape.
/// Spatial dims must be divisible by 4 (two 2x downsamplings).
pub fn build_autoencoder(input_shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Model> {
    let (c, h, w) = require_chw(input_shape, "autoencoder")?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(CoreError::config(format!(
            "autoencoder needs spatial dims divisible by 4, got {h}x{w}; pad the input first"
        )));
    }
    let mut specs = encoder_specs(c);
    specs.extend(decoder_specs(c));
    let model = Model::new(input_shape, specs, rng)?;
    debug_assert_eq!(model.output_shape(), input_shape);
    Ok(model)
}

/// Standalone encoder model (the feature extractor of the joint network).
pub fn build_encoder(input_shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Model> {
    let (c, h, w) = require_chw(input_shape, "encoder")?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(CoreError::config(format!(
            "encoder needs spatial dims divisible by 4, got {h}x{w}"
        )));
    }
    Model::new(input_shape, encoder_specs(c), rng)
}

/// Decoder head reconstructing `out_ch` channels from the latent block.
pub fn build_decoder(latent_shape: &[usize], out_ch: usize, rng: &mut ChaCha8Rng) -> Result<Model> {
    Model::new(latent_shape, decoder_specs(out_ch), rng)
}

/// Classification head on the flattened latent features.
pub fn build_latent_classifier(
    latent_shape: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    let flat: usize = latent_shape.iter().product();
    let specs = vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { input: flat, output: 128 },
        relu(),
        LayerSpec::Dense { input: 128, output: num_classes },
    ];
    let mut model = Model::new(latent_shape, specs, rng)?;
    damp_output_layer(&mut model)?;
    Ok(model)
}

/// The joint encoder/decoder/classifier network.
pub fn build_encoder_classifier(
    input_shape: &[usize],
    num_classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderClassifier> {
    let (c, _, _) = require_chw(input_shape, "encoder-classifier")?;
    let encoder = build_encoder(input_shape, rng)?;
    let latent = encoder.output_shape().to_vec();
    let decoder = build_decoder(&latent, c, rng)?;
    let head = build_latent_classifier(&latent, num_classes, rng)?;
    EncoderClassifier::new(encoder, decoder, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Classifier;
    use crate::Tensor;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn lenet5_logits_shape() {
        let m = build_lenet5(10, &[1, 28, 28], &mut rng()).unwrap();
        let x = Tensor::zeros(&[4, 1, 28, 28]);
        assert_eq!(m.logits(&x).unwrap().shape(), &[4, 10]);
    }

    #[test]
    fn lenet5_rejects_wrong_spatial() {
        assert!(build_lenet5(10, &[1, 32, 32], &mut rng()).is_err());
    }

    #[test]
    fn autoencoder_preserves_shape() {
        let m = build_autoencoder(&[1, 28, 28], &mut rng()).unwrap();
        let x = Tensor::rand_uniform(&[8, 1, 28, 28], 0.0, 1.0, &mut rng());
        let y = m.forward_value(&x).unwrap();
        assert_eq!(y.shape(), &[8, 1, 28, 28]);
        // final sigmoid keeps pixels in [0, 1]
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn autoencoder_rejects_indivisible_dims() {
        assert!(build_autoencoder(&[1, 30, 30], &mut rng()).is_err());
    }

    #[test]
    fn untrained_lenet_softmax_is_near_uniform() {
        // zero biases + symmetric init: max class prob stays small over
        // random inputs
        let m = build_lenet5(10, &[1, 28, 28], &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let x = Tensor::rand_uniform(&[1000, 1, 28, 28], 0.0, 1.0, &mut r);
        let probs = m.logits(&x).unwrap().softmax_rows().unwrap();
        let max = probs.data().iter().copied().fold(f64::MIN, f64::max);
        assert!(max < 0.2, "max softmax prob {max} not near uniform");
    }

    #[test]
    fn encoder_classifier_shapes() {
        let ec = build_encoder_classifier(&[1, 28, 28], 10, &mut rng()).unwrap();
        assert_eq!(ec.encoder.output_shape(), &[64, 7, 7]);
        let x = Tensor::zeros(&[2, 1, 28, 28]);
        assert_eq!(ec.logits(&x).unwrap().shape(), &[2, 10]);
    }
}
