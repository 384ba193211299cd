//! Toy-scale network definitions: descriptor encoder, U-Net style generator
//! and patch-grid discriminator, all built from the tensor-core op set.

use crate::tensor::{adam_step, AdamConfig, Parameter, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("unknown layer '{0}' in descriptor spec")]
    UnknownLayer(String),
    #[error("input spatial size {h}x{w} not divisible by {div}")]
    IndivisibleInput { h: usize, w: usize, div: usize },
    #[error("checkpoint is missing parameter '{0}'")]
    MissingParameter(String),
    #[error("parameter '{name}' has shape {got:?}, expected {want:?}")]
    ShapeMismatch { name: String, got: Vec<usize>, want: Vec<usize> },
}

/// Glorot-uniform kernel, zero bias.
fn conv_param(
    name: &str,
    kh: usize,
    kw: usize,
    ic: usize,
    oc: usize,
    rng: &mut ChaCha8Rng,
) -> (Parameter, Parameter) {
    let fan_in = (kh * kw * ic) as f32;
    let fan_out = (kh * kw * oc) as f32;
    let bound = (6.0 / (fan_in + fan_out)).sqrt();
    let data: Vec<f32> = (0..kh * kw * ic * oc)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    (
        Parameter::new(format!("{}.kernel", name), Tensor::new(vec![kh, kw, ic, oc], data)),
        Parameter::new(format!("{}.bias", name), Tensor::zeros(vec![oc])),
    )
}

struct ConvLayer {
    name: String,
    kernel: Parameter,
    bias: Parameter,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn new(
        name: &str,
        k: usize,
        ic: usize,
        oc: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (kernel, bias) = conv_param(name, k, k, ic, oc, rng);
        ConvLayer { name: name.to_string(), kernel, bias, stride, pad }
    }

    fn forward(&self, tape: &Tape<f32>, bound: &[Var], idx: &mut usize, x: Var) -> Var {
        let k = bound[*idx];
        let b = bound[*idx + 1];
        *idx += 2;
        tape.bias_add(tape.conv2d(x, k, self.stride, self.pad), b)
    }
}

/// Pooling applied to a feature map when assembling the descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    /// Channel-wise spatial maximum (maximum activation of convolutions).
    Mac,
    /// Channel-wise spatial mean.
    Avg,
    /// Flattened raw activations.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorSpec {
    pub entries: Vec<(String, Pooling)>,
    pub normalize_after_concat: bool,
}

impl Default for DescriptorSpec {
    fn default() -> Self {
        DescriptorSpec {
            entries: vec![
                ("block3".to_string(), Pooling::Mac),
                ("block4".to_string(), Pooling::Mac),
            ],
            normalize_after_concat: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // Stride 2 every other block; MAC over blocks 3 and 4 gives a
        // 128-dimensional descriptor.
        EncoderConfig {
            channels: vec![16, 32, 64, 64],
            strides: vec![1, 2, 1, 2],
            kernel: 3,
        }
    }
}

/// Convolutional embedding network with hookable per-block activations.
pub struct EncoderNet {
    pub config: EncoderConfig,
    blocks: Vec<ConvLayer>,
}

/// Per-block activations from an encoder forward pass.
pub struct EncoderActivations {
    pub blocks: Vec<(String, Var)>,
}

impl EncoderNet {
    pub fn new(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(config.channels.len(), config.strides.len());
        let mut blocks = Vec::new();
        let mut ic = 3;
        for (i, (&oc, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            let name = format!("block{}", i + 1);
            blocks.push(ConvLayer::new(&name, config.kernel, ic, oc, stride, config.kernel / 2, rng));
            ic = oc;
        }
        EncoderNet { config, blocks }
    }

    pub fn forward(&self, tape: &Tape<f32>, bound: &[Var], image: Var) -> EncoderActivations {
        let mut idx = 0;
        let mut x = image;
        let mut acts = Vec::new();
        for layer in &self.blocks {
            x = tape.relu(layer.forward(tape, bound, &mut idx, x));
            acts.push((layer.name.clone(), x));
        }
        EncoderActivations { blocks: acts }
    }

    /// Full descriptor pipeline: forward, pool per spec entry, concatenate in
    /// spec order, L2-normalize.
    pub fn encode(
        &self,
        tape: &Tape<f32>,
        bound: &[Var],
        image: Var,
        spec: &DescriptorSpec,
    ) -> Result<Var, NetworkError> {
        assert!(!spec.entries.is_empty(), "descriptor spec must select at least one layer");
        let acts = self.forward(tape, bound, image);
        let mut parts = Vec::new();
        for (layer, pooling) in &spec.entries {
            let &(_, act) = acts
                .blocks
                .iter()
                .find(|(name, _)| name == layer)
                .ok_or_else(|| NetworkError::UnknownLayer(layer.clone()))?;
            let pooled = match pooling {
                Pooling::Mac => tape.global_max_pool(act),
                Pooling::Avg => tape.global_avg_pool(act),
                Pooling::Direct => {
                    let s = tape.shape_of(act);
                    tape.reshape(act, vec![s[0], s[1] * s[2] * s[3]])
                }
            };
            parts.push(pooled);
        }
        let cat = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1) };
        Ok(tape.l2_normalize(cat, 1e-12))
    }

    /// Forward-only descriptor computation on a private tape.
    pub fn encode_images(
        &self,
        images: &Tensor<f32>,
        spec: &DescriptorSpec,
    ) -> Result<Tensor<f32>, NetworkError> {
        let tape = Tape::new();
        let bound = bind(self.params(), &tape);
        let input = tape.input(images.clone());
        let desc = self.encode(&tape, &bound, input, spec)?;
        Ok(tape.value(desc))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.blocks
            .iter()
            .flat_map(|l| [&l.kernel, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { channels: vec![16, 32, 64], kernel: 3 }
    }
}

/// U-Net style generator: stride-2 down path, nearest-upsample-and-conv up
/// path with skip concatenation at mirror depths, tanh output.
pub struct GeneratorNet {
    pub config: GeneratorConfig,
    down: Vec<ConvLayer>,
    up: Vec<ConvLayer>,
    out: ConvLayer,
}

impl GeneratorNet {
    pub fn new(config: GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let k = config.kernel;
        let mut down = Vec::new();
        let mut ic = 3;
        for (i, &oc) in config.channels.iter().enumerate() {
            down.push(ConvLayer::new(&format!("down{}", i + 1), k, ic, oc, 2, k / 2, rng));
            ic = oc;
        }
        let mut up = Vec::new();
        for i in (1..config.channels.len()).rev() {
            // Upsampled deeper features concatenated with the mirror skip.
            let in_c = ic + config.channels[i - 1];
            let oc = config.channels[i - 1];
            up.push(ConvLayer::new(&format!("up{}", i), k, in_c, oc, 1, k / 2, rng));
            ic = oc;
        }
        let out = ConvLayer::new("out", k, ic + 3, 3, 1, k / 2, rng);
        GeneratorNet { config, down, up, out }
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    /// (n,h,w,3) in [-1,1] -> (n,h,w,3) in (-1,1). Spatial dims must be
    /// divisible by 2^depth.
    pub fn forward(
        &self,
        tape: &Tape<f32>,
        bound: &[Var],
        image: Var,
    ) -> Result<Var, NetworkError> {
        let shape = tape.shape_of(image);
        let (h, w) = (shape[1], shape[2]);
        let div = 1 << self.depth();
        if h % div != 0 || w % div != 0 {
            return Err(NetworkError::IndivisibleInput { h, w, div });
        }
        let mut idx = 0;
        let mut x = image;
        let mut skips = Vec::new();
        for layer in &self.down {
            x = tape.leaky_relu(layer.forward(tape, bound, &mut idx, x), 0.2);
            skips.push(x);
        }
        for (i, layer) in self.up.iter().enumerate() {
            let skip = skips[self.down.len() - 2 - i];
            let upsampled = tape.nearest_upsample(x, 2);
            x = tape.relu(layer.forward(tape, bound, &mut idx, tape.concat(&[upsampled, skip], 3)));
        }
        let upsampled = tape.nearest_upsample(x, 2);
        let merged = tape.concat(&[upsampled, image], 3);
        Ok(tape.tanh(self.out.forward(tape, bound, &mut idx, merged)))
    }

    /// Forward-only translation on a private tape.
    pub fn translate(&self, images: &Tensor<f32>) -> Result<Tensor<f32>, NetworkError> {
        let tape = Tape::new();
        let bound = bind(self.params(), &tape);
        let input = tape.input(images.clone());
        let out = self.forward(&tape, &bound, input)?;
        Ok(tape.value(out))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.down
            .iter()
            .chain(&self.up)
            .chain(std::iter::once(&self.out))
            .flat_map(|l| [&l.kernel, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.down
            .iter_mut()
            .chain(self.up.iter_mut())
            .chain(std::iter::once(&mut self.out))
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: vec![16, 32, 64, 1],
            strides: vec![2, 2, 1, 1],
            kernel: 4,
        }
    }
}

/// Patch discriminator: stride-2 downsampling conv stack ending in a
/// 1-channel sigmoid grid. The receptive field stays below the image size,
/// so each output cell judges a patch.
pub struct DiscriminatorNet {
    pub config: DiscriminatorConfig,
    layers: Vec<ConvLayer>,
}

impl DiscriminatorNet {
    pub fn new(config: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(config.channels.len(), config.strides.len());
        assert_eq!(*config.channels.last().unwrap(), 1, "discriminator must end in 1 channel");
        let mut layers = Vec::new();
        let mut ic = 3;
        for (i, (&oc, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            layers.push(ConvLayer::new(&format!("conv{}", i + 1), config.kernel, ic, oc, stride, 0, rng));
            ic = oc;
        }
        DiscriminatorNet { config, layers }
    }

    /// (n,h,w,3) -> (n,h',w',1) probability grid.
    pub fn forward(&self, tape: &Tape<f32>, bound: &[Var], image: Var) -> Var {
        let mut idx = 0;
        let mut x = image;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, bound, &mut idx, x);
            if i + 1 < self.layers.len() {
                x = tape.leaky_relu(x, 0.2);
            }
        }
        tape.sigmoid(x)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| [&l.kernel, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }
}

/// Registers every parameter value as a tape input, in `params` order.
pub fn bind(params: Vec<&Parameter>, tape: &Tape<f32>) -> Vec<Var> {
    params.into_iter().map(|p| tape.input(p.value.clone())).collect()
}

/// Registers parameter values as tape constants: the network participates in
/// the forward pass but its parameters never receive gradients.
pub fn bind_const(params: Vec<&Parameter>, tape: &Tape<f32>) -> Vec<Var> {
    params.into_iter().map(|p| tape.constant(p.value.clone())).collect()
}

/// Applies one Adam step per parameter from the gradients of a backward pass.
/// Parameters without a gradient path are left untouched.
pub fn apply_grads(
    params: Vec<&mut Parameter>,
    bound: &[Var],
    grads: &crate::tensor::Gradients<f32>,
    cfg: &AdamConfig,
) {
    for (param, &var) in params.into_iter().zip(bound) {
        if let Some(g) = grads.get(var) {
            adam_step(param, g, cfg);
        }
    }
}

/// Named value tensors for checkpointing.
pub fn named_params(params: Vec<&Parameter>) -> Vec<(String, Tensor<f32>)> {
    params
        .into_iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Restores parameter values (not optimizer state) from a named list.
pub fn restore_params(
    params: Vec<&mut Parameter>,
    saved: &[(String, Tensor<f32>)],
) -> Result<(), NetworkError> {
    for param in params {
        let (_, value) = saved
            .iter()
            .find(|(name, _)| name == &param.name)
            .ok_or_else(|| NetworkError::MissingParameter(param.name.clone()))?;
        if value.shape() != param.value.shape() {
            return Err(NetworkError::ShapeMismatch {
                name: param.name.clone(),
                got: value.shape().to_vec(),
                want: param.value.shape().to_vec(),
            });
        }
        param.value = value.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_images(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let data: Vec<f32> = (0..n * size * size * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, size, size, 3], data)
    }

    #[test]
    fn descriptor_is_unit_norm_and_128_dim() {
        let mut r = rng();
        let enc = EncoderNet::new(EncoderConfig::default(), &mut r);
        let imgs = random_images(2, 64, &mut r);
        let d = enc.encode_images(&imgs, &DescriptorSpec::default()).unwrap();
        assert_eq!(d.shape(), &[2, 128]);
        for row in d.data().chunks(128) {
            let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm {}", norm);
        }
    }

    #[test]
    fn unknown_layer_is_an_error() {
        let mut r = rng();
        let enc = EncoderNet::new(EncoderConfig::default(), &mut r);
        let spec = DescriptorSpec {
            entries: vec![("block9".to_string(), Pooling::Mac)],
            normalize_after_concat: true,
        };
        let imgs = random_images(1, 64, &mut r);
        assert!(matches!(
            enc.encode_images(&imgs, &spec),
            Err(NetworkError::UnknownLayer(_))
        ));
    }

    #[test]
    fn mac_and_avg_pooling_definitions() {
        // 2x2x1 map [[1,2],[3,4]]: MAC pre-norm value 4, AVG 2.5.
        let tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_f64(vec![1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.value(tape.global_max_pool(x)).data(), &[4.0]);
        assert_eq!(tape.value(tape.global_avg_pool(x)).data(), &[2.5]);
    }

    #[test]
    fn mac_avg_invariant_to_spatial_permutation() {
        let tape = Tape::<f32>::new();
        let vals = [0.3f64, -1.0, 2.0, 0.7, 0.1, -0.4];
        let mut shuffled = vals;
        shuffled.reverse();
        let a = tape.input(Tensor::from_f64(vec![1, 2, 3, 1], &vals));
        let b = tape.input(Tensor::from_f64(vec![1, 2, 3, 1], &shuffled));
        assert_eq!(tape.value(tape.global_max_pool(a)).data(), tape.value(tape.global_max_pool(b)).data());
        assert_eq!(tape.value(tape.global_avg_pool(a)).data(), tape.value(tape.global_avg_pool(b)).data());
    }

    #[test]
    fn spec_permutation_permutes_descriptor_blocks() {
        let mut r = rng();
        let enc = EncoderNet::new(EncoderConfig::default(), &mut r);
        let imgs = random_images(1, 32, &mut r);
        let fwd = DescriptorSpec {
            entries: vec![("block3".into(), Pooling::Mac), ("block4".into(), Pooling::Avg)],
            normalize_after_concat: true,
        };
        let rev = DescriptorSpec {
            entries: vec![("block4".into(), Pooling::Avg), ("block3".into(), Pooling::Mac)],
            normalize_after_concat: true,
        };
        let a = enc.encode_images(&imgs, &fwd).unwrap();
        let b = enc.encode_images(&imgs, &rev).unwrap();
        let (a3, a4) = (&a.data()[..64], &a.data()[64..]);
        let (b4, b3) = (&b.data()[..64], &b.data()[64..]);
        for (x, y) in a3.iter().zip(b3).chain(a4.iter().zip(b4)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn generator_preserves_shape_and_tanh_range() {
        let mut r = rng();
        let gen = GeneratorNet::new(GeneratorConfig::default(), &mut r);
        for size in [16, 32, 64] {
            let imgs = random_images(1, size, &mut r);
            let out = gen.translate(&imgs).unwrap();
            assert_eq!(out.shape(), imgs.shape());
            assert!(out.data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn generator_rejects_indivisible_input() {
        let mut r = rng();
        let gen = GeneratorNet::new(GeneratorConfig::default(), &mut r);
        let imgs = random_images(1, 20, &mut r);
        assert!(matches!(
            gen.translate(&imgs),
            Err(NetworkError::IndivisibleInput { .. })
        ));
    }

    #[test]
    fn discriminator_grid_shape_and_range() {
        let mut r = rng();
        let disc = DiscriminatorNet::new(DiscriminatorConfig::default(), &mut r);
        let imgs = random_images(2, 64, &mut r);
        let tape = Tape::new();
        let bound = bind(disc.params(), &tape);
        let input = tape.input(imgs.clone());
        let grid = tape.value(disc.forward(&tape, &bound, input));
        // 64 -> 31 -> 14 -> 11 -> 8 with 4x4 kernels, strides 2,2,1,1, no padding.
        assert_eq!(grid.shape(), &[2, 8, 8, 1]);
        assert!(grid.data().iter().all(|&v| v > 0.0 && v < 1.0));

        // Determinism across two forward passes.
        let tape2 = Tape::new();
        let bound2 = bind(disc.params(), &tape2);
        let input2 = tape2.input(imgs);
        let grid2 = tape2.value(disc.forward(&tape2, &bound2, input2));
        assert_eq!(grid, grid2);
    }

    #[test]
    fn gradients_reach_every_layer() {
        use crate::losses;
        let mut r = rng();
        let enc = EncoderNet::new(EncoderConfig::default(), &mut r);
        let gen = GeneratorNet::new(GeneratorConfig::default(), &mut r);
        let disc = DiscriminatorNet::new(DiscriminatorConfig::default(), &mut r);
        let imgs = random_images(2, 64, &mut r);
        let imgs_b = random_images(2, 64, &mut r);

        // Discriminator loss reaches all discriminator layers.
        let tape = Tape::new();
        let db = bind(disc.params(), &tape);
        let gb = bind(gen.params(), &tape);
        let real = tape.input(imgs_b.clone());
        let fake_src = tape.input(imgs.clone());
        let fake = tape.stop_gradient(gen.forward(&tape, &gb, fake_src).unwrap());
        let loss = losses::discriminator_loss(&tape, disc.forward(&tape, &db, real), disc.forward(&tape, &db, fake));
        let grads = tape.backward(loss);
        for (p, &v) in disc.params().iter().zip(&db) {
            let g = grads.get(v).expect("discriminator gradient missing");
            assert!(g.data().iter().any(|&x| x != 0.0), "zero grad for {}", p.name);
        }

        // Generator loss reaches all generator layers.
        let tape = Tape::new();
        let gb = bind(gen.params(), &tape);
        let db = bind(disc.params(), &tape);
        let eb = bind(enc.params(), &tape);
        let input = tape.input(imgs.clone());
        let g_out = gen.forward(&tape, &gb, input).unwrap();
        let d_fake = disc.forward(&tape, &db, g_out);
        let spec = DescriptorSpec::default();
        let e_p = enc.encode(&tape, &eb, input, &spec).unwrap();
        let e_g = enc.encode(&tape, &eb, g_out, &spec).unwrap();
        let gl = losses::generator_loss(&tape, d_fake, input, g_out, e_p, e_g, &LossWeightsDefault::default());
        let grads = tape.backward(gl.total);
        for (p, &v) in gen.params().iter().zip(&gb) {
            let g = grads.get(v).expect("generator gradient missing");
            assert!(g.data().iter().any(|&x| x != 0.0), "zero grad for {}", p.name);
        }

        // Encoder loss reaches all encoder layers.
        let tape = Tape::new();
        let eb = bind(enc.params(), &tape);
        let a = tape.input(imgs.clone());
        let p_in = tape.input(imgs_b.clone());
        let n_in = tape.input(random_images(2, 64, &mut r));
        let e_a = enc.encode(&tape, &eb, a, &spec).unwrap();
        let e_p = enc.encode(&tape, &eb, p_in, &spec).unwrap();
        let e_n = enc.encode(&tape, &eb, n_in, &spec).unwrap();
        let loss = losses::encoder_loss(&tape, e_a, e_p, e_n, &[0.3, 0.3]);
        let grads = tape.backward(loss);
        for (p, &v) in enc.params().iter().zip(&eb) {
            let g = grads.get(v).expect("encoder gradient missing");
            assert!(g.data().iter().any(|&x| x != 0.0), "zero grad for {}", p.name);
        }
    }

    use crate::losses::LossWeights as LossWeightsDefault;

    #[test]
    fn restore_roundtrip() {
        let mut r = rng();
        let mut enc = EncoderNet::new(EncoderConfig::default(), &mut r);
        let saved = named_params(enc.params());
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let mut enc2 = EncoderNet::new(EncoderConfig::default(), &mut r2);
        restore_params(enc2.params_mut(), &saved).unwrap();
        assert_eq!(named_params(enc2.params()), saved);
        // Missing parameter is an error.
        assert!(matches!(
            restore_params(enc.params_mut(), &saved[..1]),
            Err(NetworkError::MissingParameter(_))
        ));
    }
}
