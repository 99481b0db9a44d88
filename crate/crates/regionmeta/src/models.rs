//! The two model architectures: a stacked-conv classifier and a mini U-Net.
//!
//! Architectures are plain configs; weights live in a [`ParamSet`] that is
//! passed to `forward`, which keeps adaptation purely functional (clone,
//! update, evaluate) and lets several forward passes share one frozen set.

use crate::error::ModelError;
use crate::rng::Rng;
use crate::tensor::{
    batchnorm2d, concat_channels, conv2d, conv2d_1x1, linear, maxpool2d, upsample_nearest2,
    ParamSet, Tensor,
};

const BN_EPS: f64 = 1e-5;

/// Configuration of the stacked-conv classification network.
///
/// `depth` blocks of conv3x3 -> batchnorm -> ReLU -> maxpool2 halve the
/// spatial size down to 1x1, leaving a `width`-dimensional feature that a
/// final affine layer maps to `num_classes` logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub width: usize,
    pub depth: usize,
}

impl CnnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.width == 0 || self.depth == 0 {
            return Err(ModelError::Config(
                "channels, width, and depth must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let collapsed = self.input_size >> self.depth;
        if collapsed != 1 || self.input_size != (1 << self.depth) {
            return Err(ModelError::Config(format!(
                "input_size {} must equal 2^depth (depth {})",
                self.input_size, self.depth
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration.
    pub fn param_count(&self) -> usize {
        let (c, w, d, n) = (self.in_channels, self.width, self.depth, self.num_classes);
        (c * w * 9 + w) + (d - 1) * (w * w * 9 + w) + d * 2 * w + (w * n + n)
    }
}

/// The stacked-conv classifier.
#[derive(Debug, Clone)]
pub struct Cnn {
    cfg: CnnConfig,
}

impl Cnn {
    pub fn new(cfg: CnnConfig) -> Result<Cnn, ModelError> {
        cfg.validate()?;
        Ok(Cnn { cfg })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    /// Fresh parameters: conv/linear weights uniform in ±sqrt(1/fan_in),
    /// zero biases, gamma 1, beta 0. Deterministic in the seed.
    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = Rng::for_purpose(seed, "cnn-init");
        let mut entries = Vec::new();
        let mut in_ch = self.cfg.in_channels;
        for block in 0..self.cfg.depth {
            let w = self.cfg.width;
            entries.push((
                format!("conv{block}.weight"),
                uniform_fan_in(&[w, in_ch, 3, 3], in_ch * 9, &mut rng),
            ));
            entries.push((format!("conv{block}.bias"), Tensor::zeros(&[w])));
            entries.push((format!("bn{block}.gamma"), Tensor::ones(&[w])));
            entries.push((format!("bn{block}.beta"), Tensor::zeros(&[w])));
            in_ch = w;
        }
        entries.push((
            "fc.weight".into(),
            uniform_fan_in(
                &[self.cfg.num_classes, self.cfg.width],
                self.cfg.width,
                &mut rng,
            ),
        ));
        entries.push(("fc.bias".into(), Tensor::zeros(&[self.cfg.num_classes])));
        ParamSet::new(entries).expect("generated names are unique")
    }

    /// Logits [B, num_classes] for a batch [B, C, H, W].
    pub fn forward(&self, params: &ParamSet, batch: &Tensor) -> Result<Tensor, ModelError> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != self.cfg.input_size || s[3] != self.cfg.input_size {
            return Err(ModelError::Config(format!(
                "batch shape {:?} does not match config (channels {}, size {})",
                s, self.cfg.in_channels, self.cfg.input_size
            )));
        }
        let mut x = batch.clone();
        for block in 0..self.cfg.depth {
            let w = params.get(&format!("conv{block}.weight"))?;
            let b = params.get(&format!("conv{block}.bias"))?;
            let gamma = params.get(&format!("bn{block}.gamma"))?;
            let beta = params.get(&format!("bn{block}.beta"))?;
            x = conv2d(&x, w, b)?;
            x = batchnorm2d(&x, gamma, beta, BN_EPS)?;
            x = x.relu();
            x = maxpool2d(&x)?;
        }
        let batch_n = x.shape()[0];
        let feat = x.reshape(&[batch_n, self.cfg.width])?;
        Ok(linear(&feat, params.get("fc.weight")?, params.get("fc.bias")?)?)
    }
}

/// Configuration of the mini U-Net.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub levels: usize,
    pub base_width: usize,
}

impl UnetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels == 0 || self.base_width == 0 || self.levels == 0 {
            return Err(ModelError::Config(
                "channels, base width, and levels must be positive".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn level_width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Encoder-decoder segmentation net with skip connections. Upsampling is
/// nearest-neighbor x2 followed by a 3x3 conv.
#[derive(Debug, Clone)]
pub struct Unet {
    cfg: UnetConfig,
}

impl Unet {
    pub fn new(cfg: UnetConfig) -> Result<Unet, ModelError> {
        cfg.validate()?;
        Ok(Unet { cfg })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    pub fn init(&self, seed: u64) -> ParamSet {
        let mut rng = Rng::for_purpose(seed, "unet-init");
        let mut entries = Vec::new();
        let mut in_ch = self.cfg.in_channels;
        for level in 0..self.cfg.levels {
            let out_ch = self.cfg.level_width(level);
            push_conv_block(&mut entries, &format!("enc{level}"), in_ch, out_ch, &mut rng);
            in_ch = out_ch;
        }
        let bottleneck = self.cfg.level_width(self.cfg.levels);
        push_conv_block(&mut entries, "bottleneck", in_ch, bottleneck, &mut rng);
        let mut up_ch = bottleneck;
        for level in (0..self.cfg.levels).rev() {
            let skip_ch = self.cfg.level_width(level);
            push_conv_block(
                &mut entries,
                &format!("dec{level}"),
                up_ch + skip_ch,
                skip_ch,
                &mut rng,
            );
            up_ch = skip_ch;
        }
        entries.push((
            "head.weight".into(),
            uniform_fan_in(
                &[self.cfg.num_classes, self.cfg.base_width],
                self.cfg.base_width,
                &mut rng,
            ),
        ));
        entries.push(("head.bias".into(), Tensor::zeros(&[self.cfg.num_classes])));
        ParamSet::new(entries).expect("generated names are unique")
    }

    /// Per-pixel logits [B, num_classes, H, W] for a batch [B, C, H, W].
    pub fn forward(&self, params: &ParamSet, batch: &Tensor) -> Result<Tensor, ModelError> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(ModelError::Config(format!(
                "batch shape {:?} does not match config (channels {})",
                s, self.cfg.in_channels
            )));
        }
        let divisor = 1usize << self.cfg.levels;
        if s[2] % divisor != 0 || s[3] % divisor != 0 {
            return Err(ModelError::Config(format!(
                "input size {}x{} not divisible by 2^levels = {divisor}",
                s[2], s[3]
            )));
        }
        let mut x = batch.clone();
        let mut skips = Vec::with_capacity(self.cfg.levels);
        for level in 0..self.cfg.levels {
            x = apply_conv_block(params, &format!("enc{level}"), &x)?;
            skips.push(x.clone());
            x = maxpool2d(&x)?;
        }
        x = apply_conv_block(params, "bottleneck", &x)?;
        for level in (0..self.cfg.levels).rev() {
            x = upsample_nearest2(&x)?;
            x = concat_channels(&x, &skips[level])?;
            x = apply_conv_block(params, &format!("dec{level}"), &x)?;
        }
        Ok(conv2d_1x1(&x, params.get("head.weight")?, params.get("head.bias")?)?)
    }
}

fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

fn push_conv_block(
    entries: &mut Vec<(String, Tensor)>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    rng: &mut Rng,
) {
    entries.push((
        format!("{prefix}.conv.weight"),
        uniform_fan_in(&[out_ch, in_ch, 3, 3], in_ch * 9, rng),
    ));
    entries.push((format!("{prefix}.conv.bias"), Tensor::zeros(&[out_ch])));
    entries.push((format!("{prefix}.bn.gamma"), Tensor::ones(&[out_ch])));
    entries.push((format!("{prefix}.bn.beta"), Tensor::zeros(&[out_ch])));
}

fn apply_conv_block(params: &ParamSet, prefix: &str, x: &Tensor) -> Result<Tensor, ModelError> {
    let w = params.get(&format!("{prefix}.conv.weight"))?;
    let b = params.get(&format!("{prefix}.conv.bias"))?;
    let gamma = params.get(&format!("{prefix}.bn.gamma"))?;
    let beta = params.get(&format!("{prefix}.bn.beta"))?;
    let y = conv2d(x, w, b)?;
    let y = batchnorm2d(&y, gamma, beta, BN_EPS)?;
    Ok(y.relu())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gradient, softmax_cross_entropy};

    fn desk_cfg() -> CnnConfig {
        CnnConfig {
            in_channels: 3,
            num_classes: 4,
            input_size: 32,
            width: 16,
            depth: 5,
        }
    }

    #[test]
    fn paper_scale_parameter_count() {
        let cfg = CnnConfig {
            in_channels: 15,
            num_classes: 10,
            input_size: 128,
            width: 64,
            depth: 7,
        };
        assert_eq!(cfg.param_count(), 231_818);
        let cnn = Cnn::new(cfg).unwrap();
        let params = cnn.init(0);
        assert_eq!(params.flatten().len(), 231_818);
    }

    #[test]
    fn desk_scale_parameter_count_matches_closed_form() {
        let cfg = desk_cfg();
        let closed_form = (3 * 16 * 9 + 16) + 4 * (16 * 16 * 9 + 16) + 5 * 32 + (16 * 4 + 4);
        assert_eq!(cfg.param_count(), closed_form);
        let params = Cnn::new(cfg).unwrap().init(1);
        assert_eq!(params.flatten().len(), closed_form);
    }

    #[test]
    fn invalid_size_rejected() {
        let cfg = CnnConfig {
            input_size: 48,
            ..desk_cfg()
        };
        assert!(Cnn::new(cfg).is_err());
    }

    #[test]
    fn forward_on_zeros_is_finite() {
        let cnn = Cnn::new(CnnConfig {
            in_channels: 2,
            num_classes: 3,
            input_size: 8,
            width: 4,
            depth: 3,
        })
        .unwrap();
        let params = cnn.init(7);
        let x = Tensor::zeros(&[2, 2, 8, 8]);
        let logits = cnn.forward(&params, &x).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn init_is_deterministic() {
        let cnn = Cnn::new(desk_cfg()).unwrap();
        let a = cnn.init(42).flatten();
        let b = cnn.init(42).flatten();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn permuting_batch_permutes_logits() {
        let cnn = Cnn::new(CnnConfig {
            in_channels: 2,
            num_classes: 3,
            input_size: 8,
            width: 4,
            depth: 3,
        })
        .unwrap();
        let params = cnn.init(9);
        let mut rng = Rng::new(10);
        let a = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let b = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let ab = stack2(&a, &b);
        let ba = stack2(&b, &a);
        let l_ab = cnn.forward(&params, &ab).unwrap();
        let l_ba = cnn.forward(&params, &ba).unwrap();
        // Batch statistics are permutation-invariant up to summation order,
        // so rows swap identically to floating-point tolerance.
        for j in 0..3 {
            assert!((l_ab.data()[j] - l_ba.data()[3 + j]).abs() < 1e-9);
            assert!((l_ab.data()[3 + j] - l_ba.data()[j]).abs() < 1e-9);
        }
    }

    fn stack2(a: &Tensor, b: &Tensor) -> Tensor {
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let mut shape = a.shape().to_vec();
        shape[0] = 2;
        Tensor::from_vec(&shape, data).unwrap()
    }

    #[test]
    fn batching_consistent_without_batch_coupling() {
        // conv -> relu -> pool -> linear (no batchnorm): single-example
        // forward equals row 0 of a two-example batch, exactly.
        let mut rng = Rng::new(14);
        let w = Tensor::randn(&[3, 2, 3, 3], &mut rng);
        let bias = Tensor::randn(&[3], &mut rng);
        let fw = Tensor::randn(&[4, 3], &mut rng);
        let fb = Tensor::randn(&[4], &mut rng);
        let a = Tensor::randn(&[1, 2, 2, 2], &mut rng);
        let b = Tensor::randn(&[1, 2, 2, 2], &mut rng);
        let run = |x: &Tensor| {
            let y = conv2d(x, &w, &bias).unwrap();
            let y = y.relu();
            let y = maxpool2d(&y).unwrap();
            let n = y.shape()[0];
            linear(&y.reshape(&[n, 3]).unwrap(), &fw, &fb).unwrap()
        };
        let single = run(&a);
        let both = run(&stack2(&a, &b));
        for j in 0..4 {
            assert_eq!(single.data()[j].to_bits(), both.data()[j].to_bits());
        }
    }

    #[test]
    fn cnn_matches_layerwise_composition() {
        let cnn = Cnn::new(CnnConfig {
            in_channels: 3,
            num_classes: 4,
            input_size: 8,
            width: 4,
            depth: 3,
        })
        .unwrap();
        let params = cnn.init(21);
        let mut rng = Rng::new(22);
        let x = Tensor::randn(&[1, 3, 8, 8], &mut rng);
        let got = cnn.forward(&params, &x).unwrap();

        let mut y = x;
        for blk in 0..3 {
            y = conv2d(
                &y,
                params.get(&format!("conv{blk}.weight")).unwrap(),
                params.get(&format!("conv{blk}.bias")).unwrap(),
            )
            .unwrap();
            y = batchnorm2d(
                &y,
                params.get(&format!("bn{blk}.gamma")).unwrap(),
                params.get(&format!("bn{blk}.beta")).unwrap(),
                1e-5,
            )
            .unwrap();
            y = y.relu();
            y = maxpool2d(&y).unwrap();
        }
        let want = linear(
            &y.reshape(&[1, 4]).unwrap(),
            params.get("fc.weight").unwrap(),
            params.get("fc.bias").unwrap(),
        )
        .unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unet_preserves_spatial_shape() {
        let unet = Unet::new(UnetConfig {
            in_channels: 3,
            num_classes: 4,
            levels: 2,
            base_width: 8,
        })
        .unwrap();
        let params = unet.init(3);
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[2, 3, 32, 32], &mut rng);
        let logits = unet.forward(&params, &x).unwrap();
        assert_eq!(logits.shape(), &[2, 4, 32, 32]);
        assert!(logits.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unet_encoder_widths_double_per_level() {
        let unet = Unet::new(UnetConfig {
            in_channels: 3,
            num_classes: 4,
            levels: 3,
            base_width: 8,
        })
        .unwrap();
        let params = unet.init(5);
        for level in 0..3usize {
            let w = params.get(&format!("enc{level}.conv.weight")).unwrap();
            assert_eq!(w.shape()[0], 8 << level);
        }
    }

    #[test]
    fn unet_indivisible_input_rejected() {
        let unet = Unet::new(UnetConfig {
            in_channels: 1,
            num_classes: 2,
            levels: 3,
            base_width: 4,
        })
        .unwrap();
        let params = unet.init(6);
        let x = Tensor::zeros(&[1, 1, 12, 12]);
        assert!(unet.forward(&params, &x).is_err());
    }

    #[test]
    fn unet_pixel_loss_gradients_flow() {
        let unet = Unet::new(UnetConfig {
            in_channels: 2,
            num_classes: 3,
            levels: 2,
            base_width: 4,
        })
        .unwrap();
        let params = unet.init(8).leaves();
        let mut rng = Rng::new(9);
        let x = Tensor::randn(&[1, 2, 8, 8], &mut rng);
        let logits = unet.forward(&params, &x).unwrap();
        // [1,3,8,8] -> per-pixel rows [64, 3]
        let rows = logits
            .permute(&[0, 2, 3, 1])
            .unwrap()
            .reshape(&[64, 3])
            .unwrap();
        let labels: Vec<usize> = (0..64).map(|i| i % 3).collect();
        let loss = softmax_cross_entropy(&rows, &labels).unwrap();
        let grads = gradient(&loss, &params, false).unwrap();
        let mut some_nonzero = false;
        for (_, g) in grads.iter() {
            assert!(g.data().iter().all(|v| v.is_finite()));
            some_nonzero |= g.data().iter().any(|v| *v != 0.0);
        }
        assert!(some_nonzero);
    }
}
