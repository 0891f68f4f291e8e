//! ResNet construction: the 224x224 stem variant and reduced 32x32 variants,
//! with layer names following the usual dotted scheme (`layer2.0.downsample.0`
//! and so on) so reports line up across tools.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ledger::MemoryLedger;
use crate::model::{CompressionPolicy, Network};
use crate::ops::Conv2dSpec;
use crate::scalar::Scalar;
use crate::tape::ValueId;
use crate::tensor::{AllocCategory, Tensor};

/// Stage widths shared by all variants built here.
const IMAGENET_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const CIFAR8_WIDTHS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone)]
pub struct ResNetConfig {
    pub classes: usize,
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub policy: CompressionPolicy,
    pub seed: u64,
}

impl ResNetConfig {
    pub fn imagenet(classes: usize) -> Self {
        ResNetConfig {
            classes,
            input_channels: 3,
            input_hw: (224, 224),
            policy: CompressionPolicy::off(),
            seed: 0,
        }
    }

    pub fn cifar(classes: usize) -> Self {
        ResNetConfig {
            classes,
            input_channels: 3,
            input_hw: (32, 32),
            policy: CompressionPolicy::off(),
            seed: 0,
        }
    }
}

struct Builder<'a, S: Scalar> {
    net: Network<S>,
    rng: ChaCha8Rng,
    policy: &'a CompressionPolicy,
    ledger: &'a mut MemoryLedger,
}

impl<'a, S: Scalar> Builder<'a, S> {
    /// Kaiming fan-out normal init, the usual choice for ReLU conv stacks.
    fn conv_weight(&mut self, spec: &Conv2dSpec) -> Tensor<S> {
        let fan_out = spec.out_channels * spec.kernel.0 * spec.kernel.1;
        let std = (2.0 / fan_out as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let n: usize = spec.weight_shape().iter().product();
        let data = (0..n).map(|_| S::from_f64_lossy(normal.sample(&mut self.rng))).collect();
        Tensor::from_vec(spec.weight_shape().to_vec(), data, AllocCategory::Parameter)
    }

    fn conv(&mut self, name: &str, spec: Conv2dSpec, input: ValueId) -> ValueId {
        let weight = self.conv_weight(&spec);
        let policy = self.policy.resolve(name);
        self.net.add_conv(name, spec, policy, weight, None, input, self.ledger)
    }

    fn batchnorm(&mut self, name: &str, channels: usize, zero_gamma: bool, input: ValueId) -> ValueId {
        let gamma = if zero_gamma { S::zero() } else { S::one() };
        self.net.add_batchnorm(name, channels, gamma, input, self.ledger)
    }

    fn relu(&mut self, name: &str, input: ValueId) -> ValueId {
        self.net.add_node(name, crate::tape::OpKind::Relu, vec![input])
    }

    /// Basic residual block; becomes a downsample block when the skip path
    /// needs a 1x1 strided convolution to restore shapes.
    fn block(&mut self, prefix: &str, in_ch: usize, out_ch: usize, stride: usize, input: ValueId) -> ValueId {
        let spec1 = Conv2dSpec::new(in_ch, out_ch, (3, 3))
            .with_stride((stride, stride))
            .with_padding((1, 1));
        let c1 = self.conv(&format!("{prefix}.conv1"), spec1, input);
        let b1 = self.batchnorm(&format!("{prefix}.bn1"), out_ch, false, c1);
        let r1 = self.relu(&format!("{prefix}.relu1"), b1);
        let spec2 = Conv2dSpec::new(out_ch, out_ch, (3, 3)).with_padding((1, 1));
        let c2 = self.conv(&format!("{prefix}.conv2"), spec2, r1);
        // Unit gamma on the closing norm. Zero-init would silence every
        // block conv's weight gradient at step 0, which makes first-step
        // gradient comparisons degenerate.
        let b2 = self.batchnorm(&format!("{prefix}.bn2"), out_ch, false, c2);
        let skip = if stride != 1 || in_ch != out_ch {
            let ds_spec = Conv2dSpec::new(in_ch, out_ch, (1, 1)).with_stride((stride, stride));
            let ds = self.conv(&format!("{prefix}.downsample.0"), ds_spec, input);
            self.batchnorm(&format!("{prefix}.downsample.1"), out_ch, false, ds)
        } else {
            input
        };
        let sum = self.net.add_node(
            format!("{prefix}.add"),
            crate::tape::OpKind::Add,
            vec![b2, skip],
        );
        self.relu(&format!("{prefix}.relu2"), sum)
    }

    fn stages(&mut self, widths: &[usize], blocks: &[usize], stem_ch: usize, mut value: ValueId) -> ValueId {
        let mut in_ch = stem_ch;
        for (stage, (&width, &count)) in widths.iter().zip(blocks.iter()).enumerate() {
            for b in 0..count {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                value = self.block(&format!("layer{}.{b}", stage + 1), in_ch, width, stride, value);
                in_ch = width;
            }
        }
        value
    }

    fn classifier(&mut self, name: &str, features: usize, classes: usize, input: ValueId) -> ValueId {
        let gap = self.net.add_node("avgpool", crate::tape::OpKind::GlobalAvgPool, vec![input]);
        let bound = 1.0 / (features as f64).sqrt();
        let w: Vec<S> = (0..classes * features)
            .map(|_| S::from_f64_lossy(self.rng.gen_range(-bound..bound)))
            .collect();
        let b: Vec<S> = (0..classes).map(|_| S::from_f64_lossy(self.rng.gen_range(-bound..bound))).collect();
        self.net.add_linear(
            name,
            Tensor::from_vec(vec![classes, features], w, AllocCategory::Parameter),
            Some(Tensor::from_vec(vec![classes], b, AllocCategory::Parameter)),
            gap,
            self.ledger,
        )
    }
}

/// Standard 18-layer network: 7x7 stride-2 stem, max pool, four stages of two
/// basic blocks, global average pool, linear classifier.
pub fn build_resnet18<S: Scalar>(config: &ResNetConfig, ledger: &mut MemoryLedger) -> Result<Network<S>> {
    let mut b = Builder {
        net: Network::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        policy: &config.policy,
        ledger,
    };
    let stem_spec = Conv2dSpec::new(config.input_channels, 64, (7, 7))
        .with_stride((2, 2))
        .with_padding((3, 3));
    let c = b.conv("conv1", stem_spec, crate::model::INPUT_VALUE);
    let bn = b.batchnorm("bn1", 64, false, c);
    let r = b.relu("relu", bn);
    let mp = b.net.add_node(
        "maxpool",
        crate::tape::OpKind::MaxPool2d { kernel: (3, 3), stride: (2, 2), padding: (1, 1) },
        vec![r],
    );
    let body = b.stages(&IMAGENET_WIDTHS, &[2, 2, 2, 2], 64, mp);
    b.classifier("fc", 512, config.classes, body);
    let net = b.net;
    net.infer_value_shapes(1, (config.input_channels, config.input_hw.0, config.input_hw.1))?;
    Ok(net)
}

/// Reduced variants for 32x32 inputs: a 3x3 stem with no max pool. Depth 18
/// keeps the four ImageNet stages; depth 8 is the classic 16/32/64 layout
/// with one block per stage.
pub fn build_resnet_cifar<S: Scalar>(
    depth: usize,
    config: &ResNetConfig,
    ledger: &mut MemoryLedger,
) -> Result<Network<S>> {
    let (stem_ch, widths, blocks): (usize, &[usize], &[usize]) = match depth {
        8 => (16, &CIFAR8_WIDTHS, &[1, 1, 1]),
        18 => (64, &IMAGENET_WIDTHS, &[2, 2, 2, 2]),
        other => return Err(Error::InvalidArch(format!("unsupported CIFAR ResNet depth {other}"))),
    };
    let mut b = Builder {
        net: Network::new(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        policy: &config.policy,
        ledger,
    };
    let stem_spec = Conv2dSpec::new(config.input_channels, stem_ch, (3, 3)).with_padding((1, 1));
    let c = b.conv("conv1", stem_spec, crate::model::INPUT_VALUE);
    let bn = b.batchnorm("bn1", stem_ch, false, c);
    let r = b.relu("relu", bn);
    let body = b.stages(widths, blocks, stem_ch, r);
    b.classifier("fc", *widths.last().unwrap(), config.classes, body);
    let net = b.net;
    net.infer_value_shapes(1, (config.input_channels, config.input_hw.0, config.input_hw.1))?;
    Ok(net)
}

/// Architectures the tools know by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    ResNet18,
    ResNet18Cifar,
    ResNet8Cifar,
}

impl Arch {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "resnet18" => Ok(Arch::ResNet18),
            "resnet18c" => Ok(Arch::ResNet18Cifar),
            "resnet8c" => Ok(Arch::ResNet8Cifar),
            other => Err(Error::InvalidArch(format!(
                "unknown architecture '{other}' (expected resnet18, resnet18c, or resnet8c)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::ResNet18 => "resnet18",
            Arch::ResNet18Cifar => "resnet18c",
            Arch::ResNet8Cifar => "resnet8c",
        }
    }

    pub fn default_input_hw(self) -> (usize, usize) {
        match self {
            Arch::ResNet18 => (224, 224),
            _ => (32, 32),
        }
    }

    pub fn build<S: Scalar>(self, config: &ResNetConfig, ledger: &mut MemoryLedger) -> Result<Network<S>> {
        match self {
            Arch::ResNet18 => build_resnet18(config, ledger),
            Arch::ResNet18Cifar => build_resnet_cifar(18, config, ledger),
            Arch::ResNet8Cifar => build_resnet_cifar(8, config, ledger),
        }
    }
}
