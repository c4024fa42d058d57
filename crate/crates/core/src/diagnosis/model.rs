//! Residual convolutional classifier with a single-logit binary head.
//!
//! Parameter names follow the torchvision ResNet layout (`conv1`, `bn1`,
//! `layer1.0.conv1`, `layer2.0.downsample.0`, ...) so externally converted
//! backbone weights can be loaded by name. The classification head is named
//! `head` rather than `fc` so an ImageNet `fc` tensor is never picked up.

use candle_core::{DType, Device, Module, ModuleT, Result, Tensor, Var};
use candle_nn::{
    batch_norm, conv2d_no_bias, linear, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, Linear,
    VarBuilder, VarMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Supported backbones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// 18-layer residual network: four stages of two basic blocks, widths 64..512.
    Resnet18,
    /// Four stages of one basic block, widths 16..128. Used for fixtures and CPU smoke runs.
    ResnetMini,
}

impl Architecture {
    fn blocks(self) -> [usize; 4] {
        match self {
            Architecture::Resnet18 => [2, 2, 2, 2],
            Architecture::ResnetMini => [1, 1, 1, 1],
        }
    }

    fn widths(self) -> [usize; 4] {
        match self {
            Architecture::Resnet18 => [64, 128, 256, 512],
            Architecture::ResnetMini => [16, 32, 64, 128],
        }
    }

    pub fn feature_channels(self) -> usize {
        self.widths()[3]
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Resnet18 => "resnet18",
            Architecture::ResnetMini => "resnet-mini",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "resnet18" => Ok(Architecture::Resnet18),
            "resnet-mini" => Ok(Architecture::ResnetMini),
            other => Err(format!(
                "unknown architecture `{other}` (expected resnet18 or resnet-mini)"
            )),
        }
    }
}

fn bn_config() -> BatchNormConfig {
    BatchNormConfig {
        eps: 1e-5,
        remove_mean: true,
        affine: true,
        momentum: 0.1,
    }
}

#[derive(Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(vb: VarBuilder, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let conv3 = |s| Conv2dConfig {
            padding: 1,
            stride: s,
            ..Default::default()
        };
        let conv1 = conv2d_no_bias(c_in, c_out, 3, conv3(stride), vb.pp("conv1"))?;
        let bn1 = batch_norm(c_out, bn_config(), vb.pp("bn1"))?;
        let conv2 = conv2d_no_bias(c_out, c_out, 3, conv3(1), vb.pp("conv2"))?;
        let bn2 = batch_norm(c_out, bn_config(), vb.pp("bn2"))?;
        let downsample = if stride != 1 || c_in != c_out {
            let cfg = Conv2dConfig {
                stride,
                ..Default::default()
            };
            let conv = conv2d_no_bias(c_in, c_out, 1, cfg, vb.pp("downsample.0"))?;
            let bn = batch_norm(c_out, bn_config(), vb.pp("downsample.1"))?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let ys = self.conv1.forward(xs)?;
        let ys = self.bn1.forward_t(&ys, train)?.relu()?;
        let ys = self.conv2.forward(&ys)?;
        let ys = self.bn2.forward_t(&ys, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward_t(&conv.forward(xs)?, train)?,
            None => xs.clone(),
        };
        (ys + shortcut)?.relu()
    }
}

/// Binary residual classifier: backbone producing the last convolutional
/// feature map, then global average pooling and one logit.
#[derive(Debug)]
pub struct ResidualClassifier {
    arch: Architecture,
    conv1: Conv2d,
    bn1: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
    head: Linear,
}

impl ResidualClassifier {
    pub fn new(arch: Architecture, vb: VarBuilder) -> Result<Self> {
        let widths = arch.widths();
        let stem_cfg = Conv2dConfig {
            padding: 3,
            stride: 2,
            ..Default::default()
        };
        let conv1 = conv2d_no_bias(3, widths[0], 7, stem_cfg, vb.pp("conv1"))?;
        let bn1 = batch_norm(widths[0], bn_config(), vb.pp("bn1"))?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = widths[0];
        for (stage, (&n_blocks, &c_out)) in arch.blocks().iter().zip(widths.iter()).enumerate() {
            let vb_stage = vb.pp(format!("layer{}", stage + 1));
            let mut blocks = Vec::with_capacity(n_blocks);
            for b in 0..n_blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(vb_stage.pp(b.to_string()), c_in, c_out, stride)?);
                c_in = c_out;
            }
            stages.push(blocks);
        }
        let head = linear(widths[3], 1, vb.pp("head"))?;
        Ok(Self {
            arch,
            conv1,
            bn1,
            stages,
            head,
        })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    /// Output of the final convolutional block, `(batch, channels, h, w)`.
    pub fn features(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let ys = self.conv1.forward(xs)?;
        let ys = self.bn1.forward_t(&ys, train)?.relu()?;
        let mut ys = max_pool_3x3_s2(&ys)?;
        for stage in &self.stages {
            for block in stage {
                ys = block.forward_t(&ys, train)?;
            }
        }
        Ok(ys)
    }

    /// Global average pooling followed by the logit layer; returns `(batch,)`.
    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let pooled = features.mean(3)?.mean(2)?;
        self.head.forward(&pooled)?.squeeze(1)
    }

    pub fn logits(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let features = self.features(xs, train)?;
        self.head(&features)
    }
}

/// 3x3 max pooling, stride 2, padding 1, over non-negative input.
///
/// Built from shifted views and element-wise maxima because the overlapping
/// pooling kernel has no backward pass in candle.
fn max_pool_3x3_s2(xs: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = xs.dims4()?;
    // Zero padding is neutral here because the input is post-ReLU.
    let padded = xs.pad_with_zeros(2, 1, 1 + h % 2)?.pad_with_zeros(3, 1, 1 + w % 2)?;
    let (hp, wp) = (h + h % 2, w + w % 2);
    let mut pooled: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let view = padded.narrow(2, dy, hp)?.narrow(3, dx, wp)?;
            pooled = Some(match pooled {
                Some(p) => p.maximum(&view)?,
                None => view,
            });
        }
    }
    let pooled = pooled.expect("nine views");
    let (b, c, _, _) = pooled.dims4()?;
    pooled
        .reshape((b, c, hp / 2, 2, wp / 2, 2))?
        .narrow(3, 0, 1)?
        .narrow(5, 0, 1)?
        .reshape((b, c, hp / 2, wp / 2))
}

/// Builds a model whose parameters live in `varmap`, then re-initializes every
/// parameter from a seeded generator so construction is reproducible.
pub fn build_seeded(arch: Architecture, varmap: &VarMap, seed: u64, device: &Device) -> Result<ResidualClassifier> {
    let vb = VarBuilder::from_varmap(varmap, DType::F32, device);
    let model = ResidualClassifier::new(arch, vb)?;
    reseed(varmap, seed, device)?;
    Ok(model)
}

fn reseed(varmap: &VarMap, seed: u64, device: &Device) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = varmap.data().lock().expect("varmap lock poisoned");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var: &Var = &data[name];
        let shape = var.shape().clone();
        let numel = shape.elem_count();
        let values: Vec<f32> = if name.ends_with("running_mean") {
            vec![0.0; numel]
        } else if name.ends_with("running_var") {
            vec![1.0; numel]
        } else if shape.rank() >= 2 {
            // Kaiming-uniform over fan-in, ReLU gain.
            let fan_in: usize = shape.dims()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let bound = if name.starts_with("head") { bound / 2f32.sqrt() } else { bound };
            (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
        } else if name.ends_with("weight") {
            vec![1.0; numel]
        } else {
            vec![0.0; numel]
        };
        var.set(&Tensor::from_vec(values, shape, device)?)?;
    }
    Ok(())
}
