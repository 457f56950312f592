//! Network configuration and weight containers.
//!
//! These are plain data types shared by the ciphertext execution path and the
//! plaintext oracle; they carry no engine state.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Traditional,
    DepthwiseSeparable,
}

/// Dense 4-D convolution kernel, `w[o][i][kr][kc]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4 {
    pub c_o: usize,
    pub c_i: usize,
    pub f: usize,
    pub data: Vec<f64>,
}

impl Kernel4 {
    pub fn zeros(c_o: usize, c_i: usize, f: usize) -> Self {
        Self { c_o, c_i, f, data: vec![0.0; c_o * c_i * f * f] }
    }

    pub fn get(&self, o: usize, i: usize, kr: usize, kc: usize) -> f64 {
        self.data[((o * self.c_i + i) * self.f + kr) * self.f + kc]
    }

    pub fn set(&mut self, o: usize, i: usize, kr: usize, kc: usize, v: f64) {
        self.data[((o * self.c_i + i) * self.f + kr) * self.f + kc] = v;
    }

    /// Identity 1-channel kernel: center tap 1.
    pub fn dirac(f: usize) -> Self {
        let mut k = Self::zeros(1, 1, f);
        k.set(0, 0, f / 2, f / 2, 1.0);
        k
    }
}

/// Per-channel spatial kernel of a depthwise convolution, `d[ch][kr][kc]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthwiseKernel {
    pub c: usize,
    pub f: usize,
    pub data: Vec<f64>,
}

impl DepthwiseKernel {
    pub fn zeros(c: usize, f: usize) -> Self {
        Self { c, f, data: vec![0.0; c * f * f] }
    }

    pub fn get(&self, ch: usize, kr: usize, kc: usize) -> f64 {
        self.data[(ch * self.f + kr) * self.f + kc]
    }

    pub fn set(&mut self, ch: usize, kr: usize, kc: usize, v: f64) {
        self.data[(ch * self.f + kr) * self.f + kc] = v;
    }

    pub fn center_taps(c: usize, f: usize) -> Self {
        let mut k = Self::zeros(c, f);
        for ch in 0..c {
            k.set(ch, f / 2, f / 2, 1.0);
        }
        k
    }
}

/// Inference-mode batch-normalization statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BnParams {
    pub fn identity(c: usize) -> Self {
        // gamma = sqrt(var + eps) makes alpha exactly 1
        let eps = 1e-5;
        Self {
            gamma: vec![(1.0f64 + eps).sqrt(); c],
            beta: vec![0.0; c],
            mu: vec![0.0; c],
            var: vec![1.0; c],
            eps,
        }
    }

    /// alpha_o = gamma_o / sqrt(var_o + eps)
    pub fn alpha(&self, o: usize) -> f64 {
        self.gamma[o] / (self.var[o] + self.eps).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcWeights {
    /// classes x channels
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights {
    Traditional(Kernel4),
    Bn(BnParams),
    Dsc { depthwise: DepthwiseKernel, pointwise: Vec<Vec<f64>>, bn: BnParams },
    /// 1x1 strided shortcut kernel, `w[o][i]`.
    Downsample(Vec<Vec<f64>>),
    Fc(FcWeights),
}

/// Weights keyed by layer name ("init.conv", "s0.b1.conv2", "fc", ...).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetWeights {
    pub layers: BTreeMap<String, LayerWeights>,
}

impl NetWeights {
    pub fn get(&self, name: &str) -> Option<&LayerWeights> {
        self.layers.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, w: LayerWeights) {
        self.layers.insert(name.into(), w);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationCfg {
    pub degree: usize,
    pub interval_b: f64,
}

impl Default for ActivationCfg {
    fn default() -> Self {
        Self { degree: 5, interval_b: 8.0 }
    }
}

/// Architecture description of a residual network built for slot execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub name: String,
    pub input_channels: usize,
    pub input_side: usize,
    /// Channel width per stage; spatial side halves at each stage boundary.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Slot capacity, sized from the largest feature map of the network.
    pub f_max: usize,
    /// Convolution flavor per stage. The initial layer is always traditional.
    pub stage_kinds: Vec<ConvKind>,
    pub activation: ActivationCfg,
    pub classes: usize,
}

impl NetConfig {
    /// Rebuilt ResNet20: traditional convolution at the initial layer and
    /// stage 1, depthwise-separable ConvBN at stages 2 and 3.
    pub fn resnet20() -> Self {
        Self {
            name: "resnet20".into(),
            input_channels: 3,
            input_side: 32,
            widths: vec![16, 32, 64],
            blocks_per_stage: 3,
            f_max: 16384,
            stage_kinds: vec![
                ConvKind::Traditional,
                ConvKind::DepthwiseSeparable,
                ConvKind::DepthwiseSeparable,
            ],
            activation: ActivationCfg::default(),
            classes: 10,
        }
    }

    /// Quarter-width, half-resolution ResNet20 shape for desk-scale runs:
    /// channels 4/8/16 on 16x16 input, 1024 slots.
    pub fn resnet20_quarter() -> Self {
        Self {
            name: "resnet20-quarter".into(),
            input_channels: 3,
            input_side: 16,
            widths: vec![4, 8, 16],
            blocks_per_stage: 3,
            f_max: 1024,
            stage_kinds: vec![
                ConvKind::Traditional,
                ConvKind::DepthwiseSeparable,
                ConvKind::DepthwiseSeparable,
            ],
            activation: ActivationCfg::default(),
            classes: 10,
        }
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Feature-map side at a given stage (stage 0 keeps the input side).
    pub fn stage_side(&self, stage: usize) -> usize {
        self.input_side >> stage
    }

    /// Convolutions per stage (two per residual block).
    pub fn convs_per_stage(&self) -> usize {
        2 * self.blocks_per_stage
    }
}

fn uniform(rng: &mut impl Rng, scale: f64) -> f64 {
    rng.gen_range(-scale..scale)
}

fn random_bn(rng: &mut impl Rng, c: usize) -> BnParams {
    BnParams {
        gamma: (0..c).map(|_| rng.gen_range(0.8..1.2)).collect(),
        beta: (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        mu: (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        var: (0..c).map(|_| rng.gen_range(0.5..1.5)).collect(),
        eps: 1e-5,
    }
}

fn random_kernel4(rng: &mut impl Rng, c_o: usize, c_i: usize, f: usize) -> Kernel4 {
    let scale = 1.0 / ((f * f * c_i) as f64).sqrt();
    let data = (0..c_o * c_i * f * f).map(|_| uniform(rng, scale)).collect();
    Kernel4 { c_o, c_i, f, data }
}

fn random_pointwise(rng: &mut impl Rng, c_o: usize, c_i: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (c_i as f64).sqrt();
    (0..c_o).map(|_| (0..c_i).map(|_| uniform(rng, scale)).collect()).collect()
}

/// Deterministic random initialization for every layer the config declares.
/// Scales are fan-in normalized so activations stay inside the approximation
/// interval on random inputs.
pub fn random_weights(cfg: &NetConfig, seed: u64) -> NetWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = 3;
    let mut weights = NetWeights::default();

    weights.insert("init.conv", LayerWeights::Traditional(random_kernel4(&mut rng, cfg.widths[0], cfg.input_channels, f)));
    weights.insert("init.bn", LayerWeights::Bn(random_bn(&mut rng, cfg.widths[0])));

    for (stage, &width) in cfg.widths.iter().enumerate() {
        let kind = cfg.stage_kinds[stage];
        for block in 0..cfg.blocks_per_stage {
            let c_in_block = if block == 0 && stage > 0 { cfg.widths[stage - 1] } else { width };
            for (conv, c_i) in [(1, c_in_block), (2, width)] {
                let name = format!("s{stage}.b{block}.conv{conv}");
                match kind {
                    ConvKind::Traditional => {
                        weights.insert(name.clone(), LayerWeights::Traditional(random_kernel4(&mut rng, width, c_i, f)));
                        weights.insert(
                            format!("s{stage}.b{block}.bn{conv}"),
                            LayerWeights::Bn(random_bn(&mut rng, width)),
                        );
                    }
                    ConvKind::DepthwiseSeparable => {
                        let scale = 1.0 / (f as f64);
                        let mut depthwise = DepthwiseKernel::zeros(c_i, f);
                        for v in depthwise.data.iter_mut() {
                            *v = uniform(&mut rng, scale);
                        }
                        weights.insert(
                            name,
                            LayerWeights::Dsc {
                                depthwise,
                                pointwise: random_pointwise(&mut rng, width, c_i),
                                bn: random_bn(&mut rng, width),
                            },
                        );
                    }
                }
            }
            if block == 0 && stage > 0 {
                weights.insert(
                    format!("s{stage}.b0.down"),
                    LayerWeights::Downsample(random_pointwise(&mut rng, width, cfg.widths[stage - 1])),
                );
            }
        }
    }

    let c_last = *cfg.widths.last().unwrap();
    let scale = 1.0 / (c_last as f64).sqrt();
    weights.insert(
        "fc",
        LayerWeights::Fc(FcWeights {
            w: (0..cfg.classes).map(|_| (0..c_last).map(|_| uniform(&mut rng, scale)).collect()).collect(),
            b: (0..cfg.classes).map(|_| uniform(&mut rng, 0.1)).collect(),
        }),
    );

    weights
}
