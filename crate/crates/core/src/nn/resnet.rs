//! Residual network built from basic (two 3×3 convolution) blocks.
//!
//! Tensor names follow the torchvision convention (`layer2.0.downsample.1.weight`)
//! so converted ImageNet checkpoints load directly as backbones.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use thiserror::Error;

use super::layers::{relu_backward, relu_inplace, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, MaxPool2d};
use super::{Act, NamedTensor, NamedTensorMut, Param};

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("malformed weights file: {0}")]
    Format(String),
    #[error("tensor `{0}` missing from weights")]
    Missing(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetSpec {
    pub blocks: [usize; 4],
    pub widths: [usize; 4],
    pub num_classes: usize,
}

impl ResNetSpec {
    pub const RESIDUAL_34: ResNetSpec = ResNetSpec {
        blocks: [3, 4, 6, 3],
        widths: [64, 128, 256, 512],
        num_classes: 2,
    };

    /// Known architecture ids: `residual-34`, `residual-18`, and the
    /// narrow single-block `residual-tiny` used for fast tests.
    pub fn from_architecture_id(id: &str) -> Option<ResNetSpec> {
        match id {
            "residual-34" => Some(Self::RESIDUAL_34),
            "residual-18" => Some(ResNetSpec {
                blocks: [2, 2, 2, 2],
                ..Self::RESIDUAL_34
            }),
            "residual-tiny" => Some(ResNetSpec {
                blocks: [1, 1, 1, 1],
                widths: [8, 16, 32, 64],
                num_classes: 2,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    hidden: Option<Act>,
    output: Option<Act>,
}

impl BasicBlock {
    fn new(cin: usize, cout: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || cin != cout)
            .then(|| (Conv2d::new(cin, cout, 1, stride, 0), BatchNorm2d::new(cout)));
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1),
            bn2: BatchNorm2d::new(cout),
            downsample,
            hidden: None,
            output: None,
        }
    }

    fn forward(&self, x: &Act) -> Act {
        let mut h = self.bn1.forward(&self.conv1.forward(x));
        relu_inplace(&mut h);
        let mut out = self.bn2.forward(&self.conv2.forward(&h));
        match &self.downsample {
            Some((conv, bn)) => out.add_assign(&bn.forward(&conv.forward(x))),
            None => out.add_assign(x),
        }
        relu_inplace(&mut out);
        out
    }

    fn forward_train(&mut self, x: &Act) -> Act {
        let h = self.conv1.forward_train(x);
        let mut h = self.bn1.forward_train(&h);
        relu_inplace(&mut h);
        let out = self.conv2.forward_train(&h);
        let mut out = self.bn2.forward_train(&out);
        self.hidden = Some(h);
        match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward_train(x);
                out.add_assign(&bn.forward_train(&s));
            }
            None => out.add_assign(x),
        }
        relu_inplace(&mut out);
        self.output = Some(out.clone());
        out
    }

    fn backward(&mut self, dy: &Act) -> Act {
        let mut d = dy.clone();
        relu_backward(&mut d, self.output.as_ref().expect("block output cached"));
        let shortcut = match &mut self.downsample {
            Some((conv, bn)) => {
                let ds = bn.backward(&d);
                conv.backward(&ds, true).expect("input grad")
            }
            None => d.clone(),
        };
        let dh = self.bn2.backward(&d);
        let mut dh = self.conv2.backward(&dh, true).expect("input grad");
        relu_backward(&mut dh, self.hidden.as_ref().expect("block hidden cached"));
        let dh = self.bn1.backward(&dh);
        let mut dx = self.conv1.backward(&dh, true).expect("input grad");
        dx.add_assign(&shortcut);
        self.hidden = None;
        self.output = None;
        dx
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v = vec![&mut self.conv1, &mut self.conv2];
        if let Some((c, _)) = &mut self.downsample {
            v.push(c);
        }
        v
    }
}

/// Named references into the network, in a fixed order.
enum Slot<'a> {
    Conv(&'a Conv2d),
    Bn(&'a BatchNorm2d),
    Fc(&'a Linear),
}

enum SlotMut<'a> {
    Conv(&'a mut Conv2d),
    Bn(&'a mut BatchNorm2d),
    Fc(&'a mut Linear),
}

#[derive(Debug, Clone)]
pub struct ResNet {
    pub spec: ResNetSpec,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    stem_output: Option<Act>,
    maxpool: MaxPool2d,
    layers: Vec<Vec<BasicBlock>>,
    pool: GlobalAvgPool,
    fc: Linear,
}

impl ResNet {
    /// Builds the network with zeroed weights; call [`ResNet::init`] or load weights.
    pub fn new(spec: ResNetSpec) -> Self {
        let mut layers = Vec::with_capacity(4);
        let mut cin = spec.widths[0];
        for (stage, (&n, &width)) in spec.blocks.iter().zip(&spec.widths).enumerate() {
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(cin, width, stride));
                cin = width;
            }
            layers.push(blocks);
        }
        Self {
            spec,
            conv1: Conv2d::new(3, spec.widths[0], 7, 2, 3),
            bn1: BatchNorm2d::new(spec.widths[0]),
            stem_output: None,
            maxpool: MaxPool2d::new(3, 2, 1),
            layers,
            pool: GlobalAvgPool::default(),
            fc: Linear::new(spec.widths[3], spec.num_classes),
        }
    }

    /// He-normal (fan-out) convolutions, unit batch-norm, uniform head.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in self.convs_mut() {
            let fan_out = conv.out_channels * conv.kernel * conv.kernel;
            let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("finite std");
            for w in &mut conv.weight.value {
                *w = normal.sample(&mut rng) as f32;
            }
        }
        self.reset_head(rng.random());
    }

    /// Fresh classification head (uniform in ±1/√fan_in).
    pub fn reset_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (self.fc.in_features as f32).sqrt();
        for w in self
            .fc
            .weight
            .value
            .iter_mut()
            .chain(self.fc.bias.value.iter_mut())
        {
            *w = rng.random_range(-bound..bound);
        }
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v = vec![&mut self.conv1];
        for block in self.layers.iter_mut().flatten() {
            v.extend(block.convs_mut());
        }
        v
    }

    /// Final convolutional block output (the class-activation features).
    pub fn features(&self, x: &Act) -> Act {
        let mut h = self.bn1.forward(&self.conv1.forward(x));
        relu_inplace(&mut h);
        let mut h = self.maxpool.forward(&h);
        for block in self.layers.iter().flatten() {
            h = block.forward(&h);
        }
        h
    }

    /// Pooled features to logits, `[N][classes]`.
    pub fn head(&self, features: &Act) -> Vec<f32> {
        let pooled = GlobalAvgPool::forward(features);
        self.fc.forward(&pooled, features.n)
    }

    /// Classifier weights `[classes][channels]` of the head.
    pub fn head_weights(&self) -> &[f32] {
        &self.fc.weight.value
    }

    pub fn forward(&self, x: &Act) -> Vec<f32> {
        self.head(&self.features(x))
    }

    /// Training-mode forward (batch statistics, caches activations).
    pub fn forward_train(&mut self, x: &Act) -> Vec<f32> {
        let h = self.conv1.forward_train(x);
        let mut h = self.bn1.forward_train(&h);
        relu_inplace(&mut h);
        let pooled = self.maxpool.forward_train(&h);
        self.stem_output = Some(h);
        let mut h = pooled;
        for block in self.layers.iter_mut().flatten() {
            h = block.forward_train(&h);
        }
        let pooled = self.pool.forward_train(&h);
        self.fc.forward_train(&pooled, h.n)
    }

    pub fn backward(&mut self, dlogits: &[f32]) {
        let dpooled = self.fc.backward(dlogits);
        let mut d = self.pool.backward(&dpooled);
        for block in self.layers.iter_mut().flatten().rev() {
            d = block.backward(&d);
        }
        let mut d = self.maxpool.backward(&d);
        relu_backward(&mut d, self.stem_output.as_ref().expect("stem output cached"));
        self.stem_output = None;
        let d = self.bn1.backward(&d);
        self.conv1.backward(&d, false);
    }

    fn slots(&self) -> Vec<(String, Slot<'_>)> {
        let mut v = vec![
            ("conv1".to_string(), Slot::Conv(&self.conv1)),
            ("bn1".to_string(), Slot::Bn(&self.bn1)),
        ];
        for (i, stage) in self.layers.iter().enumerate() {
            for (j, b) in stage.iter().enumerate() {
                let p = format!("layer{}.{}", i + 1, j);
                v.push((format!("{p}.conv1"), Slot::Conv(&b.conv1)));
                v.push((format!("{p}.bn1"), Slot::Bn(&b.bn1)));
                v.push((format!("{p}.conv2"), Slot::Conv(&b.conv2)));
                v.push((format!("{p}.bn2"), Slot::Bn(&b.bn2)));
                if let Some((c, n)) = &b.downsample {
                    v.push((format!("{p}.downsample.0"), Slot::Conv(c)));
                    v.push((format!("{p}.downsample.1"), Slot::Bn(n)));
                }
            }
        }
        v.push(("fc".to_string(), Slot::Fc(&self.fc)));
        v
    }

    fn slots_mut(&mut self) -> Vec<(String, SlotMut<'_>)> {
        let mut v = vec![
            ("conv1".to_string(), SlotMut::Conv(&mut self.conv1)),
            ("bn1".to_string(), SlotMut::Bn(&mut self.bn1)),
        ];
        for (i, stage) in self.layers.iter_mut().enumerate() {
            for (j, b) in stage.iter_mut().enumerate() {
                let p = format!("layer{}.{}", i + 1, j);
                v.push((format!("{p}.conv1"), SlotMut::Conv(&mut b.conv1)));
                v.push((format!("{p}.bn1"), SlotMut::Bn(&mut b.bn1)));
                v.push((format!("{p}.conv2"), SlotMut::Conv(&mut b.conv2)));
                v.push((format!("{p}.bn2"), SlotMut::Bn(&mut b.bn2)));
                if let Some((c, n)) = &mut b.downsample {
                    v.push((format!("{p}.downsample.0"), SlotMut::Conv(c)));
                    v.push((format!("{p}.downsample.1"), SlotMut::Bn(n)));
                }
            }
        }
        v.push(("fc".to_string(), SlotMut::Fc(&mut self.fc)));
        v
    }

    /// Trainable parameters in a stable order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for (_, slot) in self.slots_mut() {
            match slot {
                SlotMut::Conv(c) => out.push(&mut c.weight),
                SlotMut::Bn(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                SlotMut::Fc(f) => {
                    out.push(&mut f.weight);
                    out.push(&mut f.bias);
                }
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| !t.name.contains("running_"))
            .map(|t| t.data.len())
            .sum()
    }

    /// Every parameter and buffer under its torchvision-style name.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        for (name, slot) in self.slots() {
            let items: Vec<(&str, Vec<usize>, &[f32])> = match slot {
                Slot::Conv(c) => vec![("weight", c.weight.shape.clone(), &c.weight.value)],
                Slot::Bn(b) => vec![
                    ("weight", vec![b.channels], &b.gamma.value),
                    ("bias", vec![b.channels], &b.beta.value),
                    ("running_mean", vec![b.channels], &b.running_mean),
                    ("running_var", vec![b.channels], &b.running_var),
                ],
                Slot::Fc(f) => vec![
                    ("weight", f.weight.shape.clone(), &f.weight.value),
                    ("bias", f.bias.shape.clone(), &f.bias.value),
                ],
            };
            for (suffix, shape, data) in items {
                out.push(NamedTensor {
                    name: format!("{name}.{suffix}"),
                    shape,
                    data,
                });
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<NamedTensorMut<'_>> {
        let mut out = Vec::new();
        for (name, slot) in self.slots_mut() {
            let mut items: Vec<(&str, Vec<usize>, &mut [f32])> = Vec::new();
            match slot {
                SlotMut::Conv(c) => items.push(("weight", c.weight.shape.clone(), &mut c.weight.value)),
                SlotMut::Bn(b) => {
                    let ch = b.channels;
                    items.push(("weight", vec![ch], &mut b.gamma.value));
                    items.push(("bias", vec![ch], &mut b.beta.value));
                    items.push(("running_mean", vec![ch], &mut b.running_mean));
                    items.push(("running_var", vec![ch], &mut b.running_var));
                }
                SlotMut::Fc(f) => {
                    items.push(("weight", f.weight.shape.clone(), &mut f.weight.value));
                    items.push(("bias", f.bias.shape.clone(), &mut f.bias.value));
                }
            }
            for (suffix, shape, data) in items {
                out.push(NamedTensorMut {
                    name: format!("{name}.{suffix}"),
                    shape,
                    data,
                });
            }
        }
        out
    }

    /// Serializes all tensors as little-endian f32 safetensors.
    pub fn to_safetensors(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let bytes: Vec<Vec<u8>> = tensors
            .iter()
            .map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let views: Vec<(String, TensorView<'_>)> = tensors
            .iter()
            .zip(&bytes)
            .map(|(t, b)| {
                let view = TensorView::new(Dtype::F32, t.shape.clone(), b).expect("shape matches data");
                (t.name.clone(), view)
            })
            .collect();
        safetensors::serialize(views, &None).expect("in-memory serialization")
    }

    /// Loads tensors from safetensors bytes. With `include_head == false` the
    /// `fc.*` tensors are neither required nor read.
    pub fn load_safetensors(&mut self, bytes: &[u8], include_head: bool) -> Result<(), WeightsError> {
        let file = SafeTensors::deserialize(bytes).map_err(|e| WeightsError::Format(e.to_string()))?;
        let available: HashMap<String, TensorView<'_>> = file.tensors().into_iter().collect();
        for slot in self.tensors_mut() {
            if !include_head && slot.name.starts_with("fc.") {
                continue;
            }
            let view = available
                .get(&slot.name)
                .ok_or_else(|| WeightsError::Missing(slot.name.clone()))?;
            if view.shape() != slot.shape.as_slice() {
                return Err(WeightsError::Shape {
                    name: slot.name.clone(),
                    expected: slot.shape.clone(),
                    found: view.shape().to_vec(),
                });
            }
            if view.dtype() != Dtype::F32 {
                return Err(WeightsError::Format(format!(
                    "{} is {:?}, expected F32",
                    slot.name,
                    view.dtype()
                )));
            }
            for (dst, chunk) in slot.data.iter_mut().zip(view.data().chunks_exact(4)) {
                *dst = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax_cross_entropy, AdamW};

    fn tiny(seed: u64) -> ResNet {
        let mut net = ResNet::new(ResNetSpec::from_architecture_id("residual-tiny").unwrap());
        net.init(seed);
        net
    }

    fn input(n: usize, side: usize, seed: u64) -> Act {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * n * side * side)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Act::from_data(3, n, side, side, data)
    }

    #[test]
    fn residual_34_has_the_reference_parameter_count() {
        // torchvision resnet34 with a 2-class head: 21,284,672 backbone + 1,026 head
        let net = ResNet::new(ResNetSpec::RESIDUAL_34);
        assert_eq!(net.parameter_count(), 21_284_672 + 1_026);
        let names: Vec<String> = net.tensors().into_iter().map(|t| t.name).collect();
        assert!(names.contains(&"layer3.0.downsample.1.running_var".to_string()));
        assert!(names.contains(&"layer4.2.conv2.weight".to_string()));
    }

    #[test]
    fn eval_forward_is_deterministic_and_shaped() {
        let net = tiny(1);
        let x = input(3, 32, 2);
        let a = net.forward(&x);
        assert_eq!(a.len(), 6);
        assert_eq!(a, net.forward(&x));
        let feats = net.features(&x);
        assert_eq!((feats.c, feats.n, feats.h, feats.w), (64, 3, 1, 1));
    }

    #[test]
    fn network_gradient_matches_finite_difference() {
        // 64 px keeps layer4 at 2×2; at 1×1 the batch statistics make the
        // loss too curved for central differences
        let mut net = tiny(3);
        let x = input(4, 64, 4);
        let targets = [0usize, 1, 1, 0];
        let weights = [1.0f32, 1.0];
        let logits = net.forward_train(&x);
        let (_, d) = softmax_cross_entropy(&logits, 2, &targets, &weights);
        net.zero_grad();
        let mut probe = net.clone();
        probe.forward_train(&x);
        probe.backward(&d);
        let loss_at = |net: &ResNet| {
            let mut n = net.clone();
            softmax_cross_entropy(&n.forward_train(&x), 2, &targets, &weights).0
        };
        // a few coordinates across depth: stem conv, a mid block, the head
        let picks = [(0usize, 5usize), (3, 7), (9, 3), (20, 7), (36, 11), (37, 1)];
        let base = net.clone();
        let analytic: Vec<Vec<f32>> = probe.params_mut().into_iter().map(|p| p.grad.clone()).collect();
        for &(pi, ei) in &picks {
            let eps = 3e-3f32;
            let mut plus = base.clone();
            plus.params_mut()[pi].value[ei] += eps;
            let mut minus = base.clone();
            minus.params_mut()[pi].value[ei] -= eps;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps as f64);
            let an = analytic[pi][ei] as f64;
            assert!(
                (fd - an).abs() <= 2e-3 + 0.05 * an.abs(),
                "param {pi}[{ei}]: fd {fd} analytic {an}"
            );
        }
    }

    #[test]
    fn one_small_step_does_not_increase_batch_loss() {
        let mut net = tiny(5);
        let x = input(8, 32, 6);
        let targets = [0usize, 1, 0, 1, 1, 0, 0, 1];
        let weights = [1.0f32, 1.0];
        let probe_loss = |net: &ResNet| {
            let mut n = net.clone();
            softmax_cross_entropy(&n.forward_train(&x), 2, &targets, &weights).0
        };
        let before = probe_loss(&net);
        net.zero_grad();
        let logits = net.forward_train(&x);
        let (_, d) = softmax_cross_entropy(&logits, 2, &targets, &weights);
        net.backward(&d);
        let mut opt = AdamW::default();
        opt.step(&mut net.params_mut(), 1e-4);
        let after = probe_loss(&net);
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn safetensors_round_trip_and_backbone_only_load() {
        let net = tiny(7);
        let bytes = net.to_safetensors();
        let mut other = ResNet::new(net.spec);
        other.load_safetensors(&bytes, true).unwrap();
        let x = input(1, 32, 8);
        assert_eq!(net.forward(&x), other.forward(&x));

        let mut backbone = tiny(9);
        let head_before = backbone.head_weights().to_vec();
        backbone.load_safetensors(&bytes, false).unwrap();
        assert_eq!(backbone.head_weights(), head_before.as_slice());

        let mut wrong = ResNet::new(ResNetSpec::from_architecture_id("residual-18").unwrap());
        assert!(matches!(
            wrong.load_safetensors(&bytes, true),
            Err(WeightsError::Shape { .. }) | Err(WeightsError::Missing(_))
        ));
        assert!(matches!(
            wrong.load_safetensors(b"junk", true),
            Err(WeightsError::Format(_))
        ));
    }
}
