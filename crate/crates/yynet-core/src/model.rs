//! The full two-branch network: configuration, presets, assembly, forward
//! pass, parameter enumeration and the internals reconciliation search that
//! recovers the published parameter counts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::blocks::{fuse, yin_input, BranchKind, BranchLayer, FusionFormula, Internals, YinMode};
use crate::error::{Error, Result};
use crate::nn::{dropout, gelu, global_avg_pool, Linear, ParamVisitor};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Full architectural description. The flattened [`Internals`] carry the
/// per-block knobs recovered by [`reconcile_internals`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub yy_start_channels: usize,
    pub sp_start_channels: usize,
    /// Channels added by each MBConv (0 for the CIFAR presets).
    pub channels_per_mbconv: usize,
    pub yy_layers: usize,
    pub sp_layers: usize,
    pub yy_mbconv_per_layer: usize,
    pub sp_mbconv_per_layer: usize,
    /// Additionally stride the first MBConv of the first single-path layer.
    pub extra_sp_stride2: bool,
    pub pre_classifier_neurons: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    pub fusion: FusionFormula,
    pub yin_mode: YinMode,
    pub dropout_rate: f64,
    #[serde(flatten)]
    pub internals: Internals,
}

impl ModelConfig {
    /// CIFAR-10 preset at a given starting width (16, 32 or 64 in the
    /// published variants).
    pub fn cifar10(width: usize) -> ModelConfig {
        ModelConfig {
            yy_start_channels: width,
            sp_start_channels: width,
            channels_per_mbconv: 0,
            yy_layers: 1,
            sp_layers: 1,
            yy_mbconv_per_layer: 3,
            sp_mbconv_per_layer: 2,
            extra_sp_stride2: true,
            pre_classifier_neurons: 40,
            num_classes: 10,
            input_resolution: 32,
            fusion: FusionFormula::APlusI,
            yin_mode: YinMode::FirstChannel,
            dropout_rate: 0.2,
            internals: Internals::default(),
        }
    }

    /// ImageNet preset (build/count/forward only; never trained here).
    pub fn imagenet() -> ModelConfig {
        ModelConfig {
            yy_start_channels: 16,
            sp_start_channels: 64,
            channels_per_mbconv: 2,
            yy_layers: 1,
            sp_layers: 4,
            yy_mbconv_per_layer: 3,
            sp_mbconv_per_layer: 2,
            extra_sp_stride2: false,
            pre_classifier_neurons: 500,
            num_classes: 1000,
            input_resolution: 224,
            fusion: FusionFormula::APlusI,
            yin_mode: YinMode::FirstChannel,
            dropout_rate: 0.2,
            internals: Internals::default(),
        }
    }

    /// Total number of stride-2 applications on the way to the head.
    pub fn total_halvings(&self) -> usize {
        self.yy_layers + self.sp_layers + usize::from(self.extra_sp_stride2)
    }

    /// Channel count at the fusion point (end of either branch).
    pub fn fusion_channels(&self) -> usize {
        self.yy_start_channels
            + self.yy_layers * self.yy_mbconv_per_layer * self.channels_per_mbconv
    }

    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.yy_start_channels, "yy_start_channels"),
            (self.sp_start_channels, "sp_start_channels"),
            (self.yy_layers, "yy_layers"),
            (self.sp_layers, "sp_layers"),
            (self.yy_mbconv_per_layer, "yy_mbconv_per_layer"),
            (self.sp_mbconv_per_layer, "sp_mbconv_per_layer"),
            (self.pre_classifier_neurons, "pre_classifier_neurons"),
            (self.num_classes, "num_classes"),
            (self.input_resolution, "input_resolution"),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        self.internals.validate()?;
        let halvings = self.total_halvings();
        let divisor = 1usize
            .checked_shl(halvings as u32)
            .ok_or_else(|| Error::config("too many stride-2 layers"))?;
        if self.input_resolution % divisor != 0 || self.input_resolution / divisor == 0 {
            return Err(Error::config(format!(
                "input_resolution {} not divisible into {} halvings",
                self.input_resolution, halvings
            )));
        }
        Ok(())
    }
}

/// The assembled network. Both branches consume the same network input
/// (there is no shared stem); the fusion gate feeds the single-path trunk
/// and the pooled head produces raw logits (softmax lives in the loss).
pub struct YYNet<E: Scalar> {
    pub config: ModelConfig,
    pub yin: Vec<BranchLayer<E>>,
    pub yang: Vec<BranchLayer<E>>,
    pub single_path: Vec<BranchLayer<E>>,
    pub pre_classifier: Linear<E>,
    pub classifier: Linear<E>,
}

impl<E: Scalar> YYNet<E> {
    /// Deterministically initialize from a config and a seed.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<YYNet<E>> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let internals = &config.internals;
        let per = config.channels_per_mbconv;
        let mut yin = Vec::with_capacity(config.yy_layers);
        let mut yang = Vec::with_capacity(config.yy_layers);
        for (kind, layers, first_cin) in
            [(BranchKind::Yin, &mut yin, 1), (BranchKind::Yang, &mut yang, 3)]
        {
            let mut cin = first_cin;
            let mut width = config.yy_start_channels;
            for i in 0..config.yy_layers {
                let layer = BranchLayer::new(
                    kind,
                    cin,
                    width,
                    per,
                    config.yy_mbconv_per_layer,
                    false,
                    internals,
                    &mut r,
                )?;
                cin = layer.out_channels;
                width = cin;
                let _ = i;
                layers.push(layer);
            }
        }
        let yin_out = yin.last().unwrap().out_channels;
        let yang_out = yang.last().unwrap().out_channels;
        if yin_out != yang_out {
            return Err(Error::config(format!(
                "branch widths diverge at fusion: {yin_out} vs {yang_out}"
            )));
        }

        let mut single_path = Vec::with_capacity(config.sp_layers);
        let mut cin = yin_out;
        for i in 0..config.sp_layers {
            // The first trunk layer's ResNet sub-block maps the fusion width
            // to sp_start_channels; later ones keep their input width.
            let width = if i == 0 { config.sp_start_channels } else { cin };
            let layer = BranchLayer::new(
                BranchKind::SinglePath,
                cin,
                width,
                per,
                config.sp_mbconv_per_layer,
                config.extra_sp_stride2 && i == 0,
                internals,
                &mut r,
            )?;
            cin = layer.out_channels;
            single_path.push(layer);
        }

        let pre_classifier = Linear::new(cin, config.pre_classifier_neurons, internals.head_bias, &mut r);
        let classifier = Linear::new(
            config.pre_classifier_neurons,
            config.num_classes,
            internals.head_bias,
            &mut r,
        );
        Ok(YYNet {
            config: config.clone(),
            yin,
            yang,
            single_path,
            pre_classifier,
            classifier,
        })
    }

    /// Forward pass to logits. `rng` drives dropout and is only consumed
    /// in train mode.
    pub fn forward(&self, x: &Tensor<E>, train: bool, r: &mut impl RngCore) -> Result<Tensor<E>> {
        let xs = x.shape();
        let res = self.config.input_resolution;
        if xs.len() != 4 || xs[1] != 3 || xs[2] != res || xs[3] != res {
            return Err(Error::shape(format!(
                "expected input (N,3,{res},{res}), got {xs:?}"
            )));
        }
        let mut a = yin_input(x, self.config.yin_mode)?;
        for layer in &self.yin {
            a = layer.forward(&a, train)?;
        }
        let mut i = x.clone();
        for layer in &self.yang {
            i = layer.forward(&i, train)?;
        }
        let mut h = fuse(&a, &i, self.config.fusion)?;
        for layer in &self.single_path {
            h = layer.forward(&h, train)?;
        }
        let pooled = global_avg_pool(&h)?;
        let hidden = gelu(&self.pre_classifier.forward(&pooled)?);
        let hidden = dropout(&hidden, self.config.dropout_rate, train, r)?;
        self.classifier.forward(&hidden)
    }

    /// Eval-mode forward (no dropout, running BN stats); pure function.
    pub fn forward_eval(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut r = rng::seeded(0);
        self.forward(x, false, &mut r)
    }

    /// Visit every trainable tensor with a stable dotted name.
    pub fn visit_params(&self, f: &mut ParamVisitor<'_, E>) {
        for (i, layer) in self.yin.iter().enumerate() {
            layer.visit_params(&format!("yin{i}"), f);
        }
        for (i, layer) in self.yang.iter().enumerate() {
            layer.visit_params(&format!("yang{i}"), f);
        }
        for (i, layer) in self.single_path.iter().enumerate() {
            layer.visit_params(&format!("sp{i}"), f);
        }
        self.pre_classifier.visit_params("head.pre_classifier", f);
        self.classifier.visit_params("head.classifier", f);
    }

    /// Visit non-trainable buffers (BN running stats).
    pub fn visit_buffers(&self, f: &mut ParamVisitor<'_, E>) {
        for (i, layer) in self.yin.iter().enumerate() {
            layer.visit_buffers(&format!("yin{i}"), f);
        }
        for (i, layer) in self.yang.iter().enumerate() {
            layer.visit_buffers(&format!("yang{i}"), f);
        }
        for (i, layer) in self.single_path.iter().enumerate() {
            layer.visit_buffers(&format!("sp{i}"), f);
        }
    }

    /// Flat list of (name, tensor) for all trainable parameters, in visit
    /// order (stable across runs for a fixed config).
    pub fn named_params(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((String::from(name), t.clone())));
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.visit_buffers(&mut |name, t| out.push((String::from(name), t.clone())));
        out
    }

    /// Count of all trainable scalars (running stats excluded).
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params(&mut |_, t| total += t.len());
        total
    }

    /// Per-tensor (name, shape, count) rows for inspection output.
    pub fn param_table(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| {
            out.push((String::from(name), t.shape().to_vec(), t.len()));
        });
        out
    }

    /// Attach every parameter to a tape so the next forward records grads.
    pub fn attach_params(&self, tape: &crate::tensor::Tape<E>) {
        self.visit_params(&mut |_, t| t.attach(tape));
    }

    pub fn zero_grads(&self) {
        self.visit_params(&mut |_, t| t.zero_grad());
    }
}

// ---------------------------------------------------------------------------
// Analytic parameter counting (mirror of build, no allocation)
// ---------------------------------------------------------------------------

fn conv_params(cin: usize, cout: usize, k: usize, bias: bool, groups: usize) -> usize {
    cout * (cin / groups) * k * k + if bias { cout } else { 0 }
}

fn bn_params(c: usize) -> usize {
    2 * c
}

fn resnet_params(cin: usize, cout: usize, stride: usize, it: &Internals) -> usize {
    let b = it.resnet_conv_bias;
    let mut p = conv_params(cin, cout, 3, b, 1)
        + bn_params(cout)
        + conv_params(cout, cout, 3, b, 1)
        + bn_params(cout);
    if stride != 1 || cin != cout {
        p += conv_params(cin, cout, it.resnet_projection_kernel, b, 1) + bn_params(cout);
    }
    p
}

fn mbconv_params(cin: usize, cout: usize, stride: usize, it: &Internals) -> usize {
    let mid = it.expansion_factor * cin;
    let sew = (mid / it.se_ratio).max(1);
    let mut p = conv_params(cin, mid, 1, it.mbconv_expand_bias, 1) + bn_params(mid);
    p += conv_params(mid, mid, 3, it.mbconv_depthwise_bias, mid) + bn_params(mid);
    p += mid * sew
        + if it.se_reduce_bias { sew } else { 0 }
        + sew * mid
        + if it.se_gate_bias { mid } else { 0 };
    p += conv_params(mid, cout, 1, it.mbconv_project_bias, 1) + bn_params(cout);
    if stride == 2 {
        p += conv_params(cin, cout, it.mbconv_shortcut_kernel, false, 1) + bn_params(cout);
    }
    p
}

/// Trainable-parameter count implied by a config, without building the
/// model. Must agree with `YYNet::param_count` on the built model.
pub fn count_config(config: &ModelConfig) -> usize {
    let it = &config.internals;
    let per = config.channels_per_mbconv;
    let mut total = 0;
    for first_cin in [1usize, 3] {
        let mut cin = first_cin;
        let mut width = config.yy_start_channels;
        for _ in 0..config.yy_layers {
            total += resnet_params(cin, width, 1, it);
            let mut c = width;
            for _ in 0..config.yy_mbconv_per_layer {
                total += mbconv_params(c, c + per, 0, it); // stride handled below
                c += per;
            }
            // Exactly one MBConv per two-branch layer is strided; add its
            // shortcut separately (position doesn't change the count when
            // per==0; when per>0 Yin strides the last, Yang the first).
            let (scin, scout) = if first_cin == 1 {
                (width + per * (config.yy_mbconv_per_layer - 1), width + per * config.yy_mbconv_per_layer)
            } else {
                (width, width + per)
            };
            total += conv_params(scin, scout, it.mbconv_shortcut_kernel, false, 1) + bn_params(scout);
            cin = c;
            width = cin;
        }
    }
    let fusion_c = config.fusion_channels();
    let mut cin = fusion_c;
    for i in 0..config.sp_layers {
        let width = if i == 0 { config.sp_start_channels } else { cin };
        total += resnet_params(cin, width, 2, it);
        let mut c = width;
        for j in 0..config.sp_mbconv_per_layer {
            let stride = if config.extra_sp_stride2 && i == 0 && j == 0 { 2 } else { 1 };
            total += mbconv_params(c, c + per, stride, it);
            c += per;
        }
        cin = c;
    }
    total += cin * config.pre_classifier_neurons
        + if it.head_bias { config.pre_classifier_neurons } else { 0 };
    total += config.pre_classifier_neurons * config.num_classes
        + if it.head_bias { config.num_classes } else { 0 };
    total
}

// ---------------------------------------------------------------------------
// Internals reconciliation
// ---------------------------------------------------------------------------

/// The published counts for the three CIFAR variants: (width, params).
pub const PUBLISHED_COUNTS: [(usize, usize); 3] = [(16, 52_882), (32, 191_330), (64, 726_274)];

#[derive(Debug, Clone)]
pub struct ReconcileEntry {
    pub internals: Internals,
    pub counts: [usize; 3],
    pub deltas: [i64; 3],
}

impl ReconcileEntry {
    pub fn total_abs_delta(&self) -> u64 {
        self.deltas.iter().map(|d| d.unsigned_abs()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct ReconcileReport {
    /// Every grid point with its three counts, in deterministic grid order.
    pub entries: Vec<ReconcileEntry>,
    /// The winning internals (exact match, or closest by total deviation).
    pub best: Internals,
    pub best_counts: [usize; 3],
    pub exact: bool,
}

/// Grid-search block internals against the three published counts
/// simultaneously. A setting matching one width but not the others is
/// rejected as coincidental; ties break toward the earlier grid point.
pub fn reconcile_internals() -> ReconcileReport {
    let mut entries = Vec::new();
    let mut best: Option<ReconcileEntry> = None;
    for &expansion_factor in &[2usize, 3, 4, 6] {
        for &se_ratio in &[2usize, 4, 8, 16] {
            for &resnet_conv_bias in &[true, false] {
                for &mbconv_project_bias in &[true, false] {
                    for &se_reduce_bias in &[true, false] {
                        for &se_gate_bias in &[true, false] {
                            for &head_bias in &[true, false] {
                                let internals = Internals {
                                    expansion_factor,
                                    se_ratio,
                                    resnet_conv_bias,
                                    mbconv_project_bias,
                                    se_reduce_bias,
                                    se_gate_bias,
                                    head_bias,
                                    ..Internals::default()
                                };
                                let mut counts = [0usize; 3];
                                let mut deltas = [0i64; 3];
                                for (idx, &(w, target)) in PUBLISHED_COUNTS.iter().enumerate() {
                                    let mut cfg = ModelConfig::cifar10(w);
                                    cfg.internals = internals.clone();
                                    counts[idx] = count_config(&cfg);
                                    deltas[idx] = counts[idx] as i64 - target as i64;
                                }
                                let entry = ReconcileEntry { internals, counts, deltas };
                                let better = match &best {
                                    None => true,
                                    Some(b) => entry.total_abs_delta() < b.total_abs_delta(),
                                };
                                if better {
                                    best = Some(entry.clone());
                                }
                                entries.push(entry);
                            }
                        }
                    }
                }
            }
        }
    }
    let best = best.unwrap();
    ReconcileReport {
        exact: best.total_abs_delta() == 0,
        best_counts: best.counts,
        best: best.internals,
        entries,
    }
}
