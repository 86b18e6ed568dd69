//! Composite building blocks: the ResNet basic sub-block, the MBConv
//! sub-block with squeeze-and-excitation, branch layers with their stride
//! policies, the parameter-free fusion gate and the form-branch input
//! reduction.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gelu, Activation, BatchNorm2d, Conv2d, ParamVisitor, SqueezeExcite};
use crate::scalar::Scalar;
use crate::tensor::{active_tape, parent_ids, record_result, GradStore, Tensor};

// ---------------------------------------------------------------------------
// Fusion gate
// ---------------------------------------------------------------------------

/// The six candidate elementwise rules for combining the form (A) and color
/// (I) branch embeddings. All are parameter-free, so the choice never
/// changes the model's parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionFormula {
    /// A*(1-I)
    AMul1mI,
    /// A*I + A + I
    AMulIPlusAPlusI,
    /// A*(1-I) + A - I
    AMul1mIPlusAMinusI,
    /// A*I
    AMulI,
    /// A*(1-I) + A + I
    AMul1mIPlusAPlusI,
    /// A + I (the default)
    APlusI,
}

impl FusionFormula {
    pub const ALL: [FusionFormula; 6] = [
        FusionFormula::AMul1mI,
        FusionFormula::AMulIPlusAPlusI,
        FusionFormula::AMul1mIPlusAMinusI,
        FusionFormula::AMulI,
        FusionFormula::AMul1mIPlusAPlusI,
        FusionFormula::APlusI,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&f| f == self).unwrap()
    }

    /// Stable machine name (used in config files and CLI flags).
    pub fn name(self) -> &'static str {
        match self {
            FusionFormula::AMul1mI => "a_mul_1mi",
            FusionFormula::AMulIPlusAPlusI => "a_mul_i_plus_a_plus_i",
            FusionFormula::AMul1mIPlusAMinusI => "a_mul_1mi_plus_a_minus_i",
            FusionFormula::AMulI => "a_mul_i",
            FusionFormula::AMul1mIPlusAPlusI => "a_mul_1mi_plus_a_plus_i",
            FusionFormula::APlusI => "a_plus_i",
        }
    }

    /// Human-readable formula as written in the ablation table.
    pub fn formula(self) -> &'static str {
        match self {
            FusionFormula::AMul1mI => "A*(1-I)",
            FusionFormula::AMulIPlusAPlusI => "A*I + A + I",
            FusionFormula::AMul1mIPlusAMinusI => "A*(1-I) + A - I",
            FusionFormula::AMulI => "A*I",
            FusionFormula::AMul1mIPlusAPlusI => "A*(1-I) + A + I",
            FusionFormula::APlusI => "A + I",
        }
    }

    pub fn parse(s: &str) -> Result<FusionFormula> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown fusion formula '{s}' (expected one of: a_mul_1mi, \
                     a_mul_i_plus_a_plus_i, a_mul_1mi_plus_a_minus_i, a_mul_i, \
                     a_mul_1mi_plus_a_plus_i, a_plus_i)"
                ))
            })
    }
}

impl core::fmt::Display for FusionFormula {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Combine the two branch embeddings elementwise. Output shape equals the
/// input shapes (fusion keeps C where concatenation would double it).
pub fn fuse<E: Scalar>(a: &Tensor<E>, i: &Tensor<E>, f: FusionFormula) -> Result<Tensor<E>> {
    if a.shape() != i.shape() {
        return Err(Error::shape(format!(
            "fusion requires equal shapes, got {:?} and {:?}",
            a.shape(),
            i.shape()
        )));
    }
    match f {
        FusionFormula::AMul1mI => a.mul(&i.one_minus()),
        FusionFormula::AMulIPlusAPlusI => a.mul(i)?.add(a)?.add(i),
        FusionFormula::AMul1mIPlusAMinusI => a.mul(&i.one_minus())?.add(a)?.sub(i),
        FusionFormula::AMulI => a.mul(i),
        FusionFormula::AMul1mIPlusAPlusI => a.mul(&i.one_minus())?.add(a)?.add(i),
        FusionFormula::APlusI => a.add(i),
    }
}

// ---------------------------------------------------------------------------
// Form-branch input
// ---------------------------------------------------------------------------

/// How the 1-channel form-branch input is derived from RGB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YinMode {
    /// Channel 0 (the red plane).
    FirstChannel,
    /// Per-pixel mean of all three channels.
    Mean,
}

/// Reduce an `(N,3,H,W)` image to the `(N,1,H,W)` form-branch input.
pub fn yin_input<E: Scalar>(x: &Tensor<E>, mode: YinMode) -> Result<Tensor<E>> {
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != 3 {
        return Err(Error::shape(format!(
            "form-branch input expects (N,3,H,W), got {xs:?}"
        )));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let plane = h * w;
    let out = {
        let xd = x.data();
        let mut data = vec![E::ZERO; n * plane];
        match mode {
            YinMode::FirstChannel => {
                for ni in 0..n {
                    data[ni * plane..(ni + 1) * plane]
                        .copy_from_slice(&xd[ni * c * plane..ni * c * plane + plane]);
                }
            }
            YinMode::Mean => {
                let inv = E::from_f64(1.0 / c as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        let src = &xd[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                        for (d, &v) in data[ni * plane..(ni + 1) * plane].iter_mut().zip(src) {
                            *d += v * inv;
                        }
                    }
                }
            }
        }
        Tensor::new(&[n, 1, h, w], data)?
    };
    let tape = active_tape(&[x]);
    let backward = tape.as_ref().and_then(|tp| {
        let p = parent_ids(tp, &[x])[0]?;
        Some(alloc::boxed::Box::new(move |g: &[E], store: &mut GradStore<E>| {
            let mut dx = vec![E::ZERO; n * c * plane];
            match mode {
                YinMode::FirstChannel => {
                    for ni in 0..n {
                        dx[ni * c * plane..ni * c * plane + plane]
                            .copy_from_slice(&g[ni * plane..(ni + 1) * plane]);
                    }
                }
                YinMode::Mean => {
                    let inv = E::from_f64(1.0 / c as f64);
                    for ni in 0..n {
                        for ci in 0..c {
                            for (d, &gv) in dx
                                [(ni * c + ci) * plane..(ni * c + ci + 1) * plane]
                                .iter_mut()
                                .zip(&g[ni * plane..(ni + 1) * plane])
                            {
                                *d = gv * inv;
                            }
                        }
                    }
                }
            }
            store.accum(p, &dx);
        }) as alloc::boxed::Box<dyn Fn(&[E], &mut GradStore<E>)>)
    });
    Ok(record_result(tape.as_ref(), backward, out))
}

// ---------------------------------------------------------------------------
// Block internals
// ---------------------------------------------------------------------------

/// Fine-grained architectural knobs shared by every block. The defaults are
/// the reconciled settings that reproduce the published parameter counts
/// exactly at widths 16/32/64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Internals {
    /// MBConv channel expansion factor.
    pub expansion_factor: usize,
    /// SE bottleneck = expanded channels / se_ratio (floor, min 1).
    pub se_ratio: usize,
    pub se_reduce_bias: bool,
    pub se_gate_bias: bool,
    pub se_inner_activation: Activation,
    pub se_gate_activation: Activation,
    pub mbconv_expand_bias: bool,
    pub mbconv_depthwise_bias: bool,
    pub mbconv_project_bias: bool,
    /// Kernel size of the projected shortcut used by strided MBConvs.
    pub mbconv_shortcut_kernel: usize,
    pub resnet_conv_bias: bool,
    /// Kernel size of the ResNet projection shortcut.
    pub resnet_projection_kernel: usize,
    pub head_bias: bool,
}

impl Default for Internals {
    fn default() -> Self {
        Internals {
            expansion_factor: 4,
            se_ratio: 8,
            se_reduce_bias: true,
            se_gate_bias: false,
            se_inner_activation: Activation::Gelu,
            se_gate_activation: Activation::Sigmoid,
            mbconv_expand_bias: false,
            mbconv_depthwise_bias: false,
            mbconv_project_bias: true,
            mbconv_shortcut_kernel: 3,
            resnet_conv_bias: true,
            resnet_projection_kernel: 3,
            head_bias: true,
        }
    }
}

impl Internals {
    pub fn validate(&self) -> Result<()> {
        if self.expansion_factor == 0 {
            return Err(Error::config("expansion_factor must be >= 1"));
        }
        if self.se_ratio == 0 {
            return Err(Error::config("se_ratio must be >= 1"));
        }
        for (k, name) in [
            (self.mbconv_shortcut_kernel, "mbconv_shortcut_kernel"),
            (self.resnet_projection_kernel, "resnet_projection_kernel"),
        ] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::config(format!("{name} must be odd, got {k}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ResNet basic sub-block
// ---------------------------------------------------------------------------

/// Two 3x3 convs with batch norm and GELU plus a residual path. The
/// shortcut is the identity when the stride is 1 and the channel count is
/// unchanged, otherwise a projected conv + BN.
pub struct ResNetSubBlock<E: Scalar> {
    pub conv1: Conv2d<E>,
    pub bn1: BatchNorm2d<E>,
    pub conv2: Conv2d<E>,
    pub bn2: BatchNorm2d<E>,
    pub projection: Option<(Conv2d<E>, BatchNorm2d<E>)>,
    pub stride: usize,
}

impl<E: Scalar> ResNetSubBlock<E> {
    pub fn new(
        cin: usize,
        cout: usize,
        stride: usize,
        internals: &Internals,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::config(format!("resnet sub-block stride must be 1 or 2, got {stride}")));
        }
        let bias = internals.resnet_conv_bias;
        let projection = (stride != 1 || cin != cout).then(|| {
            let k = internals.resnet_projection_kernel;
            (
                Conv2d::new(cin, cout, k, stride, k / 2, 1, bias, rng),
                BatchNorm2d::new(cout),
            )
        });
        Ok(ResNetSubBlock {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, 1, bias, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, 1, bias, rng),
            bn2: BatchNorm2d::new(cout),
            projection,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        let h = gelu(&self.bn1.forward(&self.conv1.forward(x)?, train)?);
        let h = self.bn2.forward(&self.conv2.forward(&h)?, train)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok(gelu(&h.add(&shortcut)?))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.conv1.visit_params(&format!("{prefix}.conv1"), f);
        self.bn1.visit_params(&format!("{prefix}.bn1"), f);
        self.conv2.visit_params(&format!("{prefix}.conv2"), f);
        self.bn2.visit_params(&format!("{prefix}.bn2"), f);
        if let Some((conv, bn)) = &self.projection {
            conv.visit_params(&format!("{prefix}.projection.conv"), f);
            bn.visit_params(&format!("{prefix}.projection.bn"), f);
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.bn1.visit_buffers(&format!("{prefix}.bn1"), f);
        self.bn2.visit_buffers(&format!("{prefix}.bn2"), f);
        if let Some((_, bn)) = &self.projection {
            bn.visit_buffers(&format!("{prefix}.projection.bn"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// MBConv sub-block
// ---------------------------------------------------------------------------

/// Inverted-bottleneck block: 1x1 expansion, 3x3 depthwise (carrying the
/// stride), squeeze-and-excitation, 1x1 projection. Residual rules:
/// identity when stride 1 and channels unchanged; a projected conv + BN
/// shortcut when strided; no residual when only the channel count changes.
pub struct MBConvSubBlock<E: Scalar> {
    pub expand: Conv2d<E>,
    pub bn_expand: BatchNorm2d<E>,
    pub depthwise: Conv2d<E>,
    pub bn_depthwise: BatchNorm2d<E>,
    pub se: SqueezeExcite<E>,
    pub project: Conv2d<E>,
    pub bn_project: BatchNorm2d<E>,
    pub shortcut: Option<(Conv2d<E>, BatchNorm2d<E>)>,
    pub stride: usize,
    identity_residual: bool,
}

impl<E: Scalar> MBConvSubBlock<E> {
    pub fn new(
        cin: usize,
        cout: usize,
        stride: usize,
        internals: &Internals,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::config(format!("mbconv stride must be 1 or 2, got {stride}")));
        }
        let mid = internals.expansion_factor * cin;
        let se_width = (mid / internals.se_ratio).max(1);
        let shortcut = (stride == 2).then(|| {
            let k = internals.mbconv_shortcut_kernel;
            (
                Conv2d::new(cin, cout, k, stride, k / 2, 1, false, rng),
                BatchNorm2d::new(cout),
            )
        });
        Ok(MBConvSubBlock {
            expand: Conv2d::new(cin, mid, 1, 1, 0, 1, internals.mbconv_expand_bias, rng),
            bn_expand: BatchNorm2d::new(mid),
            depthwise: Conv2d::new(mid, mid, 3, stride, 1, mid, internals.mbconv_depthwise_bias, rng),
            bn_depthwise: BatchNorm2d::new(mid),
            se: SqueezeExcite::new(
                mid,
                se_width,
                internals.se_reduce_bias,
                internals.se_gate_bias,
                internals.se_inner_activation,
                internals.se_gate_activation,
                rng,
            )?,
            project: Conv2d::new(mid, cout, 1, 1, 0, 1, internals.mbconv_project_bias, rng),
            bn_project: BatchNorm2d::new(cout),
            shortcut,
            stride,
            identity_residual: stride == 1 && cin == cout,
        })
    }

    pub fn forward(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        let h = gelu(&self.bn_expand.forward(&self.expand.forward(x)?, train)?);
        let h = gelu(&self.bn_depthwise.forward(&self.depthwise.forward(&h)?, train)?);
        let h = self.se.forward(&h)?;
        let h = self.bn_project.forward(&self.project.forward(&h)?, train)?;
        if let Some((conv, bn)) = &self.shortcut {
            h.add(&bn.forward(&conv.forward(x)?, train)?)
        } else if self.identity_residual {
            h.add(x)
        } else {
            Ok(h)
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.expand.visit_params(&format!("{prefix}.expand"), f);
        self.bn_expand.visit_params(&format!("{prefix}.bn_expand"), f);
        self.depthwise.visit_params(&format!("{prefix}.depthwise"), f);
        self.bn_depthwise.visit_params(&format!("{prefix}.bn_depthwise"), f);
        self.se.visit_params(&format!("{prefix}.se"), f);
        self.project.visit_params(&format!("{prefix}.project"), f);
        self.bn_project.visit_params(&format!("{prefix}.bn_project"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit_params(&format!("{prefix}.shortcut.conv"), f);
            bn.visit_params(&format!("{prefix}.shortcut.bn"), f);
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.bn_expand.visit_buffers(&format!("{prefix}.bn_expand"), f);
        self.bn_depthwise.visit_buffers(&format!("{prefix}.bn_depthwise"), f);
        self.bn_project.visit_buffers(&format!("{prefix}.bn_project"), f);
        if let Some((_, bn)) = &self.shortcut {
            bn.visit_buffers(&format!("{prefix}.shortcut.bn"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Branch layers
// ---------------------------------------------------------------------------

/// Which branch a layer belongs to; determines stride placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    /// Form branch: stride 2 on the LAST MBConv.
    Yin,
    /// Color branch: stride 2 on the FIRST MBConv.
    Yang,
    /// Post-fusion trunk: stride 2 on the ResNet sub-block; optionally
    /// also on the first MBConv.
    SinglePath,
}

/// One layer of a branch: a ResNet sub-block followed by a run of MBConvs,
/// with stride placement fixed by the branch kind.
pub struct BranchLayer<E: Scalar> {
    pub kind: BranchKind,
    pub resnet: ResNetSubBlock<E>,
    pub mbconvs: Vec<MBConvSubBlock<E>>,
    pub out_channels: usize,
}

impl<E: Scalar> BranchLayer<E> {
    /// `width` is the channel count after the ResNet sub-block; each MBConv
    /// then adds `channels_per_mbconv`. `extra_stride` additionally strides
    /// the first MBConv (single-path layers only).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: BranchKind,
        cin: usize,
        width: usize,
        channels_per_mbconv: usize,
        n_mbconv: usize,
        extra_stride: bool,
        internals: &Internals,
        rng: &mut impl RngCore,
    ) -> Result<Self> {
        if n_mbconv == 0 {
            return Err(Error::config("branch layer needs at least one mbconv"));
        }
        if extra_stride && kind != BranchKind::SinglePath {
            return Err(Error::config("extra stride applies only to single-path layers"));
        }
        let resnet_stride = if kind == BranchKind::SinglePath { 2 } else { 1 };
        let resnet = ResNetSubBlock::new(cin, width, resnet_stride, internals, rng)?;
        let mut mbconvs = Vec::with_capacity(n_mbconv);
        let mut c = width;
        for i in 0..n_mbconv {
            let stride = match kind {
                BranchKind::Yin if i == n_mbconv - 1 => 2,
                BranchKind::Yang if i == 0 => 2,
                BranchKind::SinglePath if extra_stride && i == 0 => 2,
                _ => 1,
            };
            let cout = c + channels_per_mbconv;
            mbconvs.push(MBConvSubBlock::new(c, cout, stride, internals, rng)?);
            c = cout;
        }
        Ok(BranchLayer { kind, resnet, mbconvs, out_channels: c })
    }

    pub fn forward(&self, x: &Tensor<E>, train: bool) -> Result<Tensor<E>> {
        let mut h = self.resnet.forward(x, train)?;
        for mb in &self.mbconvs {
            h = mb.forward(&h, train)?;
        }
        Ok(h)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.resnet.visit_params(&format!("{prefix}.resnet"), f);
        for (i, mb) in self.mbconvs.iter().enumerate() {
            mb.visit_params(&format!("{prefix}.mbconv{i}"), f);
        }
    }

    pub fn visit_buffers(&self, prefix: &str, f: &mut ParamVisitor<'_, E>) {
        self.resnet.visit_buffers(&format!("{prefix}.resnet"), f);
        for (i, mb) in self.mbconvs.iter().enumerate() {
            mb.visit_buffers(&format!("{prefix}.mbconv{i}"), f);
        }
    }
}
