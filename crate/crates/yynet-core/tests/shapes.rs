//! Shape and topology contracts for every preset and fusion formula:
//! branch shape equality at the fusion point, the stride-policy halving
//! trace, the ImageNet-scale forward, and gradient coverage of all
//! trainable parameters.

use yynet_core::blocks::{fuse, yin_input, FusionFormula};
use yynet_core::model::{ModelConfig, YYNet};
use yynet_core::nn::softmax_cross_entropy;
use yynet_core::rng;
use yynet_core::{Tape, Tensor};

fn presets() -> Vec<(&'static str, ModelConfig)> {
    vec![
        ("cifar16", ModelConfig::cifar10(16)),
        ("cifar32", ModelConfig::cifar10(32)),
        ("cifar64", ModelConfig::cifar10(64)),
        ("imagenet", ModelConfig::imagenet()),
    ]
}

fn random_input(cfg: &ModelConfig, batch: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng::seeded(seed);
    let res = cfg.input_resolution;
    let data = (0..batch * 3 * res * res)
        .map(|_| rng::normal(&mut r) as f32)
        .collect();
    Tensor::new(&[batch, 3, res, res], data).unwrap()
}

#[test]
fn branch_shapes_equal_at_fusion() {
    for (name, cfg) in presets() {
        let model = YYNet::<f32>::build(&cfg, 7).unwrap();
        let x = random_input(&cfg, 1, 42);
        let mut a = yin_input(&x, cfg.yin_mode).unwrap();
        for layer in &model.yin {
            a = layer.forward(&a, false).unwrap();
        }
        let mut i = x.clone();
        for layer in &model.yang {
            i = layer.forward(&i, false).unwrap();
        }
        assert_eq!(a.shape(), i.shape(), "{name}: branch shapes diverge");
        // Each two-branch layer halves exactly once.
        let expect_res = cfg.input_resolution >> cfg.yy_layers;
        assert_eq!(a.shape()[2], expect_res, "{name}");
        assert_eq!(a.shape()[1], cfg.fusion_channels(), "{name}");
        // Fusion output keeps the branch shape for every formula.
        for f in FusionFormula::ALL {
            assert_eq!(fuse(&a, &i, f).unwrap().shape(), a.shape());
        }
    }
}

#[test]
fn halving_trace_matches_stride_policy() {
    for (name, cfg) in presets() {
        let model = YYNet::<f32>::build(&cfg, 7).unwrap();
        let x = random_input(&cfg, 1, 1);
        let mut a = yin_input(&x, cfg.yin_mode).unwrap();
        for layer in &model.yin {
            a = layer.forward(&a, false).unwrap();
        }
        let mut i = x.clone();
        for layer in &model.yang {
            i = layer.forward(&i, false).unwrap();
        }
        let mut h = fuse(&a, &i, cfg.fusion).unwrap();
        let mut res = cfg.input_resolution >> cfg.yy_layers;
        for (li, layer) in model.single_path.iter().enumerate() {
            h = layer.forward(&h, false).unwrap();
            res /= 2; // ResNet sub-block stride
            if cfg.extra_sp_stride2 && li == 0 {
                res /= 2; // extra stride on the first MBConv
            }
            assert_eq!(h.shape()[2], res, "{name} sp layer {li}");
            assert_eq!(h.shape()[3], res, "{name} sp layer {li}");
        }
        assert_eq!(res, cfg.input_resolution >> cfg.total_halvings(), "{name}");
    }
}

#[test]
fn imagenet_forward_yields_1000_logits() {
    let cfg = ModelConfig::imagenet();
    let model = YYNet::<f32>::build(&cfg, 3).unwrap();
    let x = random_input(&cfg, 1, 9);
    let y = model.forward_eval(&x).unwrap();
    assert_eq!(y.shape(), &[1, 1000]);
    assert!(y.all_finite());
}

#[test]
fn gradient_reaches_every_parameter_all_formulas() {
    for (name, base) in presets() {
        // Full-resolution backward for the preset's own formula; a reduced
        // batch for ImageNet keeps this under the time budget.
        let batch = if name == "imagenet" { 1 } else { 2 };
        for f in FusionFormula::ALL {
            let mut cfg = base.clone();
            cfg.fusion = f;
            let model = YYNet::<f32>::build(&cfg, 11).unwrap();
            let x = random_input(&cfg, batch, f.index() as u64);
            let labels: Vec<usize> = (0..batch).map(|b| b % cfg.num_classes).collect();
            let tape = Tape::new();
            model.attach_params(&tape);
            let mut dr = rng::seeded(1);
            let logits = model.forward(&x, true, &mut dr).unwrap();
            let loss = softmax_cross_entropy(&logits, &labels).unwrap();
            loss.backward().unwrap();
            let (mut total, mut with_grad) = (0usize, 0usize);
            model.visit_params(&mut |pname, t| {
                total += 1;
                match t.grad() {
                    Some(g) => {
                        assert!(g.iter().all(|v| v.is_finite()), "{name}/{f}: {pname} non-finite");
                        with_grad += 1;
                    }
                    None => panic!("{name}/{f}: no gradient for {pname}"),
                }
            });
            assert_eq!(with_grad, total, "{name}/{f}");
            model.zero_grads();
        }
    }
}

#[test]
fn eval_batch_independence_and_permutation() {
    let cfg = ModelConfig::cifar10(16);
    let model = YYNet::<f32>::build(&cfg, 5).unwrap();
    let a = random_input(&cfg, 1, 100);
    let b = random_input(&cfg, 1, 101);
    // Batch [a, b] vs [b, a]: rows permute accordingly in eval mode.
    let mut ab = a.to_vec();
    ab.extend(b.to_vec());
    let mut ba = b.to_vec();
    ba.extend(a.to_vec());
    let res = cfg.input_resolution;
    let yab = model
        .forward_eval(&Tensor::new(&[2, 3, res, res], ab).unwrap())
        .unwrap()
        .to_vec();
    let yba = model
        .forward_eval(&Tensor::new(&[2, 3, res, res], ba).unwrap())
        .unwrap()
        .to_vec();
    assert_eq!(&yab[0..10], &yba[10..20]);
    assert_eq!(&yab[10..20], &yba[0..10]);
    // Duplicated sample: identical logit rows.
    let mut aa = a.to_vec();
    aa.extend(a.to_vec());
    let yaa = model
        .forward_eval(&Tensor::new(&[2, 3, res, res], aa).unwrap())
        .unwrap()
        .to_vec();
    assert_eq!(&yaa[0..10], &yaa[10..20]);
}
