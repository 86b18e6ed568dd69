//! Acceptance suite. One test per criterion; each prints a single
//! `criterion N: PASS ...` line on success (run with `--nocapture` to see
//! them) and fails with a `criterion N: FAIL ...` message otherwise.
//!
//! Criteria 5-8 exercise the data pipeline. They use the real CIFAR-10
//! binary batches when present (`--data` conventions: `YYNET_CIFAR10_DIR`
//! or `data/cifar-10-batches-bin`); otherwise they fall back to a
//! full-size synthetic surrogate in the same binary layout, and the
//! printed line is tagged `[SURROGATE]`.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use yynet::checkpoint::TrainState;
use yynet::config::FileConfig;
use yynet::data::{self, DatasetSplit};
use yynet::metrics::read_column;
use yynet::train;
use yynet_core::blocks::{fuse, yin_input, FusionFormula};
use yynet_core::model::{
    count_config, reconcile_internals, ModelConfig, YYNet, PUBLISHED_COUNTS,
};
use yynet_core::nn::softmax_cross_entropy;
use yynet_core::optim::{
    clip_gradients, couple_weight_decay, onecycle_lr, AdamW, ClipMode, Ema, OneCycle,
};
use yynet_core::rng;
use yynet_core::{Tape, Tensor};

// ---------------------------------------------------------------------------
// Shared dataset access
// ---------------------------------------------------------------------------

struct Dataset {
    dir: PathBuf,
    surrogate: bool,
}

static DATASET: OnceLock<Dataset> = OnceLock::new();

/// The real dataset directory when available, else a full-size synthetic
/// surrogate generated once under the target tmpdir.
fn dataset() -> &'static Dataset {
    DATASET.get_or_init(|| {
        if let Some(dir) = data::resolve_data_dir(None) {
            return Dataset { dir, surrogate: false };
        }
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("surrogate-data");
        let complete = data::TRAIN_FILES
            .iter()
            .chain([&data::TEST_FILE])
            .all(|f| dir.join(f).exists());
        if !complete {
            data::write_synthetic(&dir, data::TRAIN_RECORDS, data::TEST_RECORDS, 0)
                .expect("generate surrogate dataset");
        }
        Dataset { dir, surrogate: true }
    })
}

fn load_splits() -> (DatasetSplit, DatasetSplit, bool) {
    let ds = dataset();
    let (train, test) = data::load_cifar10(&ds.dir).expect("load dataset");
    (train, test, ds.surrogate)
}

fn tag(surrogate: bool) -> &'static str {
    if surrogate {
        " [SURROGATE]"
    } else {
        ""
    }
}

fn out_dir(name: &str) -> PathBuf {
    let d = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

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

// ---------------------------------------------------------------------------
// Criterion 1: published parameter counts reproduced exactly
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_published_parameter_counts() {
    for (width, published) in PUBLISHED_COUNTS {
        let cfg = ModelConfig::cifar10(width);
        let analytic = count_config(&cfg);
        let built = YYNet::<f32>::build(&cfg, 0).unwrap().param_count();
        assert_eq!(
            (analytic, built),
            (published, published),
            "criterion 1: FAIL width {width}: analytic {analytic}, built {built}, published {published}"
        );
    }
    let report = reconcile_internals();
    assert!(
        report.exact,
        "criterion 1: FAIL internals grid search found no exact match (closest {:?})",
        report.best_counts
    );
    println!(
        "criterion 1: PASS published counts 52882/191330/726274 reproduced exactly; \
         grid search over {} internals settings confirms a unique exact configuration",
        report.entries.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient checks (f64, central differences, 5 seeds)
// ---------------------------------------------------------------------------

fn gradcheck(params: &[(String, Tensor<f64>)], loss: &dyn Fn() -> Tensor<f64>, max_coords: usize) {
    for (_, p) in params {
        p.zero_grad();
    }
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        for (_, p) in params {
            p.attach(&tape);
        }
        let l = loss();
        l.backward().unwrap();
        params
            .iter()
            .map(|(name, p)| p.grad().unwrap_or_else(|| panic!("criterion 2: FAIL no grad for {name}")))
            .collect()
    };
    for ((name, p), ga) in params.iter().zip(&analytic) {
        let n = p.len();
        let stride = if max_coords == 0 || n <= max_coords { 1 } else { n / max_coords };
        for j in (0..n).step_by(stride.max(1)) {
            let orig = p.to_vec()[j];
            let h = 1e-5 * orig.abs().max(1.0);
            p.with_data_mut(|d| d[j] = orig + h);
            let up = loss().item();
            p.with_data_mut(|d| d[j] = orig - h);
            let down = loss().item();
            p.with_data_mut(|d| d[j] = orig);
            let num = (up - down) / (2.0 * h);
            let ana = ga[j];
            let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1.0);
            assert!(
                err < 1e-4,
                "criterion 2: FAIL {name}[{j}]: analytic {ana} vs numeric {num} (rel {err:.3e})"
            );
        }
    }
    for (_, p) in params {
        p.zero_grad();
    }
}

#[test]
fn criterion_2_gradient_checks() {
    let start = Instant::now();
    const SEEDS: [u64; 5] = [11, 23, 37, 51, 97];
    // Tiny full model: both branches, fusion, SE, all stride policies,
    // dropout and the classifier head, in double precision.
    let mut cfg = ModelConfig::cifar10(4);
    cfg.yy_mbconv_per_layer = 2;
    cfg.sp_mbconv_per_layer = 1;
    cfg.input_resolution = 8;
    cfg.pre_classifier_neurons = 6;
    cfg.dropout_rate = 0.25;
    let mut checked = 0usize;
    for seed in SEEDS {
        let model = YYNet::<f64>::build(&cfg, seed).unwrap();
        let mut r = rng::seeded(seed ^ 0x55);
        let n = 2 * 3 * 8 * 8;
        let xdata: Vec<f64> = (0..n).map(|_| rng::normal(&mut r)).collect();
        let x = Tensor::new(&[2, 3, 8, 8], xdata).unwrap().requires_grad(true);
        let labels = [1usize, 7];
        let mut params = vec![("x".to_string(), x.clone())];
        model.visit_params(&mut |name, t| params.push((name.to_string(), t.clone())));
        checked = params.len();
        gradcheck(
            &params,
            &|| {
                let mut dr = rng::seeded(seed ^ 0x77);
                let logits = model.forward(&x, true, &mut dr).unwrap();
                softmax_cross_entropy(&logits, &labels).unwrap()
            },
            3,
        );
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "criterion 2: FAIL took {elapsed:.1}s (budget 120s)");
    println!(
        "criterion 2: PASS full-model finite-difference checks (f64, rel err < 1e-4) over \
         {} seeds x {checked} tensors in {elapsed:.1}s",
        SEEDS.len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: shapes and topology for every preset x formula
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_shapes_and_topology() {
    let start = Instant::now();
    // Branch shapes agree at the fusion point; fusion keeps the shape.
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
        assert_eq!(a.shape(), i.shape(), "criterion 3: FAIL {name}: branch shapes diverge");
        assert_eq!(a.shape()[2], cfg.input_resolution >> cfg.yy_layers, "criterion 3: FAIL {name}");
        for f in FusionFormula::ALL {
            assert_eq!(
                fuse(&a, &i, f).unwrap().shape(),
                a.shape(),
                "criterion 3: FAIL {name}/{f}: fusion changes shape"
            );
        }
    }
    // ImageNet-scale forward produces 1000 finite logits from 224x224.
    let inet = ModelConfig::imagenet();
    let model = YYNet::<f32>::build(&inet, 3).unwrap();
    let y = model.forward_eval(&random_input(&inet, 1, 9)).unwrap();
    assert_eq!(y.shape(), &[1, 1000], "criterion 3: FAIL imagenet logits shape");
    assert!(y.all_finite(), "criterion 3: FAIL imagenet logits not finite");
    // Every parameter receives a finite gradient for every preset x formula.
    let mut combos = 0usize;
    for (name, base) in presets() {
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
            softmax_cross_entropy(&logits, &labels).unwrap().backward().unwrap();
            model.visit_params(&mut |pname, t| match t.grad() {
                Some(g) => assert!(
                    g.iter().all(|v| v.is_finite()),
                    "criterion 3: FAIL {name}/{f}: non-finite grad for {pname}"
                ),
                None => panic!("criterion 3: FAIL {name}/{f}: no gradient for {pname}"),
            });
            model.zero_grads();
            combos += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "criterion 3: FAIL took {elapsed:.1}s (budget 120s)");
    println!(
        "criterion 3: PASS shapes, fusion-point topology, 224->1000 forward and full \
         gradient coverage across {combos} preset/formula combinations in {elapsed:.1}s"
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: optimizer, schedule, clipping, wd coupling, EMA oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_optimizer_oracles() {
    // AdamW vs an independent scalar recurrence, 100 steps, rel err < 1e-12.
    let p = Tensor::<f64>::new(&[1], vec![0.7]).unwrap().requires_grad(true);
    let mut opt = AdamW::new(vec![p.clone()], 0.9, 0.999, 1e-8);
    let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    let (lr, wd) = (3e-3, 1.2e-3);
    for t in 1..=100 {
        let g = (t as f64 * 0.13).sin(); // deterministic nontrivial gradient
        p.seed_grad(&[g]);
        opt.step(lr, wd).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        theta -= lr * m_hat / (v_hat.sqrt() + 1e-8) + lr * wd * theta;
        p.zero_grad();
    }
    let got = p.item();
    let rel = (got - theta).abs() / theta.abs().max(1.0);
    assert!(rel < 1e-12, "criterion 4: FAIL AdamW drifts from reference: rel {rel:.3e}");

    // Global-norm clipping: a 3-4-5 gradient clips to norm exactly 1.
    let a = Tensor::<f64>::new(&[1], vec![0.0]).unwrap().requires_grad(true);
    let b = Tensor::<f64>::new(&[1], vec![0.0]).unwrap().requires_grad(true);
    a.seed_grad(&[3.0]);
    b.seed_grad(&[4.0]);
    let pre = clip_gradients(&[a.clone(), b.clone()], 1.0, ClipMode::GlobalNorm);
    assert!((pre - 5.0).abs() < 1e-12, "criterion 4: FAIL pre-clip norm {pre}");
    let ga = a.grad().unwrap()[0];
    let gb = b.grad().unwrap()[0];
    let post = (ga * ga + gb * gb).sqrt();
    assert!((post - 1.0).abs() < 1e-12, "criterion 4: FAIL post-clip norm {post}");

    // One-cycle endpoints and peak for the published settings.
    let oc = OneCycle::default();
    let total = 1000;
    let max_lr = 1e-2;
    let lr0 = onecycle_lr(0, total, max_lr, &oc).unwrap();
    assert!((lr0 - max_lr / 25.0).abs() < 1e-15, "criterion 4: FAIL initial lr {lr0}");
    let peak_step = (oc.pct_start * total as f64) as usize;
    let peak = onecycle_lr(peak_step, total, max_lr, &oc).unwrap();
    assert!((peak - max_lr).abs() < 1e-9, "criterion 4: FAIL peak lr {peak}");
    let last = onecycle_lr(total - 1, total, max_lr, &oc).unwrap();
    assert!((last - max_lr / 1e4).abs() < 1e-12, "criterion 4: FAIL final lr {last}");
    let max_seen = (0..total)
        .map(|s| onecycle_lr(s, total, max_lr, &oc).unwrap())
        .fold(0.0f64, f64::max);
    assert!(max_seen <= max_lr + 1e-12, "criterion 4: FAIL schedule exceeds max_lr");

    // Weight decay coupled to the learning rate: wd = 1.56 * lr.
    assert!((couple_weight_decay(1.56, 4e-3) - 6.24e-3).abs() < 1e-15);

    // EMA activates at floor(0.25 * T) and updates exactly T - floor(0.25 T) times.
    let total = 37usize;
    let act = Ema::<f64>::activation_step(0.25, total);
    assert_eq!(act, 9, "criterion 4: FAIL activation step {act}");
    let w = Tensor::<f64>::new(&[1], vec![1.0]).unwrap().requires_grad(true);
    let mut ema = Ema::new(0.1, 0.9);
    for step in 0..total {
        assert_eq!(ema.active(), step > act, "criterion 4: FAIL EMA active early at {step}");
        ema.update(&[w.clone()], step, total, 0.25);
    }
    assert_eq!(
        ema.update_count as usize,
        total - act,
        "criterion 4: FAIL EMA update count {}",
        ema.update_count
    );
    // Shadow recurrence: constant weight stays fixed under 0.1/0.9 mixing.
    assert!((ema.shadow.as_ref().unwrap()[0][0] - 1.0).abs() < 1e-12);

    println!(
        "criterion 4: PASS AdamW 100-step reference (rel < 1e-12), 3-4-5 clip to unit norm, \
         one-cycle endpoints/peak, wd = 1.56*lr, EMA activation at floor(0.25*T)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: training smoke (cifar16, 5k/1k subset, 3 epochs)
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_training_smoke() {
    let start = Instant::now();
    let (train_full, test_full, surrogate) = load_splits();
    let train_split = train_full.take(5_000);
    let test_split = test_full.take(1_000);
    let mut cfg = FileConfig::default(); // cifar16 model defaults
    cfg.train.epochs = 3;
    cfg.train.batch_size = 64;
    cfg.train.seed = 1;
    let mut state = TrainState::new(cfg).unwrap();
    let stats = data::compute_stats(&train_split);
    let out = out_dir("acceptance-smoke");
    let outcome = train::train(&mut state, &train_split, &test_split, &stats, &out, false).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(
        outcome.final_accuracy >= 0.35,
        "criterion 5: FAIL accuracy {:.4} < 0.35",
        outcome.final_accuracy
    );
    for w in outcome.epoch_losses.windows(2) {
        assert!(
            w[1] < w[0],
            "criterion 5: FAIL epoch losses not strictly decreasing: {:?}",
            outcome.epoch_losses
        );
    }
    assert!(elapsed < 1800.0, "criterion 5: FAIL took {elapsed:.0}s (budget 1800s)");
    println!(
        "criterion 5: PASS{} cifar16 on 5k/1k subset, 3 epochs: accuracy {:.2}%, \
         epoch losses {:?}, {elapsed:.0}s",
        tag(surrogate),
        outcome.final_accuracy * 100.0,
        outcome
            .epoch_losses
            .iter()
            .map(|l| (l * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: desk-scale run (40 epochs, full dataset) -- opt-in
// ---------------------------------------------------------------------------

#[test]
#[ignore = "multi-hour desk-scale run; execute explicitly with --ignored"]
fn criterion_6_desk_scale_run() {
    let (train_split, test_split, surrogate) = load_splits();
    let mut cfg = FileConfig::default();
    cfg.train.seed = 1;
    let mut state = TrainState::new(cfg).unwrap();
    let stats = data::compute_stats(&train_split);
    let out = out_dir("acceptance-desk");
    let outcome = train::train(&mut state, &train_split, &test_split, &stats, &out, true).unwrap();
    let acc = outcome.final_accuracy;
    if surrogate {
        // The published accuracy band applies to the real dataset; the
        // surrogate is easier, so only a lower bound is meaningful.
        assert!(acc >= 0.85, "criterion 6: FAIL surrogate accuracy {acc:.4} < 0.85");
        println!(
            "criterion 6: PASS [SURROGATE] 40-epoch run: accuracy {:.2}% (published \
             85-92% band applies to the real dataset)",
            acc * 100.0
        );
    } else {
        assert!(
            (0.85..=0.92).contains(&acc),
            "criterion 6: FAIL accuracy {acc:.4} outside [0.85, 0.92]"
        );
        println!("criterion 6: PASS 40-epoch run: accuracy {:.2}% within [85%, 92%]", acc * 100.0);
    }
}

// ---------------------------------------------------------------------------
// Criterion 7: bitwise-identical metrics across same-seed runs
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_same_seed_determinism() {
    let (train_full, test_full, surrogate) = load_splits();
    let train_split = train_full.take(512);
    let test_split = test_full.take(200);
    let stats = data::compute_stats(&train_split);
    let mut columns = Vec::new();
    for run in 0..2 {
        let mut cfg = FileConfig::default();
        cfg.train.epochs = 2;
        cfg.train.batch_size = 64;
        cfg.train.seed = 42;
        let mut state = TrainState::new(cfg).unwrap();
        let out = out_dir(&format!("acceptance-det-{run}"));
        train::train(&mut state, &train_split, &test_split, &stats, &out, false).unwrap();
        columns.push(read_column(&out.join("metrics.csv"), "train_loss").unwrap());
    }
    assert!(!columns[0].is_empty(), "criterion 7: FAIL no metrics rows written");
    assert_eq!(
        columns[0], columns[1],
        "criterion 7: FAIL train_loss columns differ between same-seed runs"
    );
    println!(
        "criterion 7: PASS{} two seed-42 runs produced bitwise-identical train_loss \
         columns ({} rows)",
        tag(surrogate),
        columns[0].len()
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: dataset loader integrity
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_loader_integrity() {
    let (train_split, test_split, surrogate) = load_splits();
    assert_eq!(train_split.len(), 50_000, "criterion 8: FAIL train count");
    assert_eq!(test_split.len(), 10_000, "criterion 8: FAIL test count");
    for split in [&train_split, &test_split] {
        for i in 0..split.len() {
            assert_eq!(split.record(i).len(), 3073, "criterion 8: FAIL record {i} size");
            assert!(split.labels[i] < 10, "criterion 8: FAIL label {} out of range", split.labels[i]);
        }
    }
    // Lossless round-trip: records re-serialized in order reproduce the
    // source files byte for byte.
    let dir = &dataset().dir;
    let mut rebuilt = Vec::with_capacity(data::TRAIN_RECORDS * data::RECORD_BYTES);
    for i in 0..train_split.len() {
        rebuilt.extend(train_split.record(i));
    }
    let mut original = Vec::with_capacity(rebuilt.len());
    for f in data::TRAIN_FILES {
        original.extend(std::fs::read(dir.join(f)).unwrap());
    }
    assert_eq!(rebuilt, original, "criterion 8: FAIL train round-trip not byte-identical");
    let mut rebuilt_test = Vec::new();
    for i in 0..test_split.len() {
        rebuilt_test.extend(test_split.record(i));
    }
    assert_eq!(
        rebuilt_test,
        std::fs::read(dir.join(data::TEST_FILE)).unwrap(),
        "criterion 8: FAIL test round-trip not byte-identical"
    );
    println!(
        "criterion 8: PASS{} 50000/10000 records, 3073 bytes each, labels in 0..10, \
         lossless byte round-trip",
        tag(surrogate)
    );
}
