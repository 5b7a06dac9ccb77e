//! Acceptance suite. One test per criterion; each prints a PASS line with
//! its measured numbers (run with `--nocapture` to see them).
//!
//! Reference values for the metric cross-checks are reconstructed inside
//! the tests from the published normalized confusion matrices and split
//! counts, not copied from the implementation under test.

mod common;

use common::gradcheck;
use common::reference_net;
use common::rng;

use fundus_dqa::backbones::{
    build_micro_densenet, build_micro_efficientnet, build_network, checkpoint_bytes,
    network_from_bytes, ArchConfig, DenseBlockSpec, MbBlockSpec, MicroDenseConfig, MicroEffConfig,
};
use fundus_dqa::data::{
    load_dataset, load_manifest, quality_label, synthesize, DegradationKind, PreprocessConfig,
    Split, SplitCounts, SyntheticConfig,
};
use fundus_dqa::explain::grad_cam;
use fundus_dqa::hierarchy::{
    build_flat_baseline, compare_models, train_flat, train_hierarchy, HierarchicalClassifier,
    HierarchyTrainConfig, Hyperparams, QualityLabel, StageModel, StageRole,
};
use fundus_dqa::metrics::{
    f_score, normalize_rows, recall_macro, scenario_select, ConfusionMatrix,
};
use fundus_dqa::tensor::Tensor;
use rand::Rng;

// ── criterion A: F-score oracle against the reported comparison table ──

#[test]
fn criterion_a_fscore_cross_check() {
    let recommended = f_score(0.8798, 0.8770);
    assert!(
        (recommended - 0.8784).abs() <= 1e-4,
        "f_score(0.8798, 0.8770) = {recommended:.6}, expected 0.8784 +/- 1e-4"
    );
    let all_dense = f_score(0.8771, 0.8673);
    assert!(
        (all_dense - 0.8722).abs() <= 1e-4,
        "f_score(0.8771, 0.8673) = {all_dense:.6}, expected 0.8722 +/- 1e-4"
    );
    println!("ACCEPT A: PASS  f_score {recommended:.4} / {all_dense:.4}");
}

// ── criterion B: counts reconstructed from published normalized rows ──

/// Published class-conditional percentages of the first scenario matrix
/// (rows: true good/usable/unusable) and the test-split class counts.
const C1_PERCENT: [[f64; 3]; 3] =
    [[94.73, 5.19, 0.07], [10.93, 75.80, 13.27], [0.62, 8.11, 91.27]];
const C2_PERCENT: [[f64; 3]; 3] =
    [[92.41, 7.54, 0.05], [8.89, 83.41, 7.70], [0.56, 12.58, 86.86]];
const TEST_COUNTS: [u64; 3] = [8471, 4558, 3220];

fn reconstruct_counts(percent: &[[f64; 3]; 3]) -> ConfusionMatrix {
    let mut counts = [[0u64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            counts[i][j] = (percent[i][j] / 100.0 * TEST_COUNTS[i] as f64).round() as u64;
        }
    }
    ConfusionMatrix::from_counts(counts)
}

#[test]
fn criterion_b_reconstructed_accuracy_and_recall() {
    let cm = reconstruct_counts(&C1_PERCENT);
    // reconstruction sanity: rounded rows must re-sum to the split counts
    for i in 0..3 {
        let row: u64 = cm.counts()[i].iter().sum();
        assert_eq!(row, TEST_COUNTS[i], "row {i} does not re-sum to the published count");
    }
    let acc = cm.accuracy();
    assert!(
        (acc - 0.8873).abs() <= 0.001,
        "reconstructed accuracy {acc:.5}, expected 0.8873 +/- 0.001"
    );
    let recall = recall_macro(&cm);
    assert!(
        (recall - 0.8727).abs() <= 0.0005,
        "reconstructed recall_macro {recall:.5}, expected 0.8727 +/- 0.0005"
    );
    // independent recall oracle: mean of the published diagonal percentages
    let diag_mean = (C1_PERCENT[0][0] + C1_PERCENT[1][1] + C1_PERCENT[2][2]) / 300.0;
    assert!((recall - diag_mean).abs() <= 0.0005);
    println!("ACCEPT B: PASS  accuracy {acc:.4}, recall_macro {recall:.4}");
}

// ── criterion C: scenario selection reproduces the boldface logic ──

#[test]
fn criterion_c_scenario_selection() {
    let candidates = vec![reconstruct_counts(&C1_PERCENT), reconstruct_counts(&C2_PERCENT)];
    let band = (0.88, 0.895);
    let unusable = scenario_select(&candidates, QualityLabel::Unusable, band).unwrap();
    assert_eq!(unusable, 0, "target unusable must select the first matrix");
    let usable = scenario_select(&candidates, QualityLabel::Usable, band).unwrap();
    assert_eq!(usable, 1, "target usable must select the second matrix");
    println!("ACCEPT C: PASS  unusable -> C1, usable -> C2");
}

// ── criterion D: gradient suite over >= 100 seeds ──

const GRAD_SEEDS: u64 = 100;
const OP_TOL: f64 = 1e-3;
const E2E_TOL: f64 = 1e-2;

#[test]
fn criterion_d_per_op_gradients_100_seeds() {
    let mut worst: (f64, String) = (0.0, String::new());
    for seed in 0..GRAD_SEEDS {
        for (name, err) in gradcheck::all_op_checks(seed) {
            assert!(err < OP_TOL, "{name} gradient mismatch at seed {seed}: {err:.3e}");
            if err > worst.0 {
                worst = (err, format!("{name} (seed {seed})"));
            }
        }
    }
    println!(
        "ACCEPT D1: PASS  per-op gradients over {GRAD_SEEDS} seeds, worst rel err {:.3e} at {}",
        worst.0, worst.1
    );
}

fn tiny_dense_cfg() -> MicroDenseConfig {
    MicroDenseConfig {
        input_resolution: 16,
        stem_channels: 6,
        blocks: vec![DenseBlockSpec { num_layers: 2, growth_rate: 4 }],
        transition_compression: 0.5,
        head_hidden: vec![8],
    }
}

fn tiny_eff_cfg() -> MicroEffConfig {
    MicroEffConfig {
        input_resolution: 16,
        stem_channels: 6,
        blocks: vec![MbBlockSpec { expansion_ratio: 2, out_channels: 6, stride: 2, repeats: 1 }],
        head_hidden: vec![8],
    }
}

#[test]
fn criterion_d_end_to_end_gradients_100_seeds() {
    let mut worst: f64 = 0.0;
    for seed in 0..GRAD_SEEDS {
        let mut r = rng(seed);
        let dense = seed % 2 == 0;
        let config = if dense {
            ArchConfig::Dense(tiny_dense_cfg())
        } else {
            ArchConfig::Eff(tiny_eff_cfg())
        };
        let mut net = build_network(&config, 2, seed).unwrap();

        // warm up running statistics so inference mode is defined
        let warm: Vec<f32> = (0..2 * 3 * 16 * 16).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        net.trace_train(&Tensor::new(&[2, 3, 16, 16], warm).unwrap()).unwrap();

        let image: Vec<f32> = (0..3 * 16 * 16).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let image_t = Tensor::new(&[3, 16, 16], image.clone()).unwrap();
        let class = r.gen_range(0..2usize);

        let mut traced = net.trace_infer(&image_t).unwrap();
        let score = traced.tape.pick(traced.logits, class).unwrap();
        let grads = traced.tape.backward(score).unwrap();

        let image64: Vec<f64> = image.iter().map(|&v| v as f64).collect();
        let mut params64 = reference_net::params_f64(&net);
        // sample a handful of parameter elements per seed
        for _ in 0..8 {
            let p = r.gen_range(0..params64.len());
            let e = r.gen_range(0..params64[p].len());
            let analytic = grads.wrt(traced.param_nodes[p]).data()[e] as f64;
            // shrink eps on failure: a ReLU kink inside the difference
            // window fades with eps, a wrong gradient does not
            let mut err = f64::INFINITY;
            for eps in [1e-4, 1e-5, 1e-6] {
                let orig = params64[p][e];
                params64[p][e] = orig + eps;
                let fp = reference_net::forward_f64(&net, &image64, &params64)[class];
                params64[p][e] = orig - eps;
                let fm = reference_net::forward_f64(&net, &image64, &params64)[class];
                params64[p][e] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                if err < E2E_TOL {
                    break;
                }
            }
            assert!(
                err < E2E_TOL,
                "seed {seed} ({}) param {p}[{e}]: analytic {analytic:.6e} disagrees with finite differences at every eps (err {err:.3e})",
                if dense { "dense" } else { "eff" }
            );
            worst = worst.max(err);
        }
    }
    println!(
        "ACCEPT D2: PASS  end-to-end gradients (both families) over {GRAD_SEEDS} seeds, worst rel err {worst:.3e}"
    );
}

// ── criterion E: dense-block channel law over 50 random configs ──

#[test]
fn criterion_e_dense_channel_law() {
    let mut r = rng(2024);
    for trial in 0..50 {
        let stem = r.gen_range(1..24usize);
        let nblocks = r.gen_range(1..4usize);
        let blocks: Vec<DenseBlockSpec> = (0..nblocks)
            .map(|_| DenseBlockSpec {
                num_layers: r.gen_range(1..6),
                growth_rate: r.gen_range(1..10),
            })
            .collect();
        let cfg = MicroDenseConfig {
            input_resolution: 64,
            stem_channels: stem,
            blocks: blocks.clone(),
            transition_compression: 0.5,
            head_hidden: vec![],
        };
        let net = build_micro_densenet(&cfg, 2, trial as u64).unwrap();
        let mut c_in = stem;
        for (b, spec) in blocks.iter().enumerate() {
            // C_out = C_in + n*k, read off the transition conv that consumes it
            let expected = c_in + spec.num_layers * spec.growth_rate;
            let w = net.param(&format!("transition{b}.conv.weight")).unwrap();
            assert_eq!(
                w.shape()[1],
                expected,
                "trial {trial} block {b}: stem {stem}, n {}, k {}",
                spec.num_layers,
                spec.growth_rate
            );
            c_in = ((expected as f32 * 0.5).floor() as usize).max(1);
        }
    }
    println!("ACCEPT E: PASS  channel law C_out = C_in + n*k over 50 random configs");
}

// ── criterion F: routing invariants over >= 10,000 predictions ──

#[test]
fn criterion_f_routing_invariants() {
    let mut r = rng(77);
    let mut total = 0usize;
    for net_seed in 0..20u64 {
        let mut make = |role: StageRole, s: u64| {
            let mut net = build_micro_efficientnet(&tiny_eff_cfg(), 2, s).unwrap();
            let warm: Vec<f32> = (0..4 * 3 * 16 * 16).map(|_| r.gen_range(-1.0f32..1.0)).collect();
            net.trace_train(&Tensor::new(&[4, 3, 16, 16], warm).unwrap()).unwrap();
            let threshold = r.gen_range(0.05..0.95);
            StageModel::new(role, net, threshold).unwrap()
        };
        let hc = HierarchicalClassifier::new(
            make(StageRole::HighVsLow, net_seed * 3),
            make(StageRole::GoodVsUsable, net_seed * 3 + 1),
            make(StageRole::UsableVsUnusable, net_seed * 3 + 2),
        )
        .unwrap();
        for _ in 0..500 {
            let data: Vec<f32> = (0..3 * 16 * 16).map(|_| r.gen_range(-2.0f32..2.0)).collect();
            let image = Tensor::new(&[3, 16, 16], data).unwrap();
            let p = hc.predict(&image).unwrap();
            assert_eq!(p.path.len(), 2);
            assert_eq!(p.path[0].role, StageRole::HighVsLow);
            assert_eq!(p.explainer_role, p.path[1].role);
            match p.path[1].role {
                StageRole::GoodVsUsable => {
                    assert_ne!(p.label, QualityLabel::Unusable, "model-2 can never emit unusable")
                }
                StageRole::UsableVsUnusable => {
                    assert_ne!(p.label, QualityLabel::Good, "model-3 can never emit good")
                }
                StageRole::HighVsLow => panic!("gate ran as a second stage"),
            }
            total += 1;
        }
    }
    assert!(total >= 10_000);
    println!("ACCEPT F: PASS  routing invariants over {total} randomized predictions");
}

// ── criterion G: saliency properties over >= 50 random networks ──

#[test]
fn criterion_g_gradcam_properties() {
    let mut r = rng(31);
    for seed in 0..50u64 {
        let dense = seed % 2 == 0;
        let config = if dense {
            ArchConfig::Dense(tiny_dense_cfg())
        } else {
            ArchConfig::Eff(tiny_eff_cfg())
        };
        let mut net = build_network(&config, 2, seed).unwrap();
        let warm: Vec<f32> = (0..2 * 3 * 16 * 16).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        net.trace_train(&Tensor::new(&[2, 3, 16, 16], warm).unwrap()).unwrap();
        let image_data: Vec<f32> = (0..3 * 16 * 16).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let image = Tensor::new(&[3, 16, 16], image_data).unwrap();
        let class = r.gen_range(0..2usize);

        let map = grad_cam(&net, &image, class).unwrap();
        assert!(map.raw.data().iter().all(|&v| v >= 0.0), "seed {seed}: negative raw saliency");
        assert_eq!(map.upsampled.shape(), &[16, 16], "seed {seed}");
        assert_eq!(map.normalized.shape(), &[16, 16], "seed {seed}");

        // bias shift on the scored class must not change the map at all
        let mut shifted = net.clone();
        let last_fc = format!("head.fc{}", 1);
        shifted.param_mut(&format!("{last_fc}.bias")).unwrap().data_mut()[class] += 2.5;
        let map2 = grad_cam(&shifted, &image, class).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&map.raw), bits(&map2.raw), "seed {seed}: bias shift changed the map");
        assert_eq!(bits(&map.normalized), bits(&map2.normalized), "seed {seed}");

        // zeroed final-layer weight row for the class kills the gradient
        let mut dead = net.clone();
        {
            let w = dead.param_mut(&format!("{last_fc}.weight")).unwrap();
            let cols = w.shape()[1];
            let row = class;
            let data = w.data_mut();
            for c in 0..cols {
                data[row * cols + c] = 0.0;
            }
        }
        let map3 = grad_cam(&dead, &image, class).unwrap();
        assert!(
            map3.raw.data().iter().all(|&v| v == 0.0),
            "seed {seed}: zero head weights must give a zero map"
        );
        assert!(map3.normalized.data().iter().all(|&v| v == 0.0), "seed {seed}");
    }
    println!("ACCEPT G: PASS  saliency properties over 50 random networks (both families)");
}

// ── criterion H: end-to-end desk-scale experiment ──

#[test]
fn criterion_h_end_to_end_desk_scale() {
    let started = std::time::Instant::now();
    let dir = std::env::temp_dir().join("fundus_dqa_acceptance_e2e");
    let _ = std::fs::remove_dir_all(&dir);

    let synth_cfg = SyntheticConfig {
        resolution: 64,
        train: SplitCounts::balanced(300),
        test: SplitCounts::balanced(100),
        degradations: DegradationKind::ALL.to_vec(),
        seed: 42,
    };
    let manifest = synthesize(&synth_cfg, &dir).unwrap();
    assert_eq!(manifest.class_counts(Split::Train), [300, 300, 300]);
    assert_eq!(manifest.class_counts(Split::Test), [100, 100, 100]);

    let pre = PreprocessConfig { resolution: 64, ..Default::default() };
    let train = load_dataset(&manifest, &dir, Split::Train, &pre).unwrap();
    let test = load_dataset(&manifest, &dir, Split::Test, &pre).unwrap();

    // default hierarchy: dense / dense / eff. The cheap third stage gets a
    // longer budget; the stages train independently.
    let mut config = HierarchyTrainConfig::default();
    config.hyperparams = Hyperparams {
        epochs: 8,
        batch_size: 16,
        learning_rate: 2e-3,
        weight_decay: 1e-4,
        ..Default::default()
    };
    config.stages[2].epochs = Some(24);
    config.stages[2].learning_rate = Some(3e-3);

    // the flat baseline shares no state with the stages; train it alongside
    let ((hc, report), flat) = std::thread::scope(|scope| {
        let hyperparams = config.hyperparams.clone();
        let flat_config = config.stages[0].config.clone();
        let train_ref = &train;
        let flat_handle = scope.spawn(move || {
            let flat = build_flat_baseline(&flat_config, 11)?;
            train_flat(flat, train_ref, &hyperparams, 13)
        });
        let hier = train_hierarchy(&train, &config, 7).unwrap();
        let (flat, _) = flat_handle.join().expect("flat training thread").unwrap();
        (hier, flat)
    });

    let comparison = compare_models(&hc, &flat, &test).unwrap();
    let out = dir.join("comparison_report.txt");
    std::fs::write(&out, comparison.to_text()).unwrap();

    let elapsed = started.elapsed();
    for stage in &report.stages {
        println!(
            "  {} ({}): {} images, final loss {:.4}",
            stage.role.model_name(),
            stage.backbone,
            stage.train_size,
            stage.loss_history.last().unwrap()
        );
    }
    println!(
        "  hierarchical accuracy {:.4} | flat accuracy {:.4} | {:.0}s elapsed",
        comparison.hierarchical.accuracy,
        comparison.flat.accuracy,
        elapsed.as_secs_f64()
    );
    assert!(
        comparison.hierarchical.accuracy >= 0.90,
        "hierarchical test accuracy {:.4} below the 0.90 gate",
        comparison.hierarchical.accuracy
    );
    assert!(
        elapsed.as_secs() < 900,
        "end-to-end run took {:.0}s, budget is 900s on a 4-core desktop",
        elapsed.as_secs_f64()
    );
    println!(
        "ACCEPT H: PASS  desk-scale experiment, accuracy {:.4} in {:.0}s (report at {})",
        comparison.hierarchical.accuracy,
        elapsed.as_secs_f64(),
        out.display()
    );
}

// ── criterion I: checkpoint round-trip ──

#[test]
fn criterion_i_checkpoint_roundtrip() {
    let mut r = rng(4);
    let mut net = build_micro_densenet(&tiny_dense_cfg(), 2, 17).unwrap();
    let warm: Vec<f32> = (0..2 * 3 * 16 * 16).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    net.trace_train(&Tensor::new(&[2, 3, 16, 16], warm).unwrap()).unwrap();

    let bytes = checkpoint_bytes(&net);
    let loaded = network_from_bytes(&bytes).unwrap();
    let image_data: Vec<f32> = (0..3 * 16 * 16).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    let image = Tensor::new(&[3, 16, 16], image_data).unwrap();
    let a = net.forward(&image).unwrap();
    let b = loaded.forward(&image).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        "forward outputs must be bitwise identical after reload"
    );
    assert_eq!(checkpoint_bytes(&loaded), bytes, "re-save must be byte-identical");
    println!("ACCEPT I: PASS  checkpoint round-trip bitwise, re-save byte-identical");
}

// ── criterion J: synthetic labeler over 1000 random draws ──

#[test]
fn criterion_j_synthetic_labeler() {
    let mut r = rng(5);
    for _ in 0..1000 {
        let f: f64 = if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.0..1.0) };
        let intact = r.gen_bool(0.8);
        let expected = if !intact || f > 0.20 {
            QualityLabel::Unusable
        } else if f > 0.0 {
            QualityLabel::Usable
        } else {
            QualityLabel::Good
        };
        assert_eq!(quality_label(intact, f), expected, "f={f}, intact={intact}");
    }
    println!("ACCEPT J: PASS  labeler matches the three-case rule on 1000 draws");
}

// ── criterion K: conditional real-manifest check ──

#[test]
fn criterion_k_eyeq_manifest_counts_if_present() {
    let Some(dir) = std::env::var_os("EYEQ_DIR").map(std::path::PathBuf::from) else {
        println!("ACCEPT K: SKIPPED  (EYEQ_DIR not set; conditional criterion)");
        return;
    };
    let train = load_manifest(dir.join("Label_EyeQ_train.csv"), Split::Train)
        .expect("EyeQ train manifest readable");
    let test =
        load_manifest(dir.join("Label_EyeQ_test.csv"), Split::Test).expect("EyeQ test manifest readable");
    assert_eq!(train.class_counts(Split::Train), [8347, 1896, 2320]);
    assert_eq!(test.class_counts(Split::Test), [8471, 4558, 3220]);
    println!("ACCEPT K: PASS  EyeQ manifest counts match the published composition");
}

// sanity: normalized reconstruction rows re-sum to one within 1e-3 of the
// published display rounding
#[test]
fn published_normalized_rows_are_consistent() {
    for percent in [&C1_PERCENT, &C2_PERCENT] {
        for row in percent.iter() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 100.0).abs() <= 0.1, "row {row:?} sums to {sum}");
        }
        let cm = reconstruct_counts(percent);
        let n = normalize_rows(&cm);
        for (i, row) in n.rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert!(
                    (v * 100.0 - percent[i][j]).abs() <= 0.051,
                    "({i},{j}): normalized {v:.5} vs published {}",
                    percent[i][j]
                );
            }
        }
    }
}
