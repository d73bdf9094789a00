//! End-to-end flow on a desk-miniature network: all three phases, archive
//! round-trips, export artifacts, and hardened-execution agreement.

use lutnn::grad::{Ctx, Value};
use lutnn::netlist::{harden, input_planes, simulate, trainer_hardened_forward};
use lutnn::pipeline::{
    export, load_datasets, run_phase1, run_phase2, run_phase3, Metrics, ModelArchive, Phase,
    PipelineConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config(out: &std::path::Path, k: usize, p: usize, density: f64) -> PipelineConfig {
    let mut cfg: PipelineConfig = serde_json::from_value(serde_json::json!({
        "seed": 11,
        "dataset": {"kind": "synthetic", "train": 256, "test": 128, "features": 24, "classes": 4, "noise": 0.4},
        "network": {"input": [24], "layers": [
            {"kind": "dense", "outputs": 20},
            {"kind": "dense", "outputs": 16},
            {"kind": "dense", "outputs": 4}
        ]},
        "train": {"epochs": [3, 2, 3], "batch_size": 32, "lr": 0.01},
        "prune": {"density": density},
        "expand": {"k": k, "p": p}
    }))
    .unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn run_flow(cfg: &PipelineConfig) -> (ModelArchive, ModelArchive, ModelArchive, Metrics) {
    let (train, test) = load_datasets(cfg).unwrap();
    let mut metrics = Metrics::default();
    let p1 = run_phase1(cfg, &train, &test, &mut metrics, true).unwrap();
    let p2 = run_phase2(&p1, &train, &test, &mut metrics, true).unwrap();
    let p3 = run_phase3(&p2, &train, &test, &mut metrics, true).unwrap();
    (p1, p2, p3, metrics)
}

#[test]
fn three_phase_flow_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3, 0, 0.5);
    let (p1, p2, p3, metrics) = run_flow(&cfg);
    assert_eq!(p1.phase, Phase::Trained);
    assert_eq!(p2.phase, Phase::Pruned);
    assert_eq!(p3.phase, Phase::Expanded);

    // phase ordering is enforced
    let (train, test) = load_datasets(&cfg).unwrap();
    let mut m = Metrics::default();
    assert!(run_phase3(&p1, &train, &test, &mut m, true).is_err());
    assert!(run_phase2(&p2, &train, &test, &mut m, true).is_err());

    // archives round-trip to identical bytes
    let path = dir.path().join("phase3.json");
    p3.save(&path).unwrap();
    let loaded = ModelArchive::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), p3.to_bytes().unwrap());

    // export writes every artifact; re-export is byte-identical
    let artifacts = export(&p3, &metrics, dir.path()).unwrap();
    let first = std::fs::read(&artifacts.verilog_generic).unwrap();
    let netlist_first = std::fs::read(&artifacts.netlist).unwrap();
    export(&p3, &metrics, dir.path()).unwrap();
    assert_eq!(std::fs::read(&artifacts.verilog_generic).unwrap(), first);
    assert_eq!(std::fs::read(&artifacts.netlist).unwrap(), netlist_first);
    assert!(artifacts.verilog_primitive.exists());
    assert!(artifacts.area_json.exists());
    assert!(artifacts.metrics_csv.exists());
}

#[test]
fn hardened_trainer_matches_simulator() {
    for (k, p, density) in [(3usize, 0usize, 0.5), (3, 1, 0.6)] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path(), k, p, density);
        let (_, _, p3, _) = run_flow(&cfg);
        let hard = harden(&p3.network, &p3.input_shape).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..200 {
            let x: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let planes = input_planes(&x, hard.input_gamma);
            let sim_scores = simulate(&hard, &planes).unwrap();
            let trainer_scores = trainer_hardened_forward(&p3.network, &hard, &planes).unwrap();
            assert_eq!(sim_scores, trainer_scores, "k={k} p={p}");
        }
    }
}

#[test]
fn conv_network_full_flow_with_hardening() {
    // reduced CNN recipe: conv targets expand within the kernel window
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: PipelineConfig = serde_json::from_value(serde_json::json!({
        "seed": 5,
        "dataset": {"kind": "synthetic", "train": 128, "test": 64,
                     "features": 100, "classes": 3, "noise": 0.8},
        "network": {"input": [1, 10, 10], "layers": [
            {"kind": "conv2d", "outputs": 4, "kernel": 3},
            {"kind": "maxpool", "window": 2},
            {"kind": "conv2d", "outputs": 6, "kernel": 2},
            {"kind": "dense", "outputs": 3}
        ]},
        "train": {"epochs": [2, 1, 1], "batch_size": 32, "lr": 0.01},
        "prune": {"density": 0.7},
        "expand": {"k": 3, "p": 0, "layers": [2]}
    }))
    .unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    let (p2, p3, metrics) = {
        let (train, test) = load_datasets(&cfg).unwrap();
        let mut metrics = Metrics::default();
        let p1 = run_phase1(&cfg, &train, &test, &mut metrics, true).unwrap();
        let p2 = run_phase2(&p1, &train, &test, &mut metrics, true).unwrap();
        let p3 = run_phase3(&p2, &train, &test, &mut metrics, true).unwrap();
        (p2, p3, metrics)
    };
    assert_eq!(p2.phase, Phase::Pruned);
    assert!(p3
        .network
        .layers
        .iter()
        .any(|l| matches!(l, lutnn::grad::Layer::Lut(_))));

    // hardened equivalence holds through conv, pool, and lut-conv stages
    let hard = harden(&p3.network, &p3.input_shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..100 {
        let x: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let planes = input_planes(&x, hard.input_gamma);
        assert_eq!(
            simulate(&hard, &planes).unwrap(),
            trainer_hardened_forward(&p3.network, &hard, &planes).unwrap()
        );
    }

    // netlist archive round-trips to identical bytes
    let artifacts = export(&p3, &metrics, dir.path()).unwrap();
    let bytes = std::fs::read(&artifacts.netlist).unwrap();
    let loaded = lutnn::pipeline::NetlistArchive::load(&artifacts.netlist).unwrap();
    assert_eq!(serde_json::to_vec(&loaded).unwrap(), bytes);
}

#[test]
fn degenerate_expansion_matches_pruned_network_exactly() {
    // (1, 0, 1) expansion with zero retraining epochs: the expanded
    // network is the pruned network, bit for bit.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), 1, 0, 0.5);
    cfg.train.epochs = [2, 1, 0];
    let (train, test) = load_datasets(&cfg).unwrap();
    let mut metrics = Metrics::default();
    let p1 = run_phase1(&cfg, &train, &test, &mut metrics, true).unwrap();
    let p2 = run_phase2(&p1, &train, &test, &mut metrics, true).unwrap();
    let p3 = run_phase3(&p2, &train, &test, &mut metrics, true).unwrap();

    let mut phase2_net = p2.network.clone();
    let mut expanded_net = p3.network.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 64;
    let x: Vec<f64> = (0..24 * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = lutnn::Tensor::from_vec(&[n, 24], x).unwrap();
    let ya = phase2_net
        .forward(Value::Real(x.clone()), &Ctx::eval())
        .unwrap()
        .expect_real("t")
        .unwrap();
    let yb = expanded_net
        .forward(Value::Real(x), &Ctx::eval())
        .unwrap()
        .expect_real("t")
        .unwrap();
    assert_eq!(ya.data(), yb.data(), "degenerate expansion must be exact");
}
