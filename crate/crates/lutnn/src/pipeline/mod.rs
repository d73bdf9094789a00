//! Orchestration of the three-phase flow: high-precision training,
//! pruning with retraining, logic expansion with retraining, and export
//! to a hardened netlist with Verilog, an area report, and metrics.

pub mod archive;
pub mod config;
pub mod dataset;
pub mod metrics;

pub use archive::{ModelArchive, NetlistArchive, Phase, ARCHIVE_FORMAT_VERSION};
pub use config::{
    DatasetConfig, ExpandConfig, LayerConfig, NetworkConfig, PipelineConfig, PruneConfig,
    PruneScope, TrainConfig,
};
pub use dataset::{load_mnist, synthetic, Dataset};
pub use metrics::{Metrics, MetricsRow};

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::{
    softmax_cross_entropy, BatchNorm, BinActs, Binarize, Conv2d, Ctx, Dense, GradFlow, Layer,
    MaxPool2d, Network, Optimizer, Padding, Value,
};
use crate::lut::{expand_conv, expand_layer, ExpandSpec, Expansion, ReconnectWeights};
use crate::netlist::{area_report, emit_verilog, harden, HardNetlist, VerilogStyle};
use crate::prune::{prune_threshold, threshold_for_density, PruneMask};
use crate::quant::{accumulate_regularizer_grad, sparsity_regularizer};
use crate::tensor::Tensor;

const EXPAND_SEED_SALT: u64 = 0x6578706e;
/// Abort threshold for the expansion-equivalence check.
const EXPANSION_TOL: f64 = 1e-6;
/// Random inputs used by the expansion-equivalence check.
const EXPANSION_CHECK_SAMPLES: usize = 100;

/// Load the train and test splits named by the configuration.
pub fn load_datasets(cfg: &PipelineConfig) -> Result<(Dataset, Dataset)> {
    match &cfg.dataset {
        DatasetConfig::Mnist {
            dir,
            train_limit,
            test_limit,
        } => {
            let mut train = load_mnist(dir, true)?;
            let mut test = load_mnist(dir, false)?;
            if let Some(n) = train_limit {
                train = train.truncated(*n);
            }
            if let Some(n) = test_limit {
                test = test.truncated(*n);
            }
            Ok((train, test))
        }
        DatasetConfig::Synthetic {
            train,
            test,
            features,
            classes,
            noise,
        } => {
            let all = synthetic(cfg.seed, train + test, *features, *classes, *noise);
            let test_ds = Dataset {
                images: Tensor::from_vec(
                    &[*test, *features],
                    all.images.data()[train * features..].to_vec(),
                )?,
                labels: all.labels[*train..].to_vec(),
                classes: *classes,
            };
            let train_ds = all.truncated(*train);
            Ok((train_ds, test_ds))
        }
    }
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, same: bool) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be >= 1"));
    }
    if same {
        Ok(input.div_ceil(stride))
    } else if kernel > input {
        Err(Error::config(format!(
            "kernel {kernel} larger than input extent {input}"
        )))
    } else {
        Ok((input - kernel) / stride + 1)
    }
}

/// Build the phase-1 network: real weights, sign activations between
/// blocks, batch normalization after every compute layer.
pub fn build_phase1_network(cfg: &PipelineConfig) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shape = cfg.network.input.clone();
    let compute = cfg.compute_layers();
    let last_compute = *compute.last().expect("validated: at least one layer");
    let mut layers = Vec::new();
    for (i, lc) in cfg.network.layers.iter().enumerate() {
        match lc {
            LayerConfig::Dense { outputs } => {
                let in_dim: usize = shape.iter().product();
                layers.push(Layer::Dense(Dense::new(*outputs, in_dim, &mut rng)));
                layers.push(Layer::BatchNorm(BatchNorm::new(*outputs)));
                if i != last_compute {
                    layers.push(Layer::Binarize(Binarize::sign()));
                }
                shape = vec![*outputs];
            }
            LayerConfig::Conv2d {
                outputs,
                kernel,
                stride,
                same_padding,
            } => {
                if shape.len() != 3 {
                    return Err(Error::config(format!(
                        "conv layer needs a [c, h, w] input, got {shape:?}"
                    )));
                }
                let padding = if *same_padding {
                    Padding::Same
                } else {
                    Padding::Valid
                };
                layers.push(Layer::Conv2d(Conv2d::new(
                    *outputs, shape[0], *kernel, *stride, padding, &mut rng,
                )));
                layers.push(Layer::BatchNorm(BatchNorm::new(*outputs)));
                if i != last_compute {
                    layers.push(Layer::Binarize(Binarize::sign()));
                }
                shape = vec![
                    *outputs,
                    conv_out_extent(shape[1], *kernel, *stride, *same_padding)?,
                    conv_out_extent(shape[2], *kernel, *stride, *same_padding)?,
                ];
            }
            LayerConfig::Maxpool { window } => {
                if shape.len() != 3 || !shape[1].is_multiple_of(*window) || !shape[2].is_multiple_of(*window) {
                    return Err(Error::config(format!(
                        "maxpool window {window} does not divide {shape:?}"
                    )));
                }
                layers.push(Layer::MaxPool2d(MaxPool2d::new(*window)));
                shape = vec![shape[0], shape[1] / window, shape[2] / window];
            }
        }
    }
    Ok(Network::new(layers))
}

/// Network-layer indices of compute layers (dense/conv/lut), in order.
pub fn network_compute_indices(net: &Network) -> Vec<usize> {
    net.layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::Dense(_) | Layer::Conv2d(_) | Layer::Lut(_)))
        .map(|(i, _)| i)
        .collect()
}

/// Mean top-1 error over a dataset.
pub fn evaluate(net: &mut Network, ds: &Dataset, batch_size: usize, input_shape: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    let mut seen = 0usize;
    let mut i = 0usize;
    while i < ds.len() {
        let hi = (i + batch_size).min(ds.len());
        let idx: Vec<usize> = (i..hi).collect();
        let (x, labels) = ds.batch(&idx);
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(input_shape);
        let x = x.reshaped(&shape)?;
        let out = net
            .forward(Value::Real(x), &Ctx::eval())?
            .expect_real("network head")?;
        let lo = softmax_cross_entropy(&out, &labels)?;
        correct += lo.correct;
        seen += labels.len();
        i = hi;
    }
    Ok(1.0 - correct as f64 / seen.max(1) as f64)
}

fn current_lut_counts(net: &Network) -> (usize, usize) {
    let mut logical = 0usize;
    let mut physical = 0usize;
    for l in &net.layers {
        if let Layer::Lut(lut) = l {
            logical += lut.logical_ops();
            physical += lut.nodes.len();
        }
    }
    (logical, physical)
}

/// Surviving fraction over every layer that went through pruning: masked
/// dense/conv weights plus the node grids of expanded layers.
fn current_density(net: &Network) -> f64 {
    let mut kept = 0usize;
    let mut total = 0usize;
    for l in &net.layers {
        match l {
            Layer::Dense(d) => {
                if let Some(m) = &d.mask {
                    kept += m.kept();
                    total += m.len();
                }
            }
            Layer::Conv2d(c) => {
                if let Some(m) = &c.mask {
                    kept += m.kept();
                    total += m.len();
                }
            }
            Layer::Lut(lut) => {
                let grid = match lut.geometry {
                    crate::lut::LutGeometry::Dense { in_dim, out_dim } => in_dim * out_dim,
                    crate::lut::LutGeometry::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        ..
                    } => in_channels * out_channels * kernel * kernel,
                };
                kept += lut.logical_ops();
                total += grid;
            }
            _ => {}
        }
    }
    if total == 0 {
        1.0
    } else {
        kept as f64 / total as f64
    }
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    net: &mut Network,
    phase: u32,
    cfg: &PipelineConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    metrics: &mut Metrics,
    quiet: bool,
) -> Result<()> {
    let epochs = cfg.train.epochs[(phase - 1) as usize];
    let lr = cfg.train.lr * cfg.train.phase_lr_scale[(phase - 1) as usize];
    let mut opt = Optimizer::new(cfg.train.optimizer, lr);
    let lambda = if phase == 1 { cfg.train.lambda } else { 0.0 };
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_mul(0x9e37_79b9)
                .wrapping_add(phase as u64 * 1_000_003)
                .wrapping_add(epoch as u64),
        );
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut epoch_omega = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.train.batch_size) {
            let (x, labels) = train_ds.batch(chunk);
            let mut shape = vec![chunk.len()];
            shape.extend_from_slice(&cfg.network.input);
            let x = x.reshaped(&shape)?;
            net.zero_grads();
            let out = net
                .forward(Value::Real(x), &Ctx::train())?
                .expect_real("network head")?;
            let lo = softmax_cross_entropy(&out, &labels)?;
            let mut omega = 0.0;
            if lambda > 0.0 {
                let (om, sum_sq) = sparsity_regularizer(net.prunable_weights(), lambda);
                omega = om;
                net.backward(GradFlow::Real(lo.dlogits))?;
                for layer in &mut net.layers {
                    match layer {
                        Layer::Dense(d) => accumulate_regularizer_grad(
                            d.weight.data(),
                            &mut d.gweight,
                            lambda,
                            sum_sq,
                        ),
                        Layer::Conv2d(c) => accumulate_regularizer_grad(
                            c.weight.data(),
                            &mut c.gweight,
                            lambda,
                            sum_sq,
                        ),
                        _ => {}
                    }
                }
            } else {
                net.backward(GradFlow::Real(lo.dlogits))?;
            }
            opt.step(net);
            epoch_loss += lo.loss + omega;
            epoch_omega += omega;
            batches += 1;
        }
        let mean_loss = epoch_loss / batches.max(1) as f64;
        let mean_omega = epoch_omega / batches.max(1) as f64;
        let test_error = evaluate(net, test_ds, cfg.train.batch_size, &cfg.network.input)?;
        let (logical, physical) = current_lut_counts(net);
        metrics.push(MetricsRow {
            phase,
            epoch,
            loss: mean_loss,
            top1_error: test_error,
            density: current_density(net),
            logical_luts: logical,
            est_physical_luts: physical,
        });
        if !quiet {
            println!(
                "phase {phase} epoch {:>3}/{epochs} loss {mean_loss:.5} omega {mean_omega:.3e} test-err {:.2}%",
                epoch + 1,
                test_error * 100.0
            );
        }
    }
    Ok(())
}

/// Phase 1: high-precision training with the sparsification regularizer.
pub fn run_phase1(
    cfg: &PipelineConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    metrics: &mut Metrics,
    quiet: bool,
) -> Result<ModelArchive> {
    cfg.validate()?;
    let mut net = build_phase1_network(cfg)?;
    run_training(&mut net, 1, cfg, train_ds, test_ds, metrics, quiet)?;
    Ok(ModelArchive {
        version: ARCHIVE_FORMAT_VERSION,
        phase: Phase::Trained,
        seed: cfg.seed,
        input_shape: cfg.network.input.clone(),
        pre_prune: Vec::new(),
        config: cfg.clone(),
        network: net,
    })
}

/// Tile-uniform mask: a node position survives when the mean magnitude of
/// its weights across all tiles clears the threshold.
fn position_mask(
    w: &Tensor,
    out_units: usize,
    total_slots: usize,
    t_i: usize,
    t_o: usize,
    theta: f64,
) -> PruneMask {
    let rows = out_units / t_o;
    let group = total_slots / t_i;
    let tiles = (t_i * t_o) as f64;
    let mut keep = vec![false; w.len()];
    for r in 0..rows {
        for c in 0..group {
            let mut mag = 0.0;
            for a in 0..t_o {
                for b in 0..t_i {
                    mag += w.data()[(a * rows + r) * total_slots + b * group + c].abs();
                }
            }
            let keep_pos = mag / tiles > theta;
            for a in 0..t_o {
                for b in 0..t_i {
                    keep[(a * rows + r) * total_slots + b * group + c] = keep_pos;
                }
            }
        }
    }
    PruneMask {
        keep,
        threshold: theta,
    }
}

/// Phase 2: magnitude pruning to the target density (or threshold), then
/// retraining with two-level residual-binarized activations. Masks persist
/// through every later phase.
pub fn run_phase2(
    archive: &ModelArchive,
    train_ds: &Dataset,
    test_ds: &Dataset,
    metrics: &mut Metrics,
    quiet: bool,
) -> Result<ModelArchive> {
    if archive.phase != Phase::Trained {
        return Err(Error::config(format!(
            "pruning requires a phase-1 archive, found {:?}",
            archive.phase
        )));
    }
    let cfg = &archive.config;
    let mut net = archive.network.clone();

    // Residual binarization replaces the plain sign activations, plus an
    // input binarizer at the front. Done before the weight snapshot so all
    // recorded indices refer to the phase-2 layer layout.
    for layer in &mut net.layers {
        if let Layer::Binarize(b) = layer {
            *b = Binarize::residual();
        }
    }
    net.layers.insert(0, Layer::Binarize(Binarize::residual()));

    // Snapshot weights before masking; expansion reads reconnection values
    // from these.
    let mut pre_prune = Vec::new();
    for idx in network_compute_indices(&net) {
        let w = match &net.layers[idx] {
            Layer::Dense(d) => d.weight.clone(),
            Layer::Conv2d(c) => c.weight.clone(),
            _ => continue,
        };
        pre_prune.push((idx, w));
    }

    let targets: Vec<usize> = cfg.expand_targets();
    let compute_cfg = cfg.compute_layers();
    let net_compute = network_compute_indices(&net);
    let in_scope = |cfg_idx: usize| match cfg.prune.scope {
        PruneScope::All => true,
        PruneScope::Targets => targets.contains(&cfg_idx),
    };

    // One threshold from the density target over the in-scope weights,
    // unless a threshold is given explicitly.
    let theta = match (cfg.prune.threshold, cfg.prune.density) {
        (Some(t), _) => t,
        (None, Some(d)) => {
            let mut scoped: Vec<&[f64]> = Vec::new();
            for (ci, &net_idx) in net_compute.iter().enumerate() {
                if !in_scope(compute_cfg[ci]) {
                    continue;
                }
                match &net.layers[net_idx] {
                    Layer::Dense(l) => scoped.push(l.weight.data()),
                    Layer::Conv2d(l) => scoped.push(l.weight.data()),
                    _ => {}
                }
            }
            threshold_for_density(scoped, d)?
        }
        (None, None) => 0.0,
    };
    let per_layer: std::collections::BTreeMap<usize, f64> =
        cfg.prune.per_layer_threshold.iter().cloned().collect();

    let tiled = cfg.expand.t_i * cfg.expand.t_o > 1;
    for (ci, &net_idx) in net_compute.iter().enumerate() {
        let cfg_idx = compute_cfg[ci];
        if !in_scope(cfg_idx) {
            continue;
        }
        let layer_theta = per_layer.get(&cfg_idx).copied().unwrap_or(theta);
        let is_target = targets.contains(&cfg_idx);
        match &mut net.layers[net_idx] {
            Layer::Dense(d) => {
                let mask = if tiled && is_target {
                    position_mask(
                        &d.weight,
                        d.out_dim,
                        d.in_dim,
                        cfg.expand.t_i,
                        cfg.expand.t_o,
                        layer_theta,
                    )
                } else {
                    prune_threshold(&d.weight, layer_theta)
                };
                mask.apply(d.weight.data_mut());
                d.mask = Some(mask);
            }
            Layer::Conv2d(c) => {
                let mask = if tiled && is_target {
                    position_mask(
                        &c.weight,
                        c.out_channels,
                        c.in_channels * c.kernel * c.kernel,
                        cfg.expand.t_i,
                        cfg.expand.t_o,
                        layer_theta,
                    )
                } else {
                    prune_threshold(&c.weight, layer_theta)
                };
                mask.apply(c.weight.data_mut());
                c.mask = Some(mask);
            }
            _ => {}
        }
    }

    // Calibrate level scales on the first training batch, deterministically.
    let calib: Vec<usize> = (0..cfg.train.batch_size.min(train_ds.len())).collect();
    let (x, _) = train_ds.batch(&calib);
    let mut shape = vec![calib.len()];
    shape.extend_from_slice(&cfg.network.input);
    net.forward(Value::Real(x.reshaped(&shape)?), &Ctx::eval())?;

    let achieved = current_density(&net);
    if !quiet {
        println!(
            "pruned with theta {theta:.6}: density {:.4} ({:.2}% weights kept)",
            achieved,
            achieved * 100.0
        );
    }
    run_training(&mut net, 2, cfg, train_ds, test_ds, metrics, quiet)?;

    Ok(ModelArchive {
        version: ARCHIVE_FORMAT_VERSION,
        phase: Phase::Pruned,
        seed: archive.seed,
        input_shape: archive.input_shape.clone(),
        pre_prune,
        config: cfg.clone(),
        network: net,
    })
}

/// Verify that an expansion's forward reproduces the linear reference its
/// initialization encodes, on random binary inputs; aborts on mismatch.
fn verify_expansion(
    expansion: &mut Expansion,
    gamma: [f64; 2],
    input_shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n: usize = input_shape.iter().product();
    let batch = EXPANSION_CHECK_SAMPLES;
    let mut shape = vec![batch];
    shape.extend_from_slice(input_shape);
    let rand_plane = |rng: &mut ChaCha8Rng| -> Tensor {
        Tensor::from_vec(
            &shape,
            (0..batch * n)
                .map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect(),
        )
        .expect("sized")
    };
    let p0 = rand_plane(rng);
    let p1 = rand_plane(rng);
    let acts = BinActs {
        planes: [p0.clone(), p1.clone()],
        gamma,
    };
    let got = expansion
        .layer
        .forward(Value::Planes(acts), &Ctx::eval())?
        .expect_real("expansion check")?;

    // Reference: per-plane linear maps with the initialization's effective
    // weights, recombined identically.
    let refw = &expansion.reference_weight;
    let (out_units, slots) = (refw.shape()[0], refw.shape()[1]);
    let alpha = expansion.layer.alpha;
    let reference_dense = |plane: &Tensor, out: &mut [f64], b: usize| {
        for o in 0..out_units {
            let mut acc = 0.0;
            let row = &refw.data()[o * slots..(o + 1) * slots];
            let x = &plane.data()[b * n..b * n + n];
            for i in 0..slots {
                acc += row[i] * x[i];
            }
            out[o] = acc;
        }
    };
    match expansion.layer.geometry {
        crate::lut::LutGeometry::Dense { .. } => {
            let mut worst = 0.0f64;
            for b in 0..batch {
                let mut s0 = vec![0.0; out_units];
                let mut s1 = vec![0.0; out_units];
                reference_dense(&p0, &mut s0, b);
                reference_dense(&p1, &mut s1, b);
                for o in 0..out_units {
                    let want = alpha * (gamma[0] * s0[o] + gamma[1] * s1[o]);
                    let have = got.data()[b * out_units + o];
                    let err = (want - have).abs() / want.abs().max(1.0);
                    worst = worst.max(err);
                }
            }
            if worst > EXPANSION_TOL {
                return Err(Error::internal(format!(
                    "expansion equivalence check failed: relative error {worst:.3e} \
                     exceeds {EXPANSION_TOL:.0e}"
                )));
            }
        }
        crate::lut::LutGeometry::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
        } => {
            let (h, w) = (input_shape[1], input_shape[2]);
            let oh = (h - kernel) / stride + 1;
            let ow = (w - kernel) / stride + 1;
            let mut worst = 0.0f64;
            for b in 0..batch {
                for oc in 0..out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut sums = [0.0f64; 2];
                            for (pi, plane) in [&p0, &p1].iter().enumerate() {
                                let mut acc = 0.0;
                                for ci in 0..in_channels {
                                    for ky in 0..kernel {
                                        for kx in 0..kernel {
                                            let slot = (ci * kernel + ky) * kernel + kx;
                                            let iy = oy * stride + ky;
                                            let ix = ox * stride + kx;
                                            acc += refw.data()
                                                [oc * in_channels * kernel * kernel + slot]
                                                * plane.data()
                                                    [b * n + (ci * h + iy) * w + ix];
                                        }
                                    }
                                }
                                sums[pi] = acc;
                            }
                            let want = alpha * (gamma[0] * sums[0] + gamma[1] * sums[1]);
                            let have = got.data()
                                [((b * out_channels + oc) * oh + oy) * ow + ox];
                            let err = (want - have).abs() / want.abs().max(1.0);
                            worst = worst.max(err);
                        }
                    }
                }
            }
            if worst > EXPANSION_TOL {
                return Err(Error::internal(format!(
                    "conv expansion equivalence check failed: relative error {worst:.3e}"
                )));
            }
        }
    }
    Ok(())
}

/// Phase 3: expand target layers into LUT nodes (verified to reproduce the
/// reference function before any retraining step), then retrain.
pub fn run_phase3(
    archive: &ModelArchive,
    train_ds: &Dataset,
    test_ds: &Dataset,
    metrics: &mut Metrics,
    quiet: bool,
) -> Result<ModelArchive> {
    if archive.phase != Phase::Pruned {
        return Err(Error::config(format!(
            "expansion requires a phase-2 archive, found {:?}",
            archive.phase
        )));
    }
    let cfg = &archive.config;
    let mut net = archive.network.clone();
    let phase2_net = archive.network.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(archive.seed ^ EXPAND_SEED_SALT);

    let spec = ExpandSpec {
        k: cfg.expand.k,
        p: cfg.expand.p,
        t_i: cfg.expand.t_i,
        t_o: cfg.expand.t_o,
        reconnect: cfg.expand.reconnect,
    };
    let targets = cfg.expand_targets();
    let compute_cfg = cfg.compute_layers();
    let net_compute = network_compute_indices(&net);

    // Track input shapes per compute layer for conv expansion checks.
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    {
        let mut shape = cfg.network.input.clone();
        let mut ci = 0usize;
        for lc in &cfg.network.layers {
            match lc {
                LayerConfig::Dense { outputs } => {
                    shapes.push(shape.clone());
                    shape = vec![*outputs];
                    ci += 1;
                }
                LayerConfig::Conv2d {
                    outputs,
                    kernel,
                    stride,
                    same_padding,
                } => {
                    shapes.push(shape.clone());
                    shape = vec![
                        *outputs,
                        conv_out_extent(shape[1], *kernel, *stride, *same_padding)?,
                        conv_out_extent(shape[2], *kernel, *stride, *same_padding)?,
                    ];
                    ci += 1;
                }
                LayerConfig::Maxpool { window } => {
                    shape = vec![shape[0], shape[1] / window, shape[2] / window];
                }
            }
        }
        let _ = ci;
    }

    for (ci, &net_idx) in net_compute.iter().enumerate() {
        let cfg_idx = compute_cfg[ci];
        if !targets.contains(&cfg_idx) {
            continue;
        }
        // Phase-2 layout: every compute layer is directly preceded by a
        // residual binarizer.
        let gamma = match &net.layers[net_idx - 1] {
            Layer::Binarize(b) => b.binarizer.gamma,
            _ => {
                return Err(Error::internal(
                    "expansion target is not preceded by a binarizer",
                ))
            }
        };
        let pre = archive
            .pre_prune
            .iter()
            .find(|(i, _)| *i == net_idx)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| {
                Error::config("archive is missing pre-pruning weights for a target layer")
            })?;
        let mut expansion = match &net.layers[net_idx] {
            Layer::Dense(d) => {
                let mask = d
                    .mask
                    .clone()
                    .ok_or_else(|| Error::config("target layer was never pruned"))?;
                expand_layer(&d.weight, &mask, &pre, d.alpha, &spec, &mut rng)?
            }
            Layer::Conv2d(c) => {
                if c.padding != Padding::Valid {
                    return Err(Error::config(
                        "expansion supports valid-padding convolutions only",
                    ));
                }
                let mask = c
                    .mask
                    .clone()
                    .ok_or_else(|| Error::config("target layer was never pruned"))?;
                expand_conv(&c.weight, &mask, &pre, c.alpha, c.stride, &spec, &mut rng)?
            }
            other => {
                return Err(Error::config(format!(
                    "cannot expand layer kind {}",
                    other.name()
                )))
            }
        };
        let mut check_rng = ChaCha8Rng::seed_from_u64(archive.seed ^ 0x636865636b);
        verify_expansion(&mut expansion, gamma, &shapes[ci], &mut check_rng)?;
        if !quiet {
            println!(
                "expanded layer {cfg_idx}: {} physical nodes (k={}, p={}, t_i={}, t_o={})",
                expansion.layer.nodes.len(),
                spec.k,
                spec.p,
                spec.t_i,
                spec.t_o
            );
        }
        net.layers[net_idx] = Layer::Lut(expansion.layer);
    }

    // With zero-weight reconnections the expanded network must reproduce
    // the phase-2 network exactly on random inputs.
    if cfg.expand.reconnect == ReconnectWeights::Zero {
        let mut a = phase2_net;
        let mut b = net.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(archive.seed ^ 0x7a65726f);
        let nfeat: usize = cfg.network.input.iter().product();
        let mut shape = vec![EXPANSION_CHECK_SAMPLES];
        shape.extend_from_slice(&cfg.network.input);
        let x = Tensor::from_vec(
            &shape,
            (0..EXPANSION_CHECK_SAMPLES * nfeat)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )?;
        let ya = a
            .forward(Value::Real(x.clone()), &Ctx::eval())?
            .expect_real("phase-2 reference")?;
        let yb = b
            .forward(Value::Real(x), &Ctx::eval())?
            .expect_real("expanded network")?;
        let worst = ya
            .data()
            .iter()
            .zip(yb.data())
            .map(|(p, q)| (p - q).abs() / p.abs().max(1.0))
            .fold(0.0f64, f64::max);
        if worst > EXPANSION_TOL {
            return Err(Error::internal(format!(
                "zero-reconnect expansion no longer matches the pruned network \
                 (relative error {worst:.3e})"
            )));
        }
    }

    run_training(&mut net, 3, cfg, train_ds, test_ds, metrics, quiet)?;

    Ok(ModelArchive {
        version: ARCHIVE_FORMAT_VERSION,
        phase: Phase::Expanded,
        seed: archive.seed,
        input_shape: archive.input_shape.clone(),
        pre_prune: archive.pre_prune.clone(),
        config: cfg.clone(),
        network: net,
    })
}

#[derive(Debug, Clone)]
pub struct ExportArtifacts {
    pub netlist: PathBuf,
    pub verilog_generic: PathBuf,
    pub verilog_primitive: PathBuf,
    pub area_json: PathBuf,
    pub area_table: PathBuf,
    pub metrics_csv: PathBuf,
    pub hard: HardNetlist,
}

fn area_table(report: &crate::netlist::AreaReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "layer", "logical", "packed", "popcount", "mask bits", "rom bits"
    ));
    for l in &report.layers {
        out.push_str(&format!(
            "{:<16} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
            l.name, l.logical_luts, l.packed_luts, l.popcount_luts, l.mask_bits, l.rom_bits
        ));
    }
    out.push_str(&format!(
        "{:<16} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "total",
        report.total_logical_luts,
        report.total_physical_luts,
        report.total_popcount_luts,
        report.total_mask_bits,
        report.total_rom_bits
    ));
    for n in &report.notes {
        out.push_str(&format!("note: {n}\n"));
    }
    out
}

/// Harden and write every export artifact atomically.
pub fn export(archive: &ModelArchive, metrics: &Metrics, out_dir: &Path) -> Result<ExportArtifacts> {
    if archive.phase < Phase::Pruned {
        return Err(Error::config(
            "export requires at least a pruned (phase-2) archive",
        ));
    }
    let hard = harden(&archive.network, &archive.input_shape)?;
    std::fs::create_dir_all(out_dir)?;
    let netlist_path = out_dir.join("netlist.json");
    NetlistArchive::new(hard.clone()).save(&netlist_path)?;
    let vg = out_dir.join("network_generic.v");
    archive::write_atomic(&vg, emit_verilog(&hard, VerilogStyle::Generic)?.as_bytes())?;
    let vp = out_dir.join("network_primitive.v");
    archive::write_atomic(&vp, emit_verilog(&hard, VerilogStyle::Primitive)?.as_bytes())?;
    let report = area_report(&hard);
    let area_json = out_dir.join("area.json");
    archive::write_atomic(&area_json, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let area_txt = out_dir.join("area.txt");
    archive::write_atomic(&area_txt, area_table(&report).as_bytes())?;
    let metrics_csv = out_dir.join("metrics.csv");
    metrics.save(&metrics_csv)?;
    Ok(ExportArtifacts {
        netlist: netlist_path,
        verilog_generic: vg,
        verilog_primitive: vp,
        area_json,
        area_table: area_txt,
        metrics_csv,
        hard,
    })
}

/// Hardened-netlist accuracy over a dataset via the integer simulator.
pub fn netlist_accuracy(
    hard: &HardNetlist,
    ds: &Dataset,
    limit: Option<usize>,
) -> Result<(f64, usize)> {
    let n = limit.unwrap_or(ds.len()).min(ds.len());
    let feat: usize = ds.sample_shape().iter().product();
    let mut correct = 0usize;
    for i in 0..n {
        let x = &ds.images.data()[i * feat..(i + 1) * feat];
        let planes = crate::netlist::input_planes(x, hard.input_gamma);
        let scores = crate::netlist::simulate(hard, &planes)?;
        let mut best = 0usize;
        for (c, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = c;
            }
        }
        if best == ds.labels[i] {
            correct += 1;
        }
    }
    Ok((correct as f64 / n.max(1) as f64, n))
}

/// The whole flow: train, prune+retrain, expand+retrain, export.
pub fn run_all(cfg: &PipelineConfig, quiet: bool) -> Result<(ModelArchive, ExportArtifacts)> {
    let (train_ds, test_ds) = load_datasets(cfg)?;
    let mut metrics = Metrics::default();
    let p1 = run_phase1(cfg, &train_ds, &test_ds, &mut metrics, quiet)?;
    p1.save(&cfg.output_dir.join("phase1.json"))?;
    let p2 = run_phase2(&p1, &train_ds, &test_ds, &mut metrics, quiet)?;
    p2.save(&cfg.output_dir.join("phase2.json"))?;
    let p3 = run_phase3(&p2, &train_ds, &test_ds, &mut metrics, quiet)?;
    p3.save(&cfg.output_dir.join("phase3.json"))?;
    let artifacts = export(&p3, &metrics, &cfg.output_dir)?;
    Ok((p3, artifacts))
}
