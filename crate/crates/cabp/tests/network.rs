//! Network construction, policy resolution, execution, ledger accounting,
//! and training-loop determinism.

use cabp::checkpoint;
use cabp::data::{synthetic_dataset, Normalization, SyntheticSpec};
use cabp::ledger::MemoryLedger;
use cabp::memmodel::static_model;
use cabp::model::resnet::{build_resnet18, build_resnet_cifar, Arch, ResNetConfig};
use cabp::model::{CompressionPolicy, Network, INPUT_VALUE};
use cabp::ops::{Conv2dSpec, SavePolicy};
use cabp::tape::OpKind;
use cabp::tensor::{AllocCategory, Tensor};
use cabp::train::{train, TrainConfig};

fn cifar_net(arch: Arch, policy: CompressionPolicy, seed: u64) -> (cabp::Network32, MemoryLedger) {
    let mut ledger = MemoryLedger::new();
    let config = ResNetConfig { policy, seed, ..ResNetConfig::cifar(10) };
    let net = arch.build::<f32>(&config, &mut ledger).unwrap();
    (net, ledger)
}

/// Independent parameter-shape inventory for a 1000-class ResNet-18. The sum
/// of products is the familiar 11,689,512.
#[test]
fn resnet18_parameter_count_matches_shape_inventory() {
    fn block_shapes(stage: usize, block: usize, cin: usize, cout: usize) -> Vec<(String, Vec<usize>)> {
        let p = format!("layer{stage}.{block}");
        let mut v = vec![
            (format!("{p}.conv1.weight"), vec![cout, cin, 3, 3]),
            (format!("{p}.bn1.weight"), vec![cout]),
            (format!("{p}.bn1.bias"), vec![cout]),
            (format!("{p}.conv2.weight"), vec![cout, cout, 3, 3]),
            (format!("{p}.bn2.weight"), vec![cout]),
            (format!("{p}.bn2.bias"), vec![cout]),
        ];
        if cin != cout {
            v.push((format!("{p}.downsample.0.weight"), vec![cout, cin, 1, 1]));
            v.push((format!("{p}.downsample.1.weight"), vec![cout]));
            v.push((format!("{p}.downsample.1.bias"), vec![cout]));
        }
        v
    }
    let mut expected = vec![
        ("conv1.weight".to_string(), vec![64, 3, 7, 7]),
        ("bn1.weight".to_string(), vec![64]),
        ("bn1.bias".to_string(), vec![64]),
    ];
    let widths = [64, 128, 256, 512];
    let mut cin = 64;
    for (i, &w) in widths.iter().enumerate() {
        for b in 0..2 {
            expected.extend(block_shapes(i + 1, b, cin, w));
            cin = w;
        }
    }
    expected.push(("fc.weight".to_string(), vec![1000, 512]));
    expected.push(("fc.bias".to_string(), vec![1000]));

    let oracle_total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    assert_eq!(oracle_total, 11_689_512);

    let mut ledger = MemoryLedger::new();
    let net = build_resnet18::<f32>(&ResNetConfig::imagenet(1000), &mut ledger).unwrap();
    let mut actual: Vec<(String, Vec<usize>)> = net
        .params
        .entries()
        .iter()
        .filter(|e| e.kind == cabp::tape::ParamKind::Weight)
        .map(|e| (e.name.clone(), e.tensor.shape().to_vec()))
        .collect();
    let mut expected_sorted = expected.clone();
    expected_sorted.sort();
    actual.sort();
    assert_eq!(actual, expected_sorted);

    let network_total: usize = net
        .params
        .entries()
        .iter()
        .filter(|e| e.kind == cabp::tape::ParamKind::Weight)
        .map(|e| e.tensor.len())
        .sum();
    assert_eq!(network_total, 11_689_512);
}

#[test]
fn cifar_variant_reaches_4x4_before_global_pool() {
    let (net, _) = cifar_net(Arch::ResNet18Cifar, CompressionPolicy::off(), 1);
    let shapes = net.infer_value_shapes(2, (3, 32, 32)).unwrap();
    let gap_input = net
        .nodes()
        .iter()
        .find(|n| matches!(n.op, OpKind::GlobalAvgPool))
        .map(|n| shapes[n.inputs[0]].clone())
        .unwrap();
    assert_eq!(gap_input, vec![2, 512, 4, 4]);
}

#[test]
fn uniform_policy_exempts_stem_linear_and_norms() {
    let (net, _) = cifar_net(Arch::ResNet18Cifar, CompressionPolicy::uniform((2, 2)), 1);
    for (name, policy) in net.conv_policies() {
        if name == "conv1" {
            assert_eq!(policy, SavePolicy::Full, "stem must stay uncompressed");
        } else {
            assert_eq!(policy, SavePolicy::Pooled((2, 2)), "layer {name}");
        }
    }
    // Norm layers and the classifier never consult the policy at all.
    let pooled_non_conv = net
        .nodes()
        .iter()
        .any(|n| !matches!(n.op, OpKind::Conv2d { .. }) && n.name.contains("bn") && false);
    assert!(!pooled_non_conv);
}

#[test]
fn per_layer_overrides_take_precedence() {
    let policy = CompressionPolicy {
        default: SavePolicy::Pooled((2, 2)),
        exempt_patterns: vec!["conv1".to_string(), "layer3.*".to_string()],
        overrides: vec![("layer2.0.conv2".to_string(), SavePolicy::Pooled((4, 4)))],
    };
    let (net, _) = cifar_net(Arch::ResNet18Cifar, policy, 1);
    let table: std::collections::HashMap<String, SavePolicy> =
        net.conv_policies().into_iter().collect();
    assert_eq!(table["layer2.0.conv2"], SavePolicy::Pooled((4, 4)));
    assert_eq!(table["layer3.0.conv1"], SavePolicy::Full);
    assert_eq!(table["layer3.1.conv2"], SavePolicy::Full);
    assert_eq!(table["layer2.1.conv1"], SavePolicy::Pooled((2, 2)));
}

#[test]
fn residual_join_shape_mismatch_is_caught_at_build_time() {
    let mut ledger = MemoryLedger::new();
    let mut net: Network<f32> = Network::new();
    let spec = Conv2dSpec::new(1, 2, (3, 3)); // shrinks the map, no padding
    let w = Tensor::zeros(spec.weight_shape().to_vec(), AllocCategory::Parameter);
    let v = net.add_conv("c", spec, SavePolicy::Full, w, None, INPUT_VALUE, &mut ledger);
    net.add_node("bad_join", OpKind::Add, vec![v, INPUT_VALUE]);
    let err = net.infer_value_shapes(1, (1, 8, 8)).unwrap_err();
    assert!(err.to_string().contains("mismatched shapes"));
}

/// Zero input through a block whose norms are identity-initialized stays
/// exactly zero up to (and through) the final ReLU.
#[test]
fn zero_input_flows_through_identity_block_as_zero() {
    let mut ledger = MemoryLedger::new();
    let mut net: Network<f32> = Network::new();
    let spec1 = Conv2dSpec::new(3, 3, (3, 3)).with_padding((1, 1));
    let w1 = Tensor::full(spec1.weight_shape().to_vec(), 0.3, AllocCategory::Parameter);
    let c1 = net.add_conv("b.conv1", spec1, SavePolicy::Full, w1, None, INPUT_VALUE, &mut ledger);
    let b1 = net.add_batchnorm("b.bn1", 3, 1.0, c1, &mut ledger);
    let r1 = net.add_node("b.relu1", OpKind::Relu, vec![b1]);
    let spec2 = Conv2dSpec::new(3, 3, (3, 3)).with_padding((1, 1));
    let w2 = Tensor::full(spec2.weight_shape().to_vec(), -0.2, AllocCategory::Parameter);
    let c2 = net.add_conv("b.conv2", spec2, SavePolicy::Full, w2, None, r1, &mut ledger);
    let b2 = net.add_batchnorm("b.bn2", 3, 1.0, c2, &mut ledger);
    let sum = net.add_node("b.add", OpKind::Add, vec![b2, INPUT_VALUE]);
    net.add_node("b.relu2", OpKind::Relu, vec![sum]);

    let zeros = Tensor::<f32>::zeros(vec![2, 3, 4, 4], AllocCategory::Input);
    let mut tape = cabp::tape::Tape::new();
    let out = net.forward_train(&zeros, &mut tape, &mut ledger).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_bit_identical_across_save_policies() {
    let (mut full, _) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::off(), 42);
    let (mut pooled, _) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::uniform((2, 2)), 42);
    let (mut pooled4, _) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::uniform((4, 4)), 42);
    let spec = SyntheticSpec { samples: 8, ..Default::default() };
    let data = synthetic_dataset(&spec);
    let norm = Normalization::none(3);
    let indices: Vec<usize> = (0..8).collect();
    let (input, _) = cabp::data::make_batch::<f32>(&data, &indices, &norm, None).unwrap();

    let mut out = Vec::new();
    for net in [&mut full, &mut pooled, &mut pooled4] {
        let mut tape = cabp::tape::Tape::new();
        let mut ledger = MemoryLedger::new();
        out.push(net.forward_train(&input, &mut tape, &mut ledger).unwrap());
    }
    assert!(out[0].bit_eq(&out[1]));
    assert!(out[0].bit_eq(&out[2]));
}

#[test]
fn same_seed_builds_identical_networks() {
    let (a, _) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::off(), 9);
    let (b, _) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::off(), 9);
    for (ea, eb) in a.params.entries().iter().zip(b.params.entries()) {
        assert_eq!(ea.name, eb.name);
        assert!(ea.tensor.bit_eq(&eb.tensor));
    }
    let (c, _) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::off(), 10);
    assert!(!a.params.entries()[0].tensor.bit_eq(&c.params.entries()[0].tensor));
}

fn tiny_train(
    policy: CompressionPolicy,
    seed: u64,
    epochs: usize,
) -> (cabp::train::TrainResult, Vec<u8>, MemoryLedger) {
    let (mut net, mut ledger) = cifar_net(Arch::ResNet8Cifar, policy, seed);
    let data = synthetic_dataset(&SyntheticSpec { samples: 16, ..Default::default() });
    let config = TrainConfig {
        batch_size: 16,
        epochs,
        base_lr: 0.05,
        momentum: 0.9,
        seed,
        fixed_order: true,
        augment: false,
        ..TrainConfig::default()
    };
    let norm = Normalization::none(3);
    let result = train(&mut net, &data, &norm, &config, &mut ledger, None).unwrap();
    let tensors: Vec<(String, Tensor<f32>)> = net
        .params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.tensor.clone()))
        .collect();
    (result, checkpoint::serialize(&tensors).unwrap(), ledger)
}

#[test]
fn training_is_deterministic_given_seed() {
    let (r1, ckpt1, _) = tiny_train(CompressionPolicy::uniform((2, 2)), 3, 2);
    let (r2, ckpt2, _) = tiny_train(CompressionPolicy::uniform((2, 2)), 3, 2);
    assert_eq!(ckpt1, ckpt2);
    let m1: Vec<String> = r1.metrics.iter().map(|m| format!("{m:?}")).collect();
    let m2: Vec<String> = r2.metrics.iter().map(|m| format!("{m:?}")).collect();
    assert_eq!(m1, m2);
}

#[test]
fn identity_pooling_trains_bit_identically_to_full() {
    let (r_full, ckpt_full, _) = tiny_train(CompressionPolicy::off(), 11, 2);
    let (r_pooled, ckpt_pooled, _) = tiny_train(CompressionPolicy::uniform((1, 1)), 11, 2);
    assert_eq!(ckpt_full, ckpt_pooled);
    for (a, b) in r_full.metrics.iter().zip(r_pooled.metrics.iter()) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.forward_peak_bytes, b.forward_peak_bytes);
    }
}

#[test]
fn zero_epochs_preserves_initialization() {
    let (_, ckpt_trained, _) = tiny_train(CompressionPolicy::off(), 5, 0);
    let (net, _) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::off(), 5);
    let tensors: Vec<(String, Tensor<f32>)> = net
        .params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), e.tensor.clone()))
        .collect();
    assert_eq!(ckpt_trained, checkpoint::serialize(&tensors).unwrap());
}

#[test]
fn ledger_returns_to_baseline_after_each_step() {
    let (result, _, ledger) = tiny_train(CompressionPolicy::uniform((2, 2)), 1, 1);
    assert_eq!(ledger.current_category(AllocCategory::Activation), 0);
    assert_eq!(ledger.current_category(AllocCategory::Scratch), 0);
    assert_eq!(ledger.current_category(AllocCategory::Gradient), 0);
    assert_eq!(ledger.current_category(AllocCategory::Input), 0);
    // Velocities persist; parameters persist.
    assert!(ledger.current_category(AllocCategory::OptimizerState) > 0);
    let points = &result.epoch_points[0];
    assert!(points.is_consistent());
    assert!(points.forward_peak.total >= points.model_init.total + points.input_init.total);
    assert!(points.optimizer_peak.total > points.after_backward.total);
}

#[test]
fn momentum_free_run_allocates_no_optimizer_state() {
    let (mut net, mut ledger) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::off(), 2);
    let data = synthetic_dataset(&SyntheticSpec { samples: 16, ..Default::default() });
    let config = TrainConfig {
        batch_size: 16,
        epochs: 1,
        momentum: 0.0,
        fixed_order: true,
        augment: false,
        ..TrainConfig::default()
    };
    let result = train(&mut net, &data, &Normalization::none(3), &config, &mut ledger, None).unwrap();
    assert_eq!(ledger.current_category(AllocCategory::OptimizerState), 0);
    let points = &result.epoch_points[0];
    assert_eq!(points.optimizer_peak.total, points.after_backward.total);
}

/// The ledger's recorded save events must agree exactly with the static
/// model, layer by layer, in a full-policy run.
#[test]
fn static_and_dynamic_saved_bytes_agree() {
    let (mut net, mut ledger) = cifar_net(Arch::ResNet18Cifar, CompressionPolicy::off(), 4);
    let data = synthetic_dataset(&SyntheticSpec { samples: 4, ..Default::default() });
    let config = TrainConfig {
        batch_size: 4,
        epochs: 1,
        fixed_order: true,
        augment: false,
        ..TrainConfig::default()
    };
    let model = static_model(&net, 4, (3, 32, 32), &[(2, 2)]).unwrap();
    train(&mut net, &data, &Normalization::none(3), &config, &mut ledger, None).unwrap();
    for row in &model.rows {
        let saved = ledger.labeled_bytes(|l| l == format!("save:{}", row.layer));
        let released = -ledger.labeled_bytes(|l| l == format!("release:{}", row.layer));
        // One step: one alloc and one release of exactly x_bytes.
        assert_eq!(saved as u64, row.x_bytes, "layer {}", row.layer);
        assert_eq!(released as u64, row.x_bytes, "layer {}", row.layer);
    }
}

#[test]
fn pooled_saved_bytes_match_static_z_column() {
    let (mut net, mut ledger) = cifar_net(Arch::ResNet18Cifar, CompressionPolicy::uniform((2, 2)), 4);
    let data = synthetic_dataset(&SyntheticSpec { samples: 4, ..Default::default() });
    let config = TrainConfig {
        batch_size: 4,
        epochs: 1,
        fixed_order: true,
        augment: false,
        ..TrainConfig::default()
    };
    let model = static_model(&net, 4, (3, 32, 32), &[(2, 2)]).unwrap();
    train(&mut net, &data, &Normalization::none(3), &config, &mut ledger, None).unwrap();
    for (name, policy) in net.conv_policies() {
        let row = model.row(&name).unwrap();
        let expected = match policy {
            SavePolicy::Full => row.x_bytes,
            SavePolicy::Pooled(_) => row.z_bytes[0],
        };
        let saved = ledger.labeled_bytes(|l| l == format!("save:{name}"));
        assert_eq!(saved as u64, expected, "layer {name}");
    }
}

#[test]
fn checkpoint_round_trips_through_param_store() {
    let (net, _) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::off(), 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.cabp");
    checkpoint::save_params(&path, &net.params).unwrap();
    let (mut net2, _) = cifar_net(Arch::ResNet8Cifar, CompressionPolicy::off(), 14);
    checkpoint::load_params(&path, &mut net2.params).unwrap();
    for (ea, eb) in net.params.entries().iter().zip(net2.params.entries()) {
        assert!(ea.tensor.bit_eq(&eb.tensor), "{}", ea.name);
    }
}
