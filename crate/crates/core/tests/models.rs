use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volcam::model::{
    audit_shapes, build_resnet, build_unet, select_probe_layer, GraphBuilder, InputSignature, LayerGraph, Mode, ModelKind,
    ProbeLayer, ResnetConfig, UnetConfig, WidthMultiplier,
};
use volcam::Tensor;

fn out_extent(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

/// Stage output extents from the stride schedule alone.
fn stage_extents(input: &[usize]) -> Vec<Vec<usize>> {
    let stem: Vec<usize> = input.iter().map(|&n| out_extent(out_extent(n, 7, 2, 3), 3, 2, 1)).collect();
    let mut out = vec![stem.clone()];
    let mut cur = stem;
    for _ in 0..3 {
        cur = cur.iter().map(|&n| out_extent(n, 3, 2, 1)).collect();
        out.push(cur.clone());
    }
    out
}

/// Parameter count of a bottleneck classifier with one input channel and one logit.
fn resnet_params(dim: u32, width: impl Fn(usize) -> usize) -> usize {
    let k3 = 3usize.pow(dim);
    let stem = width(64);
    let mut total = stem * 7usize.pow(dim) + 2 * stem;
    let mut cin = stem;
    for (i, n) in [3, 4, 6, 3].into_iter().enumerate() {
        let (mid, out) = (width(64 << i), width(256 << i));
        for b in 0..n {
            total += cin * mid + 2 * mid + mid * mid * k3 + 2 * mid + mid * out + 2 * out;
            if b == 0 {
                total += cin * out + 2 * out;
            }
            cin = out;
        }
    }
    total + cin + 1
}

#[test]
fn resnet2d_stage_shapes_and_layer_count() {
    let g = build_resnet::<f32>(&ResnetConfig::resnet50_2d([128, 128])).unwrap();
    let r = audit_shapes(&g, g.signature()).unwrap();
    let want = stage_extents(&[128, 128]);
    assert_eq!(want, vec![vec![32, 32], vec![16, 16], vec![8, 8], vec![4, 4]]);
    for (i, (blocks, ext)) in [3, 4, 6, 3].iter().zip(&want).enumerate() {
        let row = r.row(&format!("stage{}.block{blocks}.relu", i + 2)).unwrap();
        assert_eq!(&row.shape[1..], ext.as_slice());
        assert_eq!(row.shape[0], 256 << i);
    }
    assert_eq!(r.row("head.dense").unwrap().shape, vec![1]);
    assert_eq!(r.weighted_layers, 50);
}

#[test]
fn resnet2d_parameter_count_matches_reference_network() {
    // the reference 50-layer network has 25 557 032 parameters with three
    // input channels and a 1000-way head
    let reference = 25_557_032usize - 64 * 2 * 49 - 2048 * 999 - 999;
    assert_eq!(reference, resnet_params(2, |c| c));
    let g = build_resnet::<f32>(&ResnetConfig::resnet50_2d([64, 64])).unwrap();
    let r = audit_shapes(&g, g.signature()).unwrap();
    assert_eq!(r.total_params, reference);
    assert_eq!(r.total_params, r.rows.iter().map(|row| row.params).sum::<usize>());
    assert_eq!(g.params().numel(), reference);
}

#[test]
fn resnet3d_stage_shapes() {
    let cfg = ResnetConfig::resnet50_3d([256, 128, 128]).with_width(WidthMultiplier::new(1, 4).unwrap());
    let g = build_resnet::<f32>(&cfg).unwrap();
    let full = InputSignature::new(1, &[256, 128, 128]);
    let r = audit_shapes(&g, &full).unwrap();
    let want = stage_extents(&[256, 128, 128]);
    assert_eq!(want, vec![vec![64, 32, 32], vec![32, 16, 16], vec![16, 8, 8], vec![8, 4, 4]]);
    for (i, (blocks, ext)) in [3, 4, 6, 3].iter().zip(&want).enumerate() {
        assert_eq!(&r.row(&format!("stage{}.block{blocks}.relu", i + 2)).unwrap().shape[1..], ext.as_slice());
    }
    assert_eq!(r.weighted_layers, 50);
    assert_eq!(r.total_params, resnet_params(3, |c| c / 4));
}

#[test]
fn volumetric_network_has_more_parameters() {
    let two = build_resnet::<f32>(&ResnetConfig::resnet50_2d([32, 32]).with_width(WidthMultiplier::new(1, 4).unwrap())).unwrap();
    let three = build_resnet::<f32>(&ResnetConfig::resnet50_3d([32, 32, 32]).with_width(WidthMultiplier::new(1, 4).unwrap())).unwrap();
    let (a, b) = (two.params().numel(), three.params().numel());
    assert!(b > a);
    assert_eq!(a, resnet_params(2, |c| c / 4));
    assert_eq!(b, resnet_params(3, |c| c / 4));
}

#[test]
fn width_multiplier_scales_channels_not_depth() {
    let full = build_resnet::<f32>(&ResnetConfig::resnet50_2d([64, 64])).unwrap();
    let quarter = build_resnet::<f32>(&ResnetConfig::resnet50_2d([64, 64]).with_width(WidthMultiplier::new(1, 4).unwrap())).unwrap();
    let (rf, rq) = (audit_shapes(&full, full.signature()).unwrap(), audit_shapes(&quarter, quarter.signature()).unwrap());
    assert_eq!(rf.weighted_layers, rq.weighted_layers);
    for (a, b) in rf.rows.iter().zip(&rq.rows) {
        assert_eq!(a.label, b.label);
        if a.op == "conv" || a.op == "batch_norm" {
            assert_eq!(a.shape[0], 4 * b.shape[0], "{}", a.label);
        }
    }
}

#[test]
fn single_conv_audit_row() {
    let mut b = GraphBuilder::<f32>::new(ModelKind::Custom, InputSignature::new(3, &[6, 6]), 0);
    let c = b.conv("c", GraphBuilder::<f32>::INPUT, 5, 3, 1, 1, true).unwrap();
    let g = b.finish(c).unwrap();
    let r = audit_shapes(&g, g.signature()).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].params, 5 * 3 * 9 + 5);
    assert_eq!(r.rows[0].shape, vec![5, 6, 6]);
}

#[test]
fn probe_layers_follow_fixed_mapping() {
    let g = build_resnet::<f32>(&ResnetConfig::resnet50_2d([64, 64]).with_width(WidthMultiplier::new(1, 8).unwrap())).unwrap();
    let label = |p| g.nodes()[select_probe_layer(&g, p).unwrap()].label.clone();
    assert_eq!(label(ProbeLayer::First), "stem.conv");
    assert_eq!(label(ProbeLayer::Middle), "stage3.block4.conv3");
    assert_eq!(label(ProbeLayer::Last), "stage5.block3.conv3");
    let u = build_unet::<f32>(&UnetConfig::new(2, 4, [16, 16])).unwrap();
    assert!(select_probe_layer(&u, ProbeLayer::Last).is_err());
}

#[test]
fn unet_shapes_and_softmax() {
    let g = build_unet::<f32>(&UnetConfig::new(4, 4, [128, 128])).unwrap();
    let r = audit_shapes(&g, g.signature()).unwrap();
    let bottleneck = g.nodes()[g.probe("bottleneck").unwrap()].id;
    assert_eq!(&r.rows.iter().find(|row| row.id == bottleneck).unwrap().shape[1..], &[8, 8]);

    let g = build_unet::<f32>(&UnetConfig::new(2, 4, [32, 32])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(&[2, 1, 32, 32], (0..2048).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let out = g.forward_infer(&x).unwrap();
    let y = out.tape.value(out.output);
    assert_eq!(y.shape(), &[2, 2, 32, 32]);
    for n in 0..2 {
        for q in 0..1024 {
            let s = y.data()[n * 2048 + q] + y.data()[n * 2048 + 1024 + q];
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    let g = build_unet::<f32>(&UnetConfig::new(1, 2, [6, 6])).unwrap();
    let out = g.forward_infer(&Tensor::zeros(&[1, 1, 6, 6]).unwrap()).unwrap();
    assert_eq!(out.tape.value(out.output).shape(), &[1, 2, 6, 6]);
    assert!(build_unet::<f32>(&UnetConfig::new(3, 2, [20, 20])).is_err());
}

fn tiny() -> LayerGraph<f32> {
    build_resnet(&ResnetConfig::resnet50_2d([32, 32]).with_width(WidthMultiplier::new(1, 8).unwrap()).with_seed(4)).unwrap()
}

#[test]
fn inference_is_deterministic_and_checks_signature() {
    let g = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::new(&[3, 1, 32, 32], (0..3072).map(|_| rng.random::<f32>()).collect()).unwrap();
    let a = g.forward_infer(&x).unwrap();
    let b = g.forward_infer(&x).unwrap();
    assert_eq!(a.tape.value(a.output), b.tape.value(b.output));
    assert_eq!(a.tape.value(a.output).shape(), &[3, 1]);
    assert!(g.forward_infer(&Tensor::zeros(&[1, 1, 16, 32]).unwrap()).is_err());
    assert!(g.forward_infer(&Tensor::zeros(&[1, 2, 32, 32]).unwrap()).is_err());
}

#[test]
fn zero_head_weights_emit_bias() {
    let mut g = tiny();
    let w = g.params().id("head.dense.weight").unwrap();
    let bias = g.params().id("head.dense.bias").unwrap();
    let zeros = g.params().value(w).zeros_like();
    g.params_mut().get_mut(w).value = zeros;
    g.params_mut().get_mut(bias).value = Tensor::new(&[1], vec![0.625]).unwrap();
    let x = Tensor::full(&[2, 1, 32, 32], 0.3).unwrap();
    let out = g.forward_infer(&x).unwrap();
    assert_eq!(out.tape.value(out.output).data(), &[0.625, 0.625]);
}

#[test]
fn train_mode_backward_reaches_every_parameter() {
    let mut g = tiny();
    let x = Tensor::new(&[2, 1, 32, 32], (0..2048).map(|i| ((i * 37) % 11) as f32 / 11.0).collect()).unwrap();
    let mut fp = g.forward(&x, Mode::Train).unwrap();
    let l = fp.tape.bce_with_logits(fp.output, &[1.0, 0.0]).unwrap();
    g.params_mut().zero_grad();
    fp.tape.backward(l, g.params_mut()).unwrap();
    let untouched: Vec<&str> =
        g.params().iter().filter(|(_, _, p)| p.grad.data().iter().all(|&v| v == 0.0)).map(|(_, n, _)| n).collect();
    assert!(untouched.is_empty(), "{untouched:?}");
}
