//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use volcam::autodiff::{grad_check, GradCheckOptions};
use volcam::model::{GraphBuilder, LayerGraph, Mode, ModelKind, InputSignature};
use volcam::ops::{Activation, UpsampleMode};
use volcam::{ParamStore, Result, Tape, Tensor, Var};

// ---------------------------------------------------------------- convolution

/// Direct-summation convolution over `[N, C, s..]` with 2 or 3 spatial dims.
pub fn naive_conv(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: &[usize],
    padding: &[usize],
) -> Tensor<f64> {
    let r = input.rank() - 2;
    let lift = |v: &[usize], fill: usize| -> [usize; 3] {
        let mut out = [fill; 3];
        out[3 - r..].copy_from_slice(v);
        out
    };
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let o = kernel.shape()[0];
    let s = lift(&input.shape()[2..], 1);
    let k = lift(&kernel.shape()[2..], 1);
    let st = lift(stride, 1);
    let pd = lift(padding, 0);
    let out: Vec<usize> = (0..3).map(|d| (s[d] + 2 * pd[d] - k[d]) / st[d] + 1).collect();
    let x = input.data();
    let w = kernel.data();
    let mut y = Vec::with_capacity(n * o * out.iter().product::<usize>());
    for b in 0..n {
        for oc in 0..o {
            for z in 0..out[0] {
                for i in 0..out[1] {
                    for j in 0..out[2] {
                        let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                        for ic in 0..c {
                            for a in 0..k[0] {
                                for p in 0..k[1] {
                                    for q in 0..k[2] {
                                        let zz = (z * st[0] + a) as isize - pd[0] as isize;
                                        let ii = (i * st[1] + p) as isize - pd[1] as isize;
                                        let jj = (j * st[2] + q) as isize - pd[2] as isize;
                                        if zz < 0 || ii < 0 || jj < 0 || zz >= s[0] as isize || ii >= s[1] as isize || jj >= s[2] as isize {
                                            continue;
                                        }
                                        let xi = (((b * c + ic) * s[0] + zz as usize) * s[1] + ii as usize) * s[2] + jj as usize;
                                        let wi = (((oc * c + ic) * k[0] + a) * k[1] + p) * k[2] + q;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y.push(acc);
                    }
                }
            }
        }
    }
    let mut shape = vec![n, o];
    shape.extend_from_slice(&out[3 - r..]);
    Tensor::new(&shape, y).expect("oracle shape")
}

/// Small-integer tensor: every product and partial sum is exact in 64-bit.
pub fn integer_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-4i32..=4) as f64).unwrap()
}

pub struct SweepResult {
    pub cases: usize,
    pub mismatches: Vec<String>,
}

/// Every geometry with spatial extents 1..=5, channels 1..=3, kernels 1..=3,
/// strides {1, 2} and padding {0, 1} that yields a non-empty output.
pub fn conv_sweep(rank: usize) -> SweepResult {
    let mut rng = ChaCha8Rng::seed_from_u64(rank as u64);
    let mut cases = 0;
    let mut mismatches = Vec::new();
    let extents: Vec<Vec<usize>> = if rank == 2 {
        (1..=5).flat_map(|h| (1..=5).map(move |w| vec![h, w])).collect()
    } else {
        (1..=5).flat_map(|d| (1..=5).flat_map(move |h| (1..=5).map(move |w| vec![d, h, w]))).collect()
    };
    for spatial in &extents {
        for cin in 1..=3 {
            for cout in 1..=3 {
                for k in 1..=3 {
                    for stride in 1..=2 {
                        for pad in 0..=1 {
                            if spatial.iter().any(|&s| s + 2 * pad < k) {
                                continue;
                            }
                            let mut xs = vec![2, cin];
                            xs.extend_from_slice(spatial);
                            let mut ks = vec![cout, cin];
                            ks.extend(std::iter::repeat_n(k, rank));
                            let x = integer_tensor(&xs, &mut rng);
                            let w = integer_tensor(&ks, &mut rng);
                            let b = (cases % 2 == 0).then(|| integer_tensor(&[cout], &mut rng));
                            let st = vec![stride; rank];
                            let pd = vec![pad; rank];
                            let got = volcam::ops::conv_nd(&x, &w, b.as_ref(), &st, &pd);
                            let want = naive_conv(&x, &w, b.as_ref(), &st, &pd);
                            match got {
                                Ok(t) if t.shape() == want.shape() && t.data() == want.data() => {}
                                Ok(t) => mismatches.push(format!("{spatial:?} c{cin}->{cout} k{k} s{stride} p{pad}: shape {:?}", t.shape())),
                                Err(e) => mismatches.push(format!("{spatial:?} c{cin}->{cout} k{k} s{stride} p{pad}: {e}")),
                            }
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    SweepResult { cases, mismatches }
}

// ----------------------------------------------------------- finite differences

pub const FD_INSTANCES: usize = 20;
pub const FD_TOLERANCE: f64 = 1e-4;

/// One randomized gradient-check problem: parameters plus a scalar builder.
pub struct FdCase {
    pub store: ParamStore<f64>,
    pub build: Box<dyn FnMut(&ParamStore<f64>) -> Result<(Tape<f64>, Var)>>,
}

pub struct FdOutcome {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl FdOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.instances >= FD_INSTANCES
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).unwrap()
}

/// Contracts `out` with fixed pseudo-random weights so every output element matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0))?;
    tape.weighted_sum(out, w)
}

fn spatial(rng: &mut ChaCha8Rng, rank: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(lo..=hi)).collect()
}

fn batch_shape(n: usize, c: usize, s: &[usize]) -> Vec<usize> {
    let mut v = vec![n, c];
    v.extend_from_slice(s);
    v
}

type CaseFn = fn(&mut ChaCha8Rng, u64) -> FdCase;

fn unary_case(rng: &mut ChaCha8Rng, seed: u64, f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> FdCase {
    let rank = rng.random_range(2..=3);
    let s = spatial(rng, rank, 2, 4);
    let mut store = ParamStore::new();
    let x = store.insert("x", uniform(&batch_shape(2, 3, &s), -2.0, 2.0, rng)).unwrap();
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let xv = t.param(p, x);
            let y = f(&mut t, xv)?;
            let l = project(&mut t, y, seed)?;
            Ok((t, l))
        }),
    }
}

fn conv_case(rng: &mut ChaCha8Rng, seed: u64) -> FdCase {
    let rank = rng.random_range(2..=3);
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let s = spatial(rng, rank, k.max(2), 5);
    let (cin, cout) = (rng.random_range(1..=3), rng.random_range(1..=3));
    let with_bias = rng.random_bool(0.5);
    let mut store = ParamStore::new();
    let x = store.insert("x", uniform(&batch_shape(2, cin, &s), -1.0, 1.0, rng)).unwrap();
    let w = store.insert("w", uniform(&batch_shape(cout, cin, &vec![k; rank]), -1.0, 1.0, rng)).unwrap();
    let b = with_bias.then(|| store.insert("b", uniform(&[cout], -1.0, 1.0, rng)).unwrap());
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let (xv, wv) = (t.param(p, x), t.param(p, w));
            let bv = b.map(|b| t.param(p, b));
            let y = t.conv(xv, wv, bv, &vec![stride; rank], &vec![pad; rank])?;
            let l = project(&mut t, y, seed)?;
            Ok((t, l))
        }),
    }
}

fn max_pool_case(rng: &mut ChaCha8Rng, seed: u64) -> FdCase {
    let rank = rng.random_range(2..=3);
    let win = rng.random_range(2..=3);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=(win / 2));
    let s = spatial(rng, rank, win, 5);
    let mut store = ParamStore::new();
    let x = store.insert("x", uniform(&batch_shape(2, 2, &s), -2.0, 2.0, rng)).unwrap();
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let xv = t.param(p, x);
            let y = t.max_pool(xv, &vec![win; rank], &vec![stride; rank], &vec![pad; rank])?;
            let l = project(&mut t, y, seed)?;
            Ok((t, l))
        }),
    }
}

fn norm_case(rng: &mut ChaCha8Rng, seed: u64, train: bool) -> FdCase {
    let rank = rng.random_range(2..=3);
    let s = spatial(rng, rank, 2, 3);
    let c = rng.random_range(1..=3);
    let mut store = ParamStore::new();
    let x = store.insert("x", uniform(&batch_shape(2, c, &s), -2.0, 2.0, rng)).unwrap();
    let g = store.insert("gamma", uniform(&[c], 0.5, 1.5, rng)).unwrap();
    let b = store.insert("beta", uniform(&[c], -0.5, 0.5, rng)).unwrap();
    let mean = uniform(&[c], -0.5, 0.5, rng);
    let var = uniform(&[c], 0.5, 2.0, rng);
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let (xv, gv, bv) = (t.param(p, x), t.param(p, g), t.param(p, b));
            let y = if train { t.batch_norm_train(xv, gv, bv, 1e-5)?.0 } else { t.batch_norm_infer(xv, gv, bv, &mean, &var, 1e-5)? };
            let l = project(&mut t, y, seed)?;
            Ok((t, l))
        }),
    }
}

fn dense_case(rng: &mut ChaCha8Rng, seed: u64) -> FdCase {
    let (n, i, o) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=4));
    let mut store = ParamStore::new();
    let x = store.insert("x", uniform(&[n, i], -1.0, 1.0, rng)).unwrap();
    let w = store.insert("w", uniform(&[i, o], -1.0, 1.0, rng)).unwrap();
    let b = store.insert("b", uniform(&[o], -1.0, 1.0, rng)).unwrap();
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.param(p, x), t.param(p, w), t.param(p, b));
            let y = t.dense(xv, wv, bv)?;
            let l = project(&mut t, y, seed)?;
            Ok((t, l))
        }),
    }
}

fn binary_case(rng: &mut ChaCha8Rng, seed: u64, mul: bool) -> FdCase {
    let s = spatial(rng, 2, 2, 4);
    let shape = batch_shape(2, 2, &s);
    let mut store = ParamStore::new();
    let a = store.insert("a", uniform(&shape, -2.0, 2.0, rng)).unwrap();
    let b = store.insert("b", uniform(&shape, -2.0, 2.0, rng)).unwrap();
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let (av, bv) = (t.param(p, a), t.param(p, b));
            let y = if mul { t.mul(av, bv)? } else { t.add(av, bv)? };
            let l = project(&mut t, y, seed)?;
            Ok((t, l))
        }),
    }
}

fn resize_case(rng: &mut ChaCha8Rng, seed: u64, mode: UpsampleMode) -> FdCase {
    let rank = rng.random_range(2..=3);
    let s = spatial(rng, rank, 1, 4);
    let target = spatial(rng, rank, 1, 7);
    let mut store = ParamStore::new();
    let x = store.insert("x", uniform(&batch_shape(2, 2, &s), -2.0, 2.0, rng)).unwrap();
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let xv = t.param(p, x);
            let y = t.resize(xv, &target, mode)?;
            let l = project(&mut t, y, seed)?;
            Ok((t, l))
        }),
    }
}

fn concat_case(rng: &mut ChaCha8Rng, seed: u64) -> FdCase {
    let s = spatial(rng, 2, 2, 4);
    let mut store = ParamStore::new();
    let a = store.insert("a", uniform(&batch_shape(2, rng.random_range(1..=3), &s), -1.0, 1.0, rng)).unwrap();
    let b = store.insert("b", uniform(&batch_shape(2, rng.random_range(1..=3), &s), -1.0, 1.0, rng)).unwrap();
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let (av, bv) = (t.param(p, a), t.param(p, b));
            let y = t.concat_channels(&[av, bv])?;
            let l = project(&mut t, y, seed)?;
            Ok((t, l))
        }),
    }
}

fn bce_case(rng: &mut ChaCha8Rng, _seed: u64) -> FdCase {
    let n = rng.random_range(1..=6);
    let labels: Vec<f64> = (0..n).map(|_| rng.random_range(0..=1) as f64).collect();
    let mut store = ParamStore::new();
    let z = store.insert("z", uniform(&[n, 1], -3.0, 3.0, rng)).unwrap();
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let zv = t.param(p, z);
            let l = t.bce_with_logits(zv, &labels)?;
            Ok((t, l))
        }),
    }
}

fn pixel_ce_case(rng: &mut ChaCha8Rng, _seed: u64) -> FdCase {
    let s = spatial(rng, 2, 2, 4);
    let plane: usize = s.iter().product();
    let mask: Vec<u8> = (0..2 * plane).map(|_| rng.random_range(0..=1)).collect();
    let mut store = ParamStore::new();
    let z = store.insert("z", uniform(&batch_shape(2, 2, &s), 0.1, 1.0, rng)).unwrap();
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let zv = t.param(p, z);
            let l = t.pixel_cross_entropy(zv, &mask)?;
            Ok((t, l))
        }),
    }
}

fn weighted_sum_case(rng: &mut ChaCha8Rng, _seed: u64) -> FdCase {
    let s = spatial(rng, 3, 1, 3);
    let shape = batch_shape(1, 2, &s);
    let w = uniform(&shape, -1.0, 1.0, rng);
    let mut store = ParamStore::new();
    let x = store.insert("x", uniform(&shape, -1.0, 1.0, rng)).unwrap();
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut t = Tape::new();
            let xv = t.param(p, x);
            let l = t.weighted_sum(xv, w.clone())?;
            Ok((t, l))
        }),
    }
}

/// One bottleneck residual block (1-wide, 3-wide strided, 1-wide convs, each
/// normalized, projection shortcut) run in training mode.
pub fn bottleneck_block(rank: usize, spatial: &[usize], cin: usize, mid: usize, stride: usize, seed: u64) -> LayerGraph<f64> {
    let kind = if rank == 2 { ModelKind::Resnet2d } else { ModelKind::Resnet3d };
    let mut b = GraphBuilder::<f64>::new(kind, InputSignature::new(cin, spatial), seed);
    let input = GraphBuilder::<f64>::INPUT;
    let mut y = b.conv("conv1", input, mid, 1, 1, 0, false).unwrap();
    y = b.batch_norm("bn1", y).unwrap();
    y = b.relu("relu1", y).unwrap();
    y = b.conv("conv2", y, mid, 3, stride, 1, false).unwrap();
    y = b.batch_norm("bn2", y).unwrap();
    y = b.relu("relu2", y).unwrap();
    y = b.conv("conv3", y, mid * 4, 1, 1, 0, false).unwrap();
    y = b.batch_norm("bn3", y).unwrap();
    let s = b.shortcut_conv("proj", input, mid * 4, stride).unwrap();
    let s = b.batch_norm("proj_bn", s).unwrap();
    let y = b.add("add", y, s).unwrap();
    let out = b.relu("relu", y).unwrap();
    b.finish(out).unwrap()
}

fn bottleneck_case(rng: &mut ChaCha8Rng, seed: u64) -> FdCase {
    let rank = rng.random_range(2..=3);
    let s = spatial(rng, rank, 3, if rank == 2 { 5 } else { 4 });
    let stride = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let graph = bottleneck_block(rank, &s, cin, 2, stride, seed);
    let x = uniform(&batch_shape(2, cin, &s), -1.0, 1.0, rng);
    let mut store = graph.params().clone();
    // perturb the unit-gamma / zero-beta init so every normalization path is generic
    for (name, p) in store.iter_mut() {
        if name.ends_with(".gamma") || name.ends_with(".beta") {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    FdCase {
        store,
        build: Box::new(move |p| {
            let mut g = graph.clone();
            *g.params_mut() = p.clone();
            let fp = g.forward(&x, Mode::Train)?;
            let mut t = fp.tape;
            let l = project(&mut t, fp.output, seed)?;
            Ok((t, l))
        }),
    }
}

/// Every differentiable op plus a full bottleneck block.
pub fn fd_cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv", conv_case as CaseFn),
        ("max_pool", max_pool_case),
        ("global_avg_pool", |r, s| unary_case(r, s, |t, x| t.global_avg_pool(x))),
        ("batch_norm_train", |r, s| norm_case(r, s, true)),
        ("batch_norm_infer", |r, s| norm_case(r, s, false)),
        ("dense", dense_case),
        ("relu", |r, s| unary_case(r, s, |t, x| t.activation(x, Activation::Relu))),
        ("sigmoid", |r, s| unary_case(r, s, |t, x| t.activation(x, Activation::Sigmoid))),
        ("softmax_channel", |r, s| unary_case(r, s, |t, x| t.activation(x, Activation::SoftmaxChannel))),
        ("add", |r, s| binary_case(r, s, false)),
        ("mul", |r, s| binary_case(r, s, true)),
        ("scale", |r, s| unary_case(r, s, |t, x| Ok(t.scale(x, -1.7)))),
        ("sum", |r, s| unary_case(r, s, |t, x| Ok(t.sum(x)))),
        ("weighted_sum", weighted_sum_case),
        ("resize_linear", |r, s| resize_case(r, s, UpsampleMode::Linear)),
        ("resize_nearest", |r, s| resize_case(r, s, UpsampleMode::Nearest)),
        ("concat_channels", concat_case),
        ("bce_with_logits", bce_case),
        ("pixel_cross_entropy", pixel_ce_case),
        ("bottleneck_block", bottleneck_case),
    ]
}

/// Runs `instances` random problems of one case with central differences.
pub fn fd_check(op: &'static str, case: CaseFn, instances: usize) -> FdOutcome {
    let opts = GradCheckOptions { step: 1e-6, tolerance: FD_TOLERANCE, max_elements_per_param: Some(24) };
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for i in 0..instances {
        let seed = 1000 + i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = case(&mut rng, seed);
        match grad_check(&mut c.store, &mut c.build, opts) {
            Ok(r) => {
                worst = worst.max(r.max_rel_err);
                if !r.passed {
                    let bad: Vec<String> =
                        r.params.iter().filter(|p| !p.passed).map(|p| format!("{} {:.2e}", p.name, p.max_rel_err)).collect();
                    failures.push(format!("instance {i}: {}", bad.join(", ")));
                }
            }
            Err(e) => failures.push(format!("instance {i}: {e}")),
        }
    }
    FdOutcome { op, instances, worst, failures }
}

// ------------------------------------------------------------------ scheduler

/// Reference schedule: per epoch, the lr for the next epoch and the stop flag.
/// Written from the rule text alone: count epochs since the last improvement;
/// every third such epoch cuts the rate tenfold, the tenth stops training.
pub fn reference_schedule(history: &[f64], lr0: f64, min_delta: f64) -> Vec<(f64, bool)> {
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut since_cut = 0usize;
    let mut lr = lr0;
    let mut out = Vec::new();
    for (e, &v) in history.iter().enumerate() {
        if e == 0 || v < best - min_delta {
            best = v;
            since_best = 0;
            since_cut = 0;
        } else {
            since_best += 1;
            since_cut += 1;
            if since_cut == 3 {
                lr *= 0.1;
                since_cut = 0;
            }
        }
        out.push((lr, since_best >= 10));
    }
    out
}

/// Histories with plateaus, ties, near-ties and genuine improvements.
pub fn random_history(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let len = rng.random_range(1..=60);
    let mut v = rng.random_range(0.5..2.0);
    (0..len)
        .map(|_| {
            match rng.random_range(0..5) {
                0 => v -= rng.random_range(0.0..0.2),
                1 => v -= rng.random_range(0.0..2e-4),
                2 => v += rng.random_range(0.0..0.2),
                _ => {}
            }
            v
        })
        .collect()
}

pub fn assert_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// -------------------------------------------------------------------- metrics

/// One published confusion matrix with its printed two-decimal figures.
pub struct PublishedRow {
    pub name: &'static str,
    pub cm: (usize, usize, usize, usize),
    /// precision, recall, f1 as printed
    pub prf: [&'static str; 3],
    /// accuracy percent derived from the counts
    pub accuracy_percent: &'static str,
    /// tp, fp, fn, tn percent as printed; `None` where the print disagrees with the counts
    pub percents: [Option<&'static str>; 4],
}

pub const PUBLISHED: [PublishedRow; 4] = [
    PublishedRow { name: "3D test", cm: (3, 0, 4, 7), prf: ["1.00", "0.43", "0.60"], accuracy_percent: "71.43", percents: [Some("21.43"), Some("0.00"), Some("28.57"), Some("50.00")] },
    PublishedRow { name: "3D validation", cm: (5, 2, 2, 5), prf: ["0.71", "0.71", "0.71"], accuracy_percent: "71.43", percents: [Some("35.71"), Some("14.29"), Some("14.29"), Some("35.71")] },
    PublishedRow { name: "2D validation", cm: (126, 137, 1888, 2063), prf: ["0.48", "0.06", "0.11"], accuracy_percent: "51.95", percents: [Some("2.99"), Some("3.25"), Some("44.80"), None] },
    PublishedRow { name: "2D test", cm: (133, 123, 2020, 1823), prf: ["0.52", "0.06", "0.11"], accuracy_percent: "47.72", percents: [Some("3.24"), Some("3.00"), Some("49.28"), Some("44.47")] },
];

/// Mismatches between computed reports and the published rows.
pub fn metric_regression() -> Vec<String> {
    use volcam::metrics::{classification_metrics, fmt2, ConfusionMatrix, EvalUnit};
    let mut bad = Vec::new();
    for row in &PUBLISHED {
        let (tp, fp, fn_, tn) = row.cm;
        let r = classification_metrics(&ConfusionMatrix::new(tp, fp, fn_, tn), EvalUnit::Subject, 0.5).unwrap();
        let got = [fmt2(r.precision), fmt2(r.recall), fmt2(r.f1)];
        if got != row.prf.map(String::from) {
            bad.push(format!("{}: p/r/f1 {got:?} vs {:?}", row.name, row.prf));
        }
        if fmt2(100.0 * r.accuracy) != row.accuracy_percent {
            bad.push(format!("{}: accuracy {:.2} vs {}", row.name, 100.0 * r.accuracy, row.accuracy_percent));
        }
        for (p, want) in r.percentages().iter().zip(row.percents) {
            if let Some(w) = want {
                if fmt2(*p) != w {
                    bad.push(format!("{}: percentage {:.2} vs {w}", row.name, p));
                }
            }
        }
    }
    bad
}

// ---------------------------------------------------------------- determinism

/// Small bottleneck classifier on 1x32x32 inputs.
pub fn tiny_resnet(seed: u64) -> LayerGraph<f32> {
    use volcam::model::{build_resnet, ResnetConfig, WidthMultiplier};
    let mut cfg = ResnetConfig::resnet50_2d([32, 32]).with_width(WidthMultiplier::new(1, 16).unwrap()).with_seed(seed);
    cfg.blocks = [1, 1, 1, 1];
    build_resnet(&cfg).unwrap()
}

/// Noisy images; positives carry a bright square at a random position.
pub fn toy_samples(n: usize, seed: u64) -> Vec<volcam::train::Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let (cy, cx) = (rng.random_range(4..28), rng.random_range(4..28));
            let x = Tensor::<f32>::from_fn(&[1, 32, 32], |k| {
                let (y, x) = (k / 32, k % 32);
                let lesion = positive && y.abs_diff(cy) <= 2 && x.abs_diff(cx) <= 2;
                rng.random_range(0.0..0.3) + if lesion { 0.7 } else { 0.0 }
            })
            .unwrap();
            volcam::train::Sample::class(format!("toy{i:03}"), x, positive)
        })
        .collect()
}

pub fn toy_config(max_epochs: usize) -> volcam::train::TrainConfig {
    volcam::train::TrainConfig { max_epochs, batch_size: 4, seed: 17, ..Default::default() }
}

/// Byte-level determinism and resume equivalence over a 5-epoch run.
pub fn determinism_check() -> Vec<String> {
    use volcam::train::{decode_checkpoint, encode_checkpoint, history_csv, TrainSession};
    let train = toy_samples(16, 1);
    let val = toy_samples(8, 2);
    let run = |epochs: usize| {
        let mut s = TrainSession::new(tiny_resnet(3), toy_config(5)).unwrap();
        for _ in 0..epochs {
            s.run_epoch(&train, &val).unwrap();
        }
        s
    };
    let mut bad = Vec::new();
    let (a, b) = (run(5), run(5));
    if history_csv(&a.history) != history_csv(&b.history) {
        bad.push("history CSV differs between identical runs".to_string());
    }
    let ca = encode_checkpoint(&a).unwrap();
    if ca != encode_checkpoint(&b).unwrap() {
        bad.push("checkpoint bytes differ between identical runs".to_string());
    }
    let mut resumed = decode_checkpoint(&encode_checkpoint(&run(3)).unwrap()).unwrap();
    for _ in 0..2 {
        resumed.run_epoch(&train, &val).unwrap();
    }
    if history_csv(&resumed.history) != history_csv(&a.history) {
        bad.push("3+2 resumed history differs from 5-epoch history".to_string());
    }
    if encode_checkpoint(&resumed).unwrap() != ca {
        bad.push("3+2 resumed checkpoint differs from 5-epoch checkpoint".to_string());
    }
    bad
}
