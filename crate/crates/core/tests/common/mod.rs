//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use mtwf::aggregate::FeatureVector;
use mtwf::aggregate::{AggregationConfig, FIELDS_PER_SEGMENT};
use mtwf::model::{
    multihead_topm, topm_attention, AttentionConfig, LocalProfilerConfig, ModelConfig,
    MultiHeadWeights, TransWfModel,
};
use mtwf::seed::rng_from_seed;
use mtwf::tensor::{BatchNormMode, Graph, Padding, Tensor, Var};
use mtwf::trace::{Direction, Trace};
use rand::Rng;

pub const STEP: f64 = 1e-5;

/// `|analytic - numeric| / max(1, |numeric|)`, maximized over entries.
pub fn rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

pub fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Distinct values spaced at least `gap` apart in random order, so small
/// perturbations never reorder them.
pub fn separated_tensor(shape: &[usize], seed: u64, gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = rng_from_seed(seed);
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        ranks.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| (ranks[i] as f64 - n as f64 / 2.0) * gap)
}

/// Contracts an op's output with fixed random weights so every output entry
/// contributes to a scalar.
fn project<'g>(out: Var<'g>) -> Var<'g> {
    let shape = out.shape();
    let w = random_tensor(
        &shape,
        0xC0FFEE ^ shape.iter().product::<usize>() as u64,
        -1.0,
        1.0,
    );
    out.mul_const(w).expect("same shape").sum()
}

fn forward(inputs: &[Tensor], build: &dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let loss = project(build(&g, &vars));
    
    loss.to_tensor().item()
}

/// Worst relative error between backprop gradients and central differences
/// over all inputs.
pub fn check_op(
    inputs: &[Tensor],
    build: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = project(build(&g, &vars));
    let grads = g.backward(loss).expect("scalar loss");
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut numeric = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            numeric.data_mut()[j] =
                (forward(&plus, &build) - forward(&minus, &build)) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Same check for a whole model's training loss against every parameter.
/// `loss` must be deterministic (fixed dropout seed inside).
pub fn check_model(
    model: &TransWfModel,
    loss: impl Fn(&TransWfModel) -> (f64, Vec<Tensor>),
) -> f64 {
    let (_, analytic) = loss(model);
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (i, grad) in analytic.iter().enumerate() {
        let mut numeric = Tensor::zeros(grad.shape());
        for j in 0..grad.numel() {
            let orig = probe.params()[i].data()[j];
            probe.params_mut()[i].data_mut()[j] = orig + STEP;
            let up = loss(&probe).0;
            probe.params_mut()[i].data_mut()[j] = orig - STEP;
            let down = loss(&probe).0;
            probe.params_mut()[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(grad, &numeric));
    }
    worst
}

/// One gradient check: op name, worst relative error, and whether it is a
/// composition of several ops (looser tolerance).
pub struct GradCase {
    pub name: &'static str,
    pub err: f64,
    pub composed: bool,
}

fn r(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, seed, -1.0, 1.0)
}

/// Every differentiable op on random inputs. Inputs to kinked ops (relu,
/// max pooling, top-m) are kept away from their kinks.
pub fn op_cases() -> Vec<GradCase> {
    let op = |name, err| GradCase {
        name,
        err,
        composed: false,
    };
    let composed = |name, err| GradCase {
        name,
        err,
        composed: true,
    };
    let (a, b) = (r(&[3, 4], 1), r(&[3, 4], 2));
    let x3 = r(&[2, 3, 4], 3);
    let mut cases = vec![
        op(
            "add",
            check_op(&[a.clone(), b.clone()], |_, v| v[0].add(&v[1]).unwrap()),
        ),
        op(
            "sub",
            check_op(&[a.clone(), b.clone()], |_, v| v[0].sub(&v[1]).unwrap()),
        ),
        op(
            "mul",
            check_op(&[a.clone(), b.clone()], |_, v| v[0].mul(&v[1]).unwrap()),
        ),
        op("scale", check_op(std::slice::from_ref(&a), |_, v| v[0].scale(-2.5))),
        op("mul_const", {
            let mask = b.clone();
            check_op(std::slice::from_ref(&a), move |_, v| {
                v[0].mul_const(mask.clone()).unwrap()
            })
        }),
        op("sigmoid", check_op(std::slice::from_ref(&a), |_, v| v[0].sigmoid())),
        op("relu", {
            let away = Tensor::from_fn(&[3, 4], |i| a.data()[i] + a.data()[i].signum() * 0.1);
            check_op(&[away], |_, v| v[0].relu())
        }),
        op(
            "add_bias",
            check_op(&[x3.clone(), r(&[4], 4)], |_, v| {
                v[0].add_bias(&v[1]).unwrap()
            }),
        ),
        op(
            "transpose",
            check_op(std::slice::from_ref(&x3), |_, v| v[0].transpose().unwrap()),
        ),
        op(
            "reshape",
            check_op(std::slice::from_ref(&x3), |_, v| v[0].reshape(&[6, 4]).unwrap()),
        ),
        op(
            "narrow_last",
            check_op(std::slice::from_ref(&x3), |_, v| v[0].narrow_last(1, 2).unwrap()),
        ),
        op(
            "concat_last",
            check_op(&[x3.clone(), r(&[2, 3, 2], 5)], |_, v| {
                Var::concat_last(&[v[0], v[1]]).unwrap()
            }),
        ),
        op("sum", check_op(std::slice::from_ref(&x3), |_, v| v[0].sum())),
        op("mean", check_op(std::slice::from_ref(&x3), |_, v| v[0].mean())),
        op(
            "matmul",
            check_op(&[r(&[3, 4], 6), r(&[4, 5], 7)], |_, v| {
                v[0].matmul(&v[1]).unwrap()
            }),
        ),
        op(
            "matmul rank 3",
            check_op(&[r(&[2, 3, 4], 8), r(&[4, 2], 9)], |_, v| {
                v[0].matmul(&v[1]).unwrap()
            }),
        ),
        op(
            "bmm",
            check_op(&[r(&[2, 3, 4], 10), r(&[2, 4, 5], 11)], |_, v| {
                v[0].bmm(&v[1]).unwrap()
            }),
        ),
        op(
            "softmax",
            check_op(&[r(&[3, 5], 12)], |_, v| v[0].softmax()),
        ),
        op(
            "top_m + softmax",
            check_op(&[separated_tensor(&[3, 6], 13, 0.1)], |_, v| {
                v[0].top_m_mask(2, -1e9).unwrap().softmax()
            }),
        ),
        op(
            "layer_norm",
            check_op(
                &[
                    r(&[3, 5], 14),
                    random_tensor(&[5], 15, 0.5, 1.5),
                    r(&[5], 16),
                ],
                |_, v| v[0].layer_norm(&v[1], &v[2], 1e-5).unwrap(),
            ),
        ),
        op(
            "batch_norm train",
            check_op(
                &[
                    r(&[2, 3, 4], 17),
                    random_tensor(&[3], 18, 0.5, 1.5),
                    r(&[3], 19),
                ],
                |_, v| {
                    v[0].batch_norm(&v[1], &v[2], BatchNormMode::Train, 1e-5)
                        .unwrap()
                        .0
                },
            ),
        ),
        op(
            "batch_norm eval",
            check_op(
                &[
                    r(&[2, 3, 4], 17),
                    random_tensor(&[3], 18, 0.5, 1.5),
                    r(&[3], 19),
                ],
                |_, v| {
                    let mode = BatchNormMode::Eval {
                        mean: &[0.1, -0.2, 0.3],
                        var: &[0.5, 1.0, 2.0],
                    };
                    v[0].batch_norm(&v[1], &v[2], mode, 1e-5).unwrap().0
                },
            ),
        ),
        op(
            "conv1d same k3",
            check_op(&[r(&[2, 3, 9], 20), r(&[4, 3, 3], 21)], |_, v| {
                v[0].conv1d(&v[1], Padding::Same).unwrap()
            }),
        ),
        op(
            "conv1d same k4",
            check_op(&[r(&[2, 3, 9], 20), r(&[4, 3, 4], 21)], |_, v| {
                v[0].conv1d(&v[1], Padding::Same).unwrap()
            }),
        ),
        op(
            "conv1d valid",
            check_op(&[r(&[2, 3, 9], 20), r(&[4, 3, 3], 21)], |_, v| {
                v[0].conv1d(&v[1], Padding::Valid).unwrap()
            }),
        ),
        op(
            "conv1d unbatched",
            check_op(&[r(&[2, 7], 22), r(&[3, 2, 5], 23)], |_, v| {
                v[0].conv1d(&v[1], Padding::Same).unwrap()
            }),
        ),
        op(
            "maxpool1d",
            check_op(&[separated_tensor(&[2, 3, 20], 24, 0.01)], |_, v| {
                v[0].maxpool1d(8, 4).unwrap()
            }),
        ),
        op("bce_with_logits", {
            let t = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
            check_op(&[r(&[3, 4], 25)], move |_, v| {
                v[0].bce_with_logits(&t).unwrap()
            })
        }),
        op("bce", {
            let t = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
            check_op(&[random_tensor(&[3, 4], 26, 0.1, 0.9)], move |_, v| {
                v[0].bce(&t).unwrap()
            })
        }),
        op(
            "dropout",
            check_op(&[r(&[4, 3, 2], 27)], |_, v| {
                v[0].dropout(0.3, &mut rng_from_seed(1), true).unwrap()
            }),
        ),
        op(
            "drop_path",
            check_op(&[r(&[4, 3, 2], 27)], |_, v| {
                v[0].drop_path(0.5, &mut rng_from_seed(2), true).unwrap()
            }),
        ),
        composed(
            "topm_attention",
            check_op(
                &[
                    separated_tensor(&[5, 4], 28, 0.05),
                    r(&[5, 4], 29),
                    r(&[5, 4], 30),
                ],
                |_, v| topm_attention(&v[0], &v[1], &v[2], 2, -1e9).unwrap(),
            ),
        ),
        composed("multihead_topm", {
            let inputs: Vec<Tensor> = [
                (vec![2, 6, 8], 31),
                (vec![8, 8], 32),
                (vec![8, 8], 33),
                (vec![8, 8], 34),
                (vec![8, 8], 35),
            ]
            .into_iter()
            .map(|(s, seed)| r(&s, seed))
            .collect();
            check_op(&inputs, |_, v| {
                let w = MultiHeadWeights {
                    wq: v[1],
                    wk: v[2],
                    wv: v[3],
                    wo: v[4],
                };
                multihead_topm(&v[0], &w, 2, 3, -1e9).unwrap()
            })
        }),
    ];
    for axis in 0..3 {
        cases.push(op(
            "mean_dim",
            check_op(std::slice::from_ref(&x3), move |_, v| v[0].mean_dim(axis).unwrap()),
        ));
    }
    for (i, (m, k, n)) in [(2, 3, 4), (5, 2, 3), (1, 6, 2)].into_iter().enumerate() {
        let seed = i as u64 * 10 + 40;
        let targets = Tensor::from_fn(&[m, n], |j| (j % 2) as f64);
        cases.push(composed(
            "matmul-softmax-bce",
            check_op(&[r(&[m, k], seed), r(&[k, n], seed + 1)], move |_, v| {
                v[0].matmul(&v[1]).unwrap().softmax().bce(&targets).unwrap()
            }),
        ));
    }
    cases
}

/// Sequence length 6, width 8, two heads, one layer, m = 3.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        feature_len: 24,
        n_labels: 3,
        profiler: LocalProfilerConfig {
            blocks: 1,
            kernel: 3,
            pool_window: 4,
            pool_stride: 4,
            channels: 8,
            dropout: 0.1,
        },
        attention: AttentionConfig {
            heads: 2,
            layers: 1,
            m: 3,
            ..AttentionConfig::default()
        },
        ..ModelConfig::default()
    }
}

/// Training loss of the tiny model (dropout and drop-path active with a
/// fixed seed) against every parameter.
pub fn full_model_case() -> f64 {
    let cfg = tiny_model_config();
    assert_eq!(cfg.seq_len().unwrap(), 6);
    let model = TransWfModel::new(cfg, 4).unwrap();
    let rows: Vec<Vec<f64>> = (0..2)
        .map(|i| {
            model
                .scale_features(&FeatureVector(
                    random_tensor(&[24], 50 + i, 0.0, 4.0).into_data(),
                ))
                .unwrap()
        })
        .collect();
    let targets = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    check_model(&model, |m| {
        let (loss, grads, _) = m
            .loss_and_grads(&rows, &targets, &mut rng_from_seed(9))
            .unwrap();
        (loss, grads)
    })
}

/// Feature vector recomputed from scratch: for every window, scan the whole
/// trace and collect what falls inside, then count.
pub fn brute_force_features(trace: &Trace, cfg: &AggregationConfig) -> Vec<f64> {
    let n_seg = cfg.feature_len / FIELDS_PER_SEGMENT;
    let mut out = Vec::with_capacity(cfg.feature_len);
    for s in 0..n_seg {
        let inside: Vec<_> = trace
            .events()
            .iter()
            .filter(|e| (e.time / cfg.interval).floor() as usize == s && e.time >= 0.0)
            .collect();
        for d in [Direction::Out, Direction::In] {
            let times: Vec<f64> = inside
                .iter()
                .filter(|e| e.direction == d)
                .map(|e| e.time)
                .collect();
            let iat = if times.len() >= 2 {
                times.windows(2).map(|w| w[1] - w[0]).sum::<f64>() / (times.len() - 1) as f64
            } else {
                0.0
            };
            // a burst starts at every target packet whose predecessor in the
            // window is absent or of the other direction
            let mut starts = 0usize;
            for (i, e) in inside.iter().enumerate() {
                if e.direction == d && (i == 0 || inside[i - 1].direction != d) {
                    starts += 1;
                }
            }
            let size = if starts == 0 {
                0.0
            } else {
                times.len() as f64 / starts as f64
            };
            out.extend([times.len() as f64, iat, starts as f64, size]);
        }
    }
    out
}
