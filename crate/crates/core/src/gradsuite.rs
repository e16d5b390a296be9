//! Central-difference verification of every differentiable primitive and of
//! the end-to-end loss on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    finite_diff_report, finite_diff_report_with, Activation, Array, FiniteDiffOptions, Mode,
    ParameterStore, Tape, Var,
};
use crate::error::Result;
use crate::model::{
    gumbel_noise, DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, ModelConfig, NriModel,
    Rollout, Session,
};
use crate::sim::{simulate_springs, SpringsSpec};
use crate::train::{elbo_loss, LossConfig, Prior};

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;
/// The end-to-end checks contain ReLUs; see [`FiniteDiffOptions`].
const ELBO_STEPS: [f64; 2] = [1e-5, 1e-6];
const ELBO_SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub worst: String,
    pub worst_values: (f64, f64),
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_array<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so kinks at 0 are never crossed.
fn off_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Array {
    Array::from_fn(shape, |_| {
        let m = rng.gen_range(0.2..1.5);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Reduces `v` to a scalar with fixed, non-uniform weights so every output
/// element gets a distinct upstream gradient.
fn weighted_sum(t: &mut Tape, v: Var) -> Result<Var> {
    let shape = t.value(v).shape().to_vec();
    let w = t.leaf(Array::from_fn(&shape, |i| {
        0.5 + ((i * 7919) % 13) as f64 / 13.0
    }));
    let p = t.mul(v, w)?;
    t.sum_all(p)
}

type Builder = Box<dyn Fn(&mut Tape, &ParameterStore) -> Result<Var>>;

struct Case {
    name: &'static str,
    store: ParameterStore,
    build: Builder,
}

fn case(
    name: &'static str,
    inputs: Vec<(&str, Array)>,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut store = ParameterStore::new();
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    for (n, a) in inputs {
        store.insert(n, a);
    }
    Case {
        name,
        store,
        build: Box::new(move |t, st| {
            let vars = names
                .iter()
                .map(|n| t.param(st, n))
                .collect::<Result<Vec<_>>>()?;
            let out = build(t, &vars)?;
            weighted_sum(t, out)
        }),
    }
}

fn primitive_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = &mut rng;
    let mut cases = vec![
        case(
            "matmul",
            vec![
                ("a", rand_array(&[2, 3, 4], -1.0, 1.0, r)),
                ("b", rand_array(&[4, 5], -1.0, 1.0, r)),
            ],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "matmul_batched_rhs",
            vec![
                ("a", rand_array(&[3, 4], -1.0, 1.0, r)),
                ("b", rand_array(&[2, 4, 5], -1.0, 1.0, r)),
            ],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "add",
            vec![
                ("a", rand_array(&[2, 3, 4], -1.0, 1.0, r)),
                ("b", rand_array(&[3, 1], -1.0, 1.0, r)),
            ],
            |t, v| t.add(v[0], v[1]),
        ),
        case(
            "subtract",
            vec![
                ("a", rand_array(&[2, 3], -1.0, 1.0, r)),
                ("b", rand_array(&[3], -1.0, 1.0, r)),
            ],
            |t, v| t.sub(v[0], v[1]),
        ),
        case(
            "multiply",
            vec![
                ("a", rand_array(&[4, 1, 3], -1.0, 1.0, r)),
                ("b", rand_array(&[2, 3], -1.0, 1.0, r)),
            ],
            |t, v| t.mul(v[0], v[1]),
        ),
        case(
            "scale",
            vec![("a", rand_array(&[3, 2], -1.0, 1.0, r))],
            |t, v| t.scale(v[0], -2.5),
        ),
        case(
            "concat",
            vec![
                ("a", rand_array(&[2, 3, 2], -1.0, 1.0, r)),
                ("b", rand_array(&[2, 1, 2], -1.0, 1.0, r)),
            ],
            |t, v| t.concat(&[v[0], v[1], v[0]], 1),
        ),
        case(
            "slice",
            vec![("a", rand_array(&[2, 5, 3], -1.0, 1.0, r))],
            |t, v| t.slice(v[0], 1, 1, 4),
        ),
        case(
            "reshape",
            vec![("a", rand_array(&[2, 6], -1.0, 1.0, r))],
            |t, v| t.reshape(v[0], &[3, 4]),
        ),
        case(
            "sum",
            vec![("a", rand_array(&[2, 3, 4], -1.0, 1.0, r))],
            |t, v| t.sum(v[0], 1),
        ),
        case(
            "sum_all",
            vec![("a", rand_array(&[2, 3], -1.0, 1.0, r))],
            |t, v| {
                let s = t.sum_all(v[0])?;
                t.square(s)
            },
        ),
        case(
            "mean",
            vec![("a", rand_array(&[2, 3, 4], -1.0, 1.0, r))],
            |t, v| t.mean(v[0], 2),
        ),
        case("relu", vec![("a", off_zero(&[3, 4], r))], |t, v| {
            t.relu(v[0])
        }),
        case("elu", vec![("a", off_zero(&[3, 4], r))], |t, v| t.elu(v[0])),
        case(
            "tanh",
            vec![("a", rand_array(&[3, 4], -2.0, 2.0, r))],
            |t, v| t.tanh(v[0]),
        ),
        case(
            "sigmoid",
            vec![("a", rand_array(&[3, 4], -3.0, 3.0, r))],
            |t, v| t.sigmoid(v[0]),
        ),
        case(
            "softmax",
            vec![("a", rand_array(&[2, 3, 4], -2.0, 2.0, r))],
            |t, v| t.softmax(v[0], 2),
        ),
        case(
            "softmax_inner_axis",
            vec![("a", rand_array(&[2, 3, 4], -2.0, 2.0, r))],
            |t, v| t.softmax(v[0], 1),
        ),
        case(
            "log",
            vec![("a", rand_array(&[3, 4], 0.3, 3.0, r))],
            |t, v| t.log(v[0]),
        ),
        case(
            "square",
            vec![("a", rand_array(&[3, 4], -2.0, 2.0, r))],
            |t, v| t.square(v[0]),
        ),
        case(
            "xlogx",
            vec![("a", rand_array(&[3, 4], 0.05, 1.0, r))],
            |t, v| t.xlogx(v[0]),
        ),
        case(
            "batchnorm",
            vec![
                ("x", rand_array(&[5, 3], -2.0, 2.0, r)),
                ("gamma", rand_array(&[3], 0.5, 1.5, r)),
                ("beta", rand_array(&[3], -0.5, 0.5, r)),
            ],
            |t, v| t.batchnorm(v[0], v[1], v[2], 1, None),
        ),
        case(
            "batchnorm_eval",
            vec![
                ("x", rand_array(&[4, 2, 3], -2.0, 2.0, r)),
                ("gamma", rand_array(&[3], 0.5, 1.5, r)),
                ("beta", rand_array(&[3], -0.5, 0.5, r)),
            ],
            |t, v| {
                let m = t.leaf(Array::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap());
                let s = t.leaf(Array::new(vec![3], vec![0.8, 1.3, 0.5]).unwrap());
                t.batchnorm(v[0], v[1], v[2], 2, Some((m, s)))
            },
        ),
        case(
            "dropout",
            vec![("a", rand_array(&[4, 5], -1.0, 1.0, r))],
            |t, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(11);
                t.dropout(v[0], 0.3, Mode::Train, &mut mask_rng)
            },
        ),
    ];
    for (name, act) in [
        ("linear", Activation::Identity),
        ("linear_relu", Activation::Relu),
        ("linear_elu", Activation::Elu),
        ("linear_tanh", Activation::Tanh),
        ("linear_sigmoid", Activation::Sigmoid),
    ] {
        // Pre-activations stay away from the kinks of relu/elu.
        let x = rand_array(&[2, 3, 4], -1.0, 1.0, r);
        let w = rand_array(&[4, 3], -1.0, 1.0, r);
        let pre = {
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
            let p = t.matmul(xv, wv).unwrap();
            t.value(p).clone()
        };
        let b = Array::from_fn(&[3], |j| {
            let col: Vec<f64> = pre.data().iter().skip(j).step_by(3).copied().collect();
            if col.iter().all(|v| v.abs() > 0.05) {
                0.0
            } else {
                // Shift the column past every kink.
                col.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)).abs() + 0.3
            }
        });
        cases.push(case(
            name,
            vec![("x", x), ("w", w), ("b", b)],
            move |t, v| t.linear(v[0], v[1], Some(v[2]), act),
        ));
    }
    cases.push(case(
        "linear_no_bias",
        vec![
            ("x", rand_array(&[4, 3], -1.0, 1.0, r)),
            ("w", rand_array(&[3, 2], -1.0, 1.0, r)),
        ],
        |t, v| t.linear(v[0], v[1], None, Activation::Tanh),
    ));
    cases.push(case(
        "conv1d",
        vec![
            ("x", rand_array(&[2, 7, 3], -1.0, 1.0, r)),
            ("w", rand_array(&[15, 4], -1.0, 1.0, r)),
            ("b", rand_array(&[4], -0.5, 0.5, r)),
        ],
        |t, v| t.conv1d(v[0], v[1], v[2], 5),
    ));
    // Distinct values keep every pooling window's maximum unique.
    let pool_in = Array::from_fn(&[2, 7, 3], |i| ((i * 37) % 42) as f64 * 0.1 - 2.0);
    cases.push(case("max_pool1d", vec![("x", pool_in)], |t, v| {
        t.max_pool1d(v[0], 2)
    }));
    cases
}

fn tiny_model(
    encoder: EncoderKind,
    decoder: DecoderKind,
    n: usize,
    t: usize,
    steps: usize,
) -> ModelConfig {
    let f = 4;
    ModelConfig {
        n_objects: n,
        encoder: Some(EncoderConfig {
            kind: encoder,
            hidden: 8,
            k_types: 2,
            input_dim: if encoder == EncoderKind::Mlp {
                t * f
            } else {
                f
            },
            dropout_p: 0.0,
        }),
        decoder: Some(DecoderConfig {
            kind: decoder,
            hidden: 8,
            k_types: 2,
            n_features: f,
            skip_first_type: false,
            msg_steps: steps,
        }),
    }
}

/// End-to-end negative ELBO with frozen Gumbel noise, differentiated with
/// respect to every parameter of the model.
fn elbo_case(
    name: &'static str,
    cfg: ModelConfig,
    frames: usize,
    sigma_sq: f64,
    prior: Prior,
    corrupt: Option<&'static str>,
) -> Result<CheckResult> {
    let model = NriModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = model.init_params(&mut rng);
    // Non-zero biases exercise their gradients.
    for (name, p) in store.params_mut() {
        if name.ends_with(".b") || name.ends_with(".beta") {
            p.value = rand_array(p.value.shape(), -0.1, 0.1, &mut rng);
        }
    }
    let n = model.cfg.n_objects;
    let spec = SpringsSpec {
        n_objects: n,
        n_steps_out: frames,
        ..SpringsSpec::default()
    };
    let batch: Vec<Array> = (0..2)
        .map(|s| simulate_springs(&spec, 100 + s).map(|tr| tr.states))
        .collect::<Result<_>>()?;
    let x = Array::concat_outer(
        &batch
            .into_iter()
            .map(|a| {
                let shape = [&[1][..], a.shape()].concat();
                a.reshape(&shape).unwrap()
            })
            .collect::<Vec<_>>(),
    )?;
    let noise = gumbel_noise(&[2, model.n_edges(), 2], &mut rng);
    let steps = model.decoder_cfg()?.msg_steps;
    let loss_cfg = LossConfig {
        tau: 0.5,
        sigma_sq,
        prior,
        rollout: Rollout::training(model.decoder_cfg()?.kind, steps),
    };
    let report = finite_diff_report_with(
        |st| {
            let mut s = Session::new(st, Mode::Train, ChaCha8Rng::seed_from_u64(0));
            if let Some(p) = corrupt {
                s.tape.corrupt_backward(p);
            }
            let xv = s.input(x.clone());
            let terms = elbo_loss(&model, &mut s, xv, &loss_cfg, Some(&noise))?;
            Ok((s.tape, terms.loss))
        },
        &store,
        &FiniteDiffOptions {
            steps: ELBO_STEPS.to_vec(),
            scale_floor: ELBO_SCALE_FLOOR,
        },
    )?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        worst: report.worst,
        worst_values: report.worst_values,
        checked: report.checked,
    })
}

/// Runs every check. `corrupt` names a primitive whose backward rule is
/// deliberately scaled, as a negative control.
pub fn run_suite(corrupt: Option<&'static str>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for c in primitive_cases() {
        let build = &c.build;
        let report = finite_diff_report(
            |st| {
                let mut t = Tape::new();
                if let Some(p) = corrupt {
                    t.corrupt_backward(p);
                }
                let y = build(&mut t, st)?;
                Ok((t, y))
            },
            &c.store,
            STEP,
        )?;
        out.push(CheckResult {
            name: c.name.to_string(),
            max_rel_error: report.max_rel_error,
            worst: report.worst,
            worst_values: report.worst_values,
            checked: report.checked,
        });
    }
    out.push(elbo_case(
        "elbo_mlp_markov",
        tiny_model(EncoderKind::Mlp, DecoderKind::Markov, 3, 5, 2),
        5,
        1e-2,
        Prior::Uniform,
        corrupt,
    )?);
    out.push(elbo_case(
        "elbo_mlp_recurrent_sparse_prior",
        tiny_model(EncoderKind::Mlp, DecoderKind::Recurrent, 3, 5, 2),
        5,
        1e-2,
        Prior::Sparse(vec![0.9, 0.1]),
        corrupt,
    )?);
    let t_cnn = crate::model::cnn_min_length();
    out.push(elbo_case(
        "elbo_cnn_recurrent",
        tiny_model(EncoderKind::Cnn, DecoderKind::Recurrent, 3, t_cnn, 4),
        t_cnn,
        1e-2,
        Prior::Uniform,
        corrupt,
    )?);
    Ok(out)
}

/// Primitive names accepted by [`run_suite`]'s corruption hook.
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "subtract",
    "multiply",
    "scale",
    "concat",
    "slice",
    "reshape",
    "sum",
    "sum_all",
    "mean",
    "relu",
    "elu",
    "tanh",
    "sigmoid",
    "softmax",
    "log",
    "square",
    "xlogx",
    "batchnorm",
    "dropout",
    "linear",
    "conv1d",
    "max_pool1d",
];
