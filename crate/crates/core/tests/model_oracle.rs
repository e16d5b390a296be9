use nri_core::diffcore::{finite_diff_report, Array, Mode, ParameterStore};
use nri_core::graphops::edge_index;
use nri_core::model::{cnn_min_length, Rollout, Session};
use nri_core::noise::Stream;
use nri_core::{
    DecoderConfig, DecoderKind, EncoderConfig, EncoderKind, Error, ModelConfig, NriModel,
};
use rand::Rng;

const F: usize = 2;

fn decoder(kind: DecoderKind, hidden: usize, skip_first_type: bool) -> DecoderConfig {
    DecoderConfig {
        kind,
        hidden,
        k_types: 2,
        n_features: F,
        skip_first_type,
        msg_steps: 2,
    }
}

fn encoder(kind: EncoderKind, t: usize) -> EncoderConfig {
    let input_dim = if kind == EncoderKind::Mlp { t * F } else { F };
    EncoderConfig {
        kind,
        hidden: 6,
        k_types: 2,
        input_dim,
        dropout_p: 0.0,
    }
}

fn model(n: usize, enc: Option<EncoderConfig>, dec: Option<DecoderConfig>) -> NriModel {
    NriModel::new(ModelConfig {
        n_objects: n,
        encoder: enc,
        decoder: dec,
    })
    .unwrap()
}

fn params(m: &NriModel, seed: u64) -> ParameterStore {
    m.init_params(&mut Stream::new(seed).rng())
}

fn random(shape: &[usize], seed: u64) -> Array {
    let mut rng = Stream::new(seed).split("input").rng();
    Array::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn session(store: &ParameterStore) -> Session<'_> {
    Session::new(store, Mode::Eval, Stream::new(0).rng())
}

fn markov_step(m: &NriModel, store: &ParameterStore, x: &Array, z: &Array) -> Array {
    let mut s = session(store);
    let xv = s.input(x.clone());
    let zv = s.input(z.clone());
    let mu = m.decode_markov_step(&mut s, xv, zv).unwrap();
    s.tape.value(mu).clone()
}

/// `x @ w + b` with `w` stored `[in, out]`.
fn affine(store: &ParameterStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let w = store.value(&format!("{prefix}.w")).unwrap();
    let b = store.value(&format!("{prefix}.b")).unwrap();
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), n_in);
    (0..n_out)
        .map(|o| {
            b.data()[o]
                + (0..n_in)
                    .map(|i| x[i] * w.data()[i * n_out + o])
                    .sum::<f64>()
        })
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

#[test]
fn markov_step_matches_hand_computation() {
    let (n, h) = (3, 3);
    let m = model(n, None, Some(decoder(DecoderKind::Markov, h, false)));
    let mut store = params(&m, 1);
    // Replace every weight with a small, fixed, non-symmetric value.
    let names: Vec<String> = store.params().map(|(k, _)| k.clone()).collect();
    for (p, name) in names.iter().enumerate() {
        let v = &mut store.get_mut(name).unwrap().value;
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = 0.3 * ((p * 31 + i) as f64 * 0.7).sin();
        }
    }
    let x = random(&[n, F], 2);
    let z = Array::from_fn(&[n * (n - 1), 2], |i| if i % 2 == 0 { 0.25 } else { 0.75 });
    let got = markov_step(&m, &store, &x, &z);

    let node = |i: usize| x.data()[i * F..(i + 1) * F].to_vec();
    for j in 0..n {
        let mut agg = vec![0.0; h];
        for i in (0..n).filter(|&i| i != j) {
            let pair = [node(j), node(i)].concat();
            let e = edge_index(n, i, j);
            for k in 0..2 {
                let msg = relu(affine(
                    &store,
                    &format!("dec.msg_fc2.{k}"),
                    &relu(affine(&store, &format!("dec.msg_fc1.{k}"), &pair)),
                ));
                for (a, v) in agg.iter_mut().zip(msg) {
                    *a += z.data()[e * 2 + k] * v;
                }
            }
        }
        let hidden = [node(j), agg].concat();
        let p = relu(affine(&store, "dec.out_fc1", &hidden));
        let p = relu(affine(&store, "dec.out_fc2", &p));
        let delta = affine(&store, "dec.out_fc3", &p);
        for c in 0..F {
            let expected = node(j)[c] + delta[c];
            assert!(
                (got.data()[j * F + c] - expected).abs() < 1e-14,
                "node {j} channel {c}"
            );
        }
    }
}

#[test]
fn zero_output_weights_predict_no_change() {
    for kind in [DecoderKind::Markov, DecoderKind::Recurrent] {
        let m = model(4, None, Some(decoder(kind, 5, false)));
        let mut store = params(&m, 3);
        for name in ["dec.out_fc3.w", "dec.out_fc3.b"] {
            store.get_mut(name).unwrap().value.data_mut().fill(0.0);
        }
        let x = random(&[2, 4, 6, F], 4);
        let z = random(&[2, 12, 2], 5).map(f64::abs);
        let mut s = session(&store);
        let (xv, zv) = (s.input(x.clone()), s.input(z));
        let mu = m.rollout(&mut s, xv, zv, Rollout::FreeRun(6)).unwrap();
        // Fully teacher-forced, so each prediction copies its input frame.
        let expected = x.outer_range(0, 2);
        for b in 0..2 {
            for i in 0..4 {
                for t in 0..5 {
                    for c in 0..F {
                        assert_eq!(
                            s.tape.value(mu).get(&[b, i, t, c]),
                            expected.get(&[b, i, t, c])
                        );
                    }
                }
            }
        }
    }
}

/// Object relabeling `i -> perm[i]` applied to node arrays `[.., N, C]`.
fn permute_nodes(x: &Array, perm: &[usize]) -> Array {
    let n = perm.len();
    let shape = x.shape();
    let inner: usize = shape[2..].iter().product();
    let mut out = x.clone();
    for b in 0..shape[0] {
        for i in 0..n {
            let src = (b * n + i) * inner;
            let dst = (b * n + perm[i]) * inner;
            out.data_mut()[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
        }
    }
    out
}

/// The same relabeling applied to edge arrays `[B, E, K]`.
fn permute_edges(z: &Array, perm: &[usize]) -> Array {
    let n = perm.len();
    let (b, e, k) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let mut out = z.clone();
    for bi in 0..b {
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let src = (bi * e + edge_index(n, i, j)) * k;
                let dst = (bi * e + edge_index(n, perm[i], perm[j])) * k;
                out.data_mut()[dst..dst + k].copy_from_slice(&z.data()[src..src + k]);
            }
        }
    }
    out
}

fn assert_close(a: &Array, b: &Array, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.zip_map(b, |x, y| x - y).max_abs();
    assert!(d < tol, "max deviation {d:e}");
}

#[test]
fn relabeling_objects_permutes_logits_and_predictions() {
    let n = 4;
    let perm = [2, 0, 3, 1];
    let t = cnn_min_length() + 1;
    for kind in [EncoderKind::Mlp, EncoderKind::Cnn] {
        for mode in [Mode::Eval, Mode::Train] {
            let m = model(n, Some(encoder(kind, t)), None);
            let store = params(&m, 6);
            let x = random(&[2, n, t, F], 7);
            let logits = |x: &Array| {
                let mut s = Session::new(&store, mode, Stream::new(0).rng());
                let v = s.input(x.clone());
                let l = m.encode(&mut s, v).unwrap();
                s.tape.value(l).clone()
            };
            assert_close(
                &logits(&permute_nodes(&x, &perm)),
                &permute_edges(&logits(&x), &perm),
                1e-12,
            );
        }
    }
    for kind in [DecoderKind::Markov, DecoderKind::Recurrent] {
        let m = model(n, None, Some(decoder(kind, 5, false)));
        let store = params(&m, 8);
        let x = random(&[2, n, 5, F], 9);
        let z = random(&[2, n * (n - 1), 2], 10).map(f64::abs);
        let roll = |x: &Array, z: &Array| {
            let mut s = session(&store);
            let (xv, zv) = (s.input(x.clone()), s.input(z.clone()));
            let mu = m
                .rollout(&mut s, xv, zv, Rollout::training(kind, 2))
                .unwrap();
            s.tape.value(mu).clone()
        };
        let direct = roll(&permute_nodes(&x, &perm), &permute_edges(&z, &perm));
        assert_close(&direct, &permute_nodes(&roll(&x, &z), &perm), 1e-12);
    }
}

#[test]
fn hard_coded_non_edges_isolate_objects() {
    let n = 4;
    let m = model(n, None, Some(decoder(DecoderKind::Markov, 5, true)));
    let store = params(&m, 11);
    let x = random(&[1, n, F], 12);
    let z = Array::from_fn(&[1, n * (n - 1), 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
    let base = markov_step(&m, &store, &x, &z);
    let mut moved = x.clone();
    moved.data_mut()[0] += 0.5;
    moved.data_mut()[1] -= 0.25;
    let after = markov_step(&m, &store, &moved, &z);
    for b in 1..n {
        for c in 0..F {
            assert_eq!(
                base.get(&[0, b, c]),
                after.get(&[0, b, c]),
                "object {b} reacted to object 0"
            );
        }
    }
    // With the interaction type switched on, object 0 does reach the others.
    let z_on = Array::from_fn(&[1, n * (n - 1), 2], |i| if i % 2 == 1 { 1.0 } else { 0.0 });
    assert_ne!(
        markov_step(&m, &store, &x, &z_on),
        markov_step(&m, &store, &moved, &z_on)
    );
}

#[test]
fn one_hot_and_equal_relaxed_samples_decode_identically() {
    let m = model(3, None, Some(decoder(DecoderKind::Markov, 4, false)));
    let store = params(&m, 13);
    let x = random(&[1, 3, F], 14);
    let hot = Array::from_fn(&[1, 6, 2], |i| {
        if (i / 2) % 3 == 0 {
            [1.0, 0.0][i % 2]
        } else {
            [0.0, 1.0][i % 2]
        }
    });
    // Numerically equal values built through arithmetic rather than copied.
    let relaxed = hot.map(|v| (v * 3.0) / 3.0);
    assert_eq!(
        markov_step(&m, &store, &x, &hot),
        markov_step(&m, &store, &x, &relaxed)
    );
}

#[test]
fn cnn_encoder_accepts_any_long_enough_sequence() {
    let m = model(5, Some(encoder(EncoderKind::Cnn, 0)), None);
    let store = params(&m, 15);
    for t in [49, 17, cnn_min_length()] {
        let mut s = session(&store);
        let x = s.input(random(&[2, 5, t, F], 16));
        let l = m.encode(&mut s, x).unwrap();
        assert_eq!(s.tape.value(l).shape(), &[2, 20, 2]);
        assert!(s.tape.value(l).all_finite());
    }
    let mut s = session(&store);
    let x = s.input(random(&[2, 5, cnn_min_length() - 1, F], 16));
    assert!(matches!(m.encode(&mut s, x), Err(Error::Contract(_))));
}

#[test]
fn identical_objects_give_identical_logits() {
    let m = model(5, Some(encoder(EncoderKind::Mlp, 6)), None);
    let store = params(&m, 17);
    let one = random(&[1, 1, 6, F], 18);
    let x = Array::from_fn(&[2, 5, 6, F], |i| one.data()[i % (6 * F)]);
    let mut s = session(&store);
    let v = s.input(x);
    let l = m.encode(&mut s, v).unwrap();
    let l = s.tape.value(l);
    assert_eq!(l.shape(), &[2, 20, 2]);
    for row in l.data().chunks(2) {
        assert_eq!(row, &l.data()[..2]);
    }
}

#[test]
fn encoder_input_gradient_matches_finite_differences() {
    let (n, t) = (3, 4);
    for kind in [EncoderKind::Mlp, EncoderKind::Cnn] {
        let t = if kind == EncoderKind::Cnn {
            cnn_min_length()
        } else {
            t
        };
        let m = model(n, Some(encoder(kind, t)), None);
        let weights = params(&m, 19);
        let mut point = ParameterStore::new();
        point.insert("x", random(&[2, n, t, F], 20));
        // Eval mode: in train mode batchnorm re-centers over the batch and
        // the mean logit would not depend on the input at all.
        let report = finite_diff_report(
            |store| {
                let mut full = weights.clone();
                full.insert("x", store.value("x").unwrap().clone());
                let mut s = Session::new(&full, Mode::Eval, Stream::new(0).rng());
                let x = s.param("x")?;
                let l = m.encode(&mut s, x)?;
                let l = s.tape.sum_all(l)?;
                let count = (2 * n * (n - 1) * 2) as f64;
                let out = s.tape.scale(l, 1.0 / count)?;
                Ok((s.tape, out))
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{kind:?}: {report:?}");
    }
}

#[test]
fn markov_ladder_feeds_ground_truth_every_m_steps() {
    let forced: Vec<usize> = (0..48)
        .filter(|&t| Rollout::TrainMarkov(10).teacher_forced(t, 49))
        .map(|t| t + 1)
        .collect();
    assert_eq!(forced, vec![1, 11, 21, 31, 41]);
    let recurrent: Vec<usize> = (0..48)
        .filter(|&t| !Rollout::TrainRecurrent(10).teacher_forced(t, 49))
        .collect();
    assert_eq!(recurrent, (39..48).collect::<Vec<_>>());
}
