//! Forward-value and gradient tests for the tape ops.


use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_identity_returns_input() {
    let mut tape = Tape::new();
    let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let b = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let i = tape.leaf(eye);
    let bid = tape.leaf(b.clone());
    let out = tape.matmul(i, bid).unwrap();
    assert_eq!(tape.value(out), &b);
}

#[test]
fn matmul_rejects_mismatched_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]));
    let b = tape.leaf(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "error should carry both shapes: {msg}");
}

#[test]
fn softmax_of_constant_vector_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(vec![5], 3.7));
    let s = tape.softmax(x, 0).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(11);
    for _ in 0..20 {
        let x = random_tensor(vec![4, 7], &mut r, 0.0);
        let mut tape = Tape::new();
        let id = tape.leaf(x);
        let s = tape.softmax(id, 1).unwrap();
        let v = tape.value(s);
        for row in 0..4 {
            let sum: f64 = (0..7).map(|j| v.at2(row, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            for j in 0..7 {
                let p = v.at2(row, j);
                assert!(p > 0.0 && p < 1.0);
            }
        }
    }
}

#[test]
fn conv_k1_identity_weights_pass_through() {
    let mut tape = Tape::new();
    let x = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let xi = tape.leaf(x.clone());
    let w = tape.leaf(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
    let b = tape.leaf(Tensor::zeros(vec![2]));
    let out = tape.conv_k1(xi, w, b).unwrap();
    assert_eq!(tape.value(out), &x);
}

#[test]
fn conv_k1_single_position_equals_matmul() {
    let mut r = rng(3);
    let x = random_tensor(vec![4, 1], &mut r, 0.0);
    let w = random_tensor(vec![3, 4], &mut r, 0.0);
    let mut tape = Tape::new();
    let xi = tape.leaf(x.clone());
    let wi = tape.leaf(w.clone());
    let b = tape.leaf(Tensor::zeros(vec![3]));
    let conv = tape.conv_k1(xi, wi, b).unwrap();
    let mm = tape.matmul(wi, xi).unwrap();
    assert_eq!(tape.value(conv).data(), tape.value(mm).data());
}

#[test]
fn conv_k1_matches_loop_oracle() {
    let mut r = rng(4);
    let x = random_tensor(vec![3, 5], &mut r, 0.0);
    let w = random_tensor(vec![2, 3], &mut r, 0.0);
    let b = random_tensor(vec![2], &mut r, 0.0);
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
    let out = tape.conv_k1(xi, wi, bi).unwrap();
    for o in 0..2 {
        for p in 0..5 {
            let mut expect = b.data()[o];
            for i in 0..3 {
                expect += w.at2(o, i) * x.at2(i, p);
            }
            assert!((tape.value(out).at2(o, p) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_constant_channel_yields_shift() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::filled(vec![2, 4], 3.0));
    let gamma = tape.leaf(Tensor::new(vec![2], vec![2.0, 5.0]).unwrap());
    let beta = tape.leaf(Tensor::new(vec![2], vec![-1.0, 0.5]).unwrap());
    let (out, mean, var) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    // zero variance: output is just the shift
    for p in 0..4 {
        assert!((tape.value(out).at2(0, p) - -1.0).abs() < 1e-12);
        assert!((tape.value(out).at2(1, p) - 0.5).abs() < 1e-12);
    }
    assert_eq!(mean, vec![3.0, 3.0]);
    assert_eq!(var, vec![0.0, 0.0]);
}

#[test]
fn batch_norm_eval_fresh_stats_is_identity_up_to_eps() {
    let mut tape = Tape::new();
    let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
    let xi = tape.leaf(x.clone());
    let gamma = tape.leaf(Tensor::filled(vec![1], 1.0));
    let beta = tape.leaf(Tensor::zeros(vec![1]));
    let out = tape.batch_norm_eval(xi, gamma, beta, &[0.0], &[1.0], 1e-5).unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for p in 0..3 {
        assert!((tape.value(out).at2(0, p) - x.at2(0, p) * scale).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_uniform_logits_is_ln_v() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(vec![1, 4]));
    let loss = tape.cross_entropy(logits, &[2], None).unwrap();
    assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
}

#[test]
fn cross_entropy_peaked_logits_approach_zero() {
    let mut tape = Tape::new();
    let mut data = vec![0.0; 8];
    data[1] = 50.0;
    data[4 + 3] = 50.0;
    let logits = tape.leaf(Tensor::new(vec![2, 4], data).unwrap());
    let loss = tape.cross_entropy(logits, &[1, 3], None).unwrap();
    assert!(tape.value(loss).item() < 1e-12);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(vec![1, 4]));
    assert!(tape.cross_entropy(logits, &[4], None).is_err());
}

#[test]
fn cross_entropy_mask_excludes_rows() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(vec![2, 4]));
    let full = tape.cross_entropy(logits, &[0, 0], None).unwrap();
    let half = tape.cross_entropy(logits, &[0, 0], Some(&[true, false])).unwrap();
    assert!((tape.value(full).item() - 2.0 * tape.value(half).item()).abs() < 1e-12);
}

#[test]
fn weighted_bce_unit_weights_match_plain_bce_oracle() {
    let mut r = rng(9);
    let z = random_tensor(vec![6], &mut r, 0.0);
    let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    let ones = vec![1.0; 6];
    let mut tape = Tape::new();
    let zi = tape.leaf(z.clone());
    let loss = tape.weighted_bce(zi, &labels, &ones, &ones).unwrap();
    let mut expect = 0.0;
    for (zv, y) in z.data().iter().zip(&labels) {
        let p = 1.0 / (1.0 + (-zv).exp());
        expect -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    assert!((tape.value(loss).item() - expect).abs() < 1e-10);
}

#[test]
fn lstm_zero_params_halves_cell_state() {
    let hdim = 3;
    let mut tape = Tape::new();
    let zero_mat = |t: &mut Tape, r: usize, c: usize| t.leaf(Tensor::zeros(vec![r, c]));
    let gate = |t: &mut Tape| LstmGateIds {
        w: zero_mat(t, hdim, 2),
        u: zero_mat(t, hdim, hdim),
        b: t.leaf(Tensor::zeros(vec![hdim])),
    };
    let ids = LstmCellIds {
        input: gate(&mut tape),
        forget: gate(&mut tape),
        output: gate(&mut tape),
        cell: gate(&mut tape),
    };
    let x = tape.leaf(Tensor::new(vec![2, 1], vec![0.3, -0.7]).unwrap());
    let h = tape.leaf(Tensor::zeros(vec![hdim, 1]));
    let c = tape.leaf(Tensor::new(vec![hdim, 1], vec![0.4, -1.0, 2.0]).unwrap());
    let (h2, c2) = lstm_cell(&mut tape, x, h, c, &ids).unwrap();
    for (k, &cv) in [0.4f64, -1.0, 2.0].iter().enumerate() {
        let c_expect = 0.5 * cv;
        let h_expect = 0.5 * (0.5 * cv).tanh();
        assert!((tape.value(c2).data()[k] - c_expect).abs() < 1e-15);
        assert!((tape.value(h2).data()[k] - h_expect).abs() < 1e-15);
    }
}

#[test]
fn lstm_two_unit_cell_matches_scalar_simulation() {
    let mut r = rng(21);
    let mk = |r: &mut ChaCha8Rng, shape: Vec<usize>| random_tensor(shape, r, 0.0);
    let tensors: Vec<Tensor> = (0..12)
        .map(|i| match i % 3 {
            0 => mk(&mut r, vec![2, 2]),
            1 => mk(&mut r, vec![2, 2]),
            _ => mk(&mut r, vec![2]),
        })
        .collect();
    let x = mk(&mut r, vec![2, 1]);
    let h = mk(&mut r, vec![2, 1]);
    let c = mk(&mut r, vec![2, 1]);

    let mut tape = Tape::new();
    let ids_vec: Vec<TensorId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
    let gate = |i: usize| LstmGateIds {
        w: ids_vec[i * 3],
        u: ids_vec[i * 3 + 1],
        b: ids_vec[i * 3 + 2],
    };
    let ids = LstmCellIds {
        input: gate(0),
        forget: gate(1),
        output: gate(2),
        cell: gate(3),
    };
    let (xi, hi, ci) = (tape.leaf(x.clone()), tape.leaf(h.clone()), tape.leaf(c.clone()));
    let (h2, c2) = lstm_cell(&mut tape, xi, hi, ci, &ids).unwrap();

    // scalar re-computation, gate by gate
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let pre = |g: usize, k: usize| {
        let w = &tensors[g * 3];
        let u = &tensors[g * 3 + 1];
        let b = &tensors[g * 3 + 2];
        w.at2(k, 0) * x.data()[0]
            + w.at2(k, 1) * x.data()[1]
            + u.at2(k, 0) * h.data()[0]
            + u.at2(k, 1) * h.data()[1]
            + b.data()[k]
    };
    for k in 0..2 {
        let i_g = sig(pre(0, k));
        let f_g = sig(pre(1, k));
        let o_g = sig(pre(2, k));
        let g_g = pre(3, k).tanh();
        let c_exp = f_g * c.data()[k] + i_g * g_g;
        let h_exp = o_g * c_exp.tanh();
        assert!((tape.value(c2).data()[k] - c_exp).abs() < 1e-12);
        assert!((tape.value(h2).data()[k] - h_exp).abs() < 1e-12);
    }
}

// ---- gradient checks ------------------------------------------------------

#[test]
fn grad_elementwise_and_matmul() {
    for seed in 0..3u64 {
        let mut r = rng(seed);
        let a = random_tensor(vec![3, 4], &mut r, 1e-3);
        let b = random_tensor(vec![3, 4], &mut r, 1e-3);
        check_gradients(&[a.clone(), b.clone()], seed, 1e-4, |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let m = t.mul(s, ids[0])?;
            Ok(t.scale(m, 1.7))
        })
        .unwrap();

        let m1 = random_tensor(vec![3, 4], &mut r, 0.0);
        let m2 = random_tensor(vec![4, 2], &mut r, 0.0);
        check_gradients(&[m1, m2], seed, 1e-4, |t, ids| t.matmul(ids[0], ids[1])).unwrap();
    }
}

#[test]
fn grad_activations_softmax() {
    for seed in 0..3u64 {
        let mut r = rng(100 + seed);
        let x = random_tensor(vec![3, 5], &mut r, 1e-2);
        check_gradients(&[x.clone()], seed, 1e-4, |t, ids| Ok(t.relu(ids[0]))).unwrap();
        check_gradients(&[x.clone()], seed, 1e-4, |t, ids| Ok(t.sigmoid(ids[0]))).unwrap();
        check_gradients(&[x.clone()], seed, 1e-4, |t, ids| Ok(t.tanh(ids[0]))).unwrap();
        check_gradients(&[x.clone()], seed, 1e-4, |t, ids| t.softmax(ids[0], 1)).unwrap();
        check_gradients(&[x], seed, 1e-4, |t, ids| t.softmax(ids[0], 0)).unwrap();
    }
}

#[test]
fn grad_structural_ops() {
    for seed in 0..3u64 {
        let mut r = rng(200 + seed);
        let a = random_tensor(vec![2, 3], &mut r, 0.0);
        let b = random_tensor(vec![2, 2], &mut r, 0.0);
        check_gradients(&[a.clone(), b.clone()], seed, 1e-4, |t, ids| {
            t.concat(&[ids[0], ids[1]], 1)
        })
        .unwrap();
        let c = random_tensor(vec![1, 3], &mut r, 0.0);
        check_gradients(&[a.clone(), c], seed, 1e-4, |t, ids| {
            t.concat(&[ids[0], ids[1]], 0)
        })
        .unwrap();
        check_gradients(&[a.clone()], seed, 1e-4, |t, ids| t.transpose(ids[0])).unwrap();
        check_gradients(&[a.clone()], seed, 1e-4, |t, ids| t.mean_pool(ids[0], 1)).unwrap();
        check_gradients(&[a.clone()], seed, 1e-4, |t, ids| t.mean_pool(ids[0], 0)).unwrap();
        check_gradients(&[a.clone()], seed, 1e-4, |t, ids| t.reshape(ids[0], vec![3, 2])).unwrap();
        let x = random_tensor(vec![2, 6], &mut r, 0.0);
        check_gradients(&[x.clone()], seed, 1e-4, |t, ids| t.block_mean(ids[0], 3)).unwrap();
        let m = random_tensor(vec![3, 3], &mut r, 0.0);
        check_gradients(&[x], seed, 1e-4, move |t, ids| {
            t.block_right_matmul(ids[0], &m)
        })
        .unwrap();
        let col = random_tensor(vec![2], &mut r, 0.0);
        check_gradients(&[a.clone(), col], seed, 1e-4, |t, ids| {
            t.add_col(ids[0], ids[1])
        })
        .unwrap();
        check_gradients(&[a], seed, 1e-4, |t, ids| t.slice_cols(ids[0], 1, 2)).unwrap();
    }
}

#[test]
fn slice_cols_values_and_bounds() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2, 4], (0..8).map(|v| v as f64).collect()).unwrap());
    let s = tape.slice_cols(x, 1, 2).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 2.0, 5.0, 6.0]);
    assert!(tape.slice_cols(x, 3, 2).is_err());
}

#[test]
fn grad_convolutions() {
    for seed in 0..3u64 {
        let mut r = rng(300 + seed);
        let x = random_tensor(vec![3, 5], &mut r, 0.0);
        let w = random_tensor(vec![2, 3], &mut r, 0.0);
        let b = random_tensor(vec![2], &mut r, 0.0);
        check_gradients(&[x, w, b], seed, 1e-4, |t, ids| {
            t.conv_k1(ids[0], ids[1], ids[2])
        })
        .unwrap();

        let img = random_tensor(vec![2, 5, 5], &mut r, 0.0);
        let k = random_tensor(vec![3, 2, 3, 3], &mut r, 0.0);
        let kb = random_tensor(vec![3], &mut r, 0.0);
        check_gradients(&[img, k, kb], seed, 1e-4, |t, ids| {
            t.conv3x3_s2(ids[0], ids[1], ids[2])
        })
        .unwrap();
    }
}

#[test]
fn grad_batch_norm_train_and_eval() {
    for seed in 0..3u64 {
        let mut r = rng(400 + seed);
        let x = random_tensor(vec![3, 4], &mut r, 0.0);
        let gamma = random_tensor(vec![3], &mut r, 1e-2);
        let beta = random_tensor(vec![3], &mut r, 0.0);
        check_gradients(&[x.clone(), gamma.clone(), beta.clone()], seed, 1e-4, |t, ids| {
            let (out, _, _) = t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5)?;
            Ok(out)
        })
        .unwrap();
        check_gradients(&[x, gamma, beta], seed, 1e-4, |t, ids| {
            t.batch_norm_eval(ids[0], ids[1], ids[2], &[0.1, -0.2, 0.3], &[1.0, 0.5, 2.0], 1e-5)
        })
        .unwrap();
    }
}

#[test]
fn grad_losses() {
    for seed in 0..3u64 {
        let mut r = rng(500 + seed);
        let logits = random_tensor(vec![3, 5], &mut r, 0.0);
        check_gradients(&[logits], seed, 1e-4, |t, ids| {
            t.cross_entropy(ids[0], &[1, 4, 0], Some(&[true, true, false]))
        })
        .unwrap();

        let z = random_tensor(vec![4], &mut r, 0.0);
        let labels = vec![1.0, 0.0, 1.0, 0.0];
        let wp = vec![2.0, 1.0, 0.5, 3.0];
        let wn = vec![1.0, 1.5, 2.0, 0.25];
        check_gradients(&[z], seed, 1e-4, move |t, ids| {
            t.weighted_bce(ids[0], &labels, &wp, &wn)
        })
        .unwrap();

        let zb = random_tensor(vec![2, 3], &mut r, 0.0);
        let labels2 = vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let wp2 = vec![1.5, 0.75];
        let wn2 = vec![0.5, 2.0];
        check_gradients(&[zb], seed, 1e-4, move |t, ids| {
            t.weighted_bce(ids[0], &labels2, &wp2, &wn2)
        })
        .unwrap();
    }
}

#[test]
fn grad_embed_lookup() {
    let mut r = rng(600);
    let table = random_tensor(vec![5, 4], &mut r, 0.0);
    check_gradients(&[table], 0, 1e-4, |t, ids| {
        let a = t.embed_lookup(ids[0], 2)?;
        let b = t.embed_lookup(ids[0], 2)?; // repeated row: grads accumulate
        let c = t.embed_lookup(ids[0], 4)?;
        let ab = t.add(a, b)?;
        t.add(ab, c)
    })
    .unwrap();
}

#[test]
fn grad_lstm_all_parameter_blocks() {
    for seed in 0..3u64 {
        let mut r = rng(700 + seed);
        let mut inputs = Vec::new();
        for _ in 0..4 {
            inputs.push(random_tensor(vec![3, 2], &mut r, 0.0)); // w
            inputs.push(random_tensor(vec![3, 3], &mut r, 0.0)); // u
            inputs.push(random_tensor(vec![3], &mut r, 0.0)); // b
        }
        inputs.push(random_tensor(vec![2, 1], &mut r, 0.0)); // x
        inputs.push(random_tensor(vec![3, 1], &mut r, 0.0)); // h
        inputs.push(random_tensor(vec![3, 1], &mut r, 0.0)); // c
        check_gradients(&inputs, seed, 1e-4, |t, ids| {
            let gate = |i: usize| LstmGateIds {
                w: ids[i * 3],
                u: ids[i * 3 + 1],
                b: ids[i * 3 + 2],
            };
            let cell = LstmCellIds {
                input: gate(0),
                forget: gate(1),
                output: gate(2),
                cell: gate(3),
            };
            let (h2, c2) = lstm_cell(t, ids[12], ids[13], ids[14], &cell)?;
            t.concat(&[h2, c2], 0)
        })
        .unwrap();
    }
}

// ---- backward structure ----------------------------------------------------

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(vec![2, 2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(801);
    let x = random_tensor(vec![4], &mut r, 1e-3);

    let grad_of = |a: f64, b: f64| -> Vec<f64> {
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let s = tape.sigmoid(xi);
        let l1 = tape.sum(s);
        let t2 = tape.tanh(xi);
        let l2 = tape.sum(t2);
        let sa = tape.scale(l1, a);
        let sb = tape.scale(l2, b);
        let loss = tape.add(sa, sb).unwrap();
        tape.backward(loss).unwrap();
        tape.grad(xi).to_vec()
    };

    let g10 = grad_of(1.0, 0.0);
    let g01 = grad_of(0.0, 1.0);
    let gmix = grad_of(2.0, -3.0);
    for i in 0..4 {
        let expect = 2.0 * g10[i] - 3.0 * g01[i];
        assert!((gmix[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn backward_diamond_accumulates_both_paths() {
    // loss = sum(x*x) + sum(x): d/dx = 2x + 1
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let l1 = tape.sum(sq);
    let l2 = tape.sum(x);
    let loss = tape.add(l1, l2).unwrap();
    tape.backward(loss).unwrap();
    for (g, v) in tape.grad(x).iter().zip([0.5, -1.5, 2.0]) {
        assert!((g - (2.0 * v + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn backward_unreachable_leaf_gets_zero_grad() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let detached = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(detached), &[0.0, 0.0]);
    assert_eq!(tape.grad(x), &[1.0, 1.0]);
}

#[test]
fn forward_backward_deterministic_across_runs() {
    let run = || -> (Vec<f64>, Vec<f64>) {
        let mut r = rng(902);
        let x = random_tensor(vec![6, 6], &mut r, 0.0);
        let w = random_tensor(vec![6, 6], &mut r, 0.0);
        let mut tape = Tape::new();
        let (xi, wi) = (tape.leaf(x), tape.leaf(w));
        let h = tape.matmul(wi, xi).unwrap();
        let a = tape.relu(h);
        let s = tape.softmax(a, 1).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        (tape.value(s).data().to_vec(), tape.grad(wi).to_vec())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1, v2);
    assert_eq!(g1, g2);
}

#[test]
fn param_binding_scatters_grads() {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let mut tape = Tape::new();
    let w = tape.param(&store, "w");
    let s = tape.mul(w, w).unwrap();
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();
    tape.scatter_grads(&mut store);
    assert_eq!(store.grad_of("w").unwrap(), &[2.0, 4.0]);
}
