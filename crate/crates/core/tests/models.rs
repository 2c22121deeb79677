use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stgbgru::autodiff::{check_gradients, Tape, Tensor};
use stgbgru::graph::normalize_adjacency;
use stgbgru::models::{
    gcn2_forward, gru_cell, stacked_gcn_gru_forward, stgbgru_cell, Activation, GcnParams, GruParams, Model,
    ModelKind, ModelParams, ModelShape, Network, ParamTree, Readout, StgbgruParams,
};
use stgbgru::Error;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn random_a_hat(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.6) {
                let w = rng.gen_range(0.05..0.35);
                a[i * n + j] = w;
                a[j * n + i] = w;
            }
        }
    }
    normalize_adjacency(&Tensor::matrix(n, n, a).unwrap()).unwrap()
}

fn randomize(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    params.visit_mut(&mut |t| t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8)));
}

fn column(window: &Tensor, node: usize) -> Vec<f64> {
    let (m, n) = window.dims2().unwrap();
    (0..m).map(|t| window.data()[t * n + node]).collect()
}

/// Runs a GRU over one scalar sequence and applies the readout.
fn gru_reference(seq: &[f64], gru: &GruParams, readout: &Readout) -> f64 {
    let mut h = Tensor::zeros(&[gru.hidden_dim()]);
    for &x in seq {
        h = gru_cell(&Tensor::vector(vec![x]).unwrap(), &h, gru).unwrap();
    }
    h.data().iter().zip(readout.w_out.data()).map(|(a, w)| a * w).sum::<f64>() + readout.b_out.data()[0]
}

#[test]
fn identity_graph_decouples_sites() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [1, 3, 6] {
        let gru = GruParams::init(&mut rng, 1, 5, false).unwrap();
        let readout = Readout::init(&mut rng, 5).unwrap();
        let params = ModelParams {
            network: Network::Stgbgru(StgbgruParams::from_gru(&gru)),
            readout: readout.clone(),
        };
        let model = Model::from_params(ModelShape::new(ModelKind::Stgbgru, 5), params).unwrap();
        let window = uniform(&mut rng, &[4, n], 0.0, 1.0);
        let got = model.forward_sequence(&window, &Tensor::identity(n)).unwrap();
        for node in 0..n {
            let want = gru_reference(&column(&window, node), &gru, &readout);
            assert!((got.data()[node] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn fused_cell_matches_independent_grus_on_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let gru = GruParams::init(&mut rng, 1, 4, true).unwrap();
    let x = uniform(&mut rng, &[5, 1], 0.0, 1.0);
    let h = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    let out = stgbgru_cell(&x, &h, &Tensor::identity(5), &StgbgruParams::from_gru(&gru)).unwrap();
    for node in 0..5 {
        let xi = Tensor::vector(x.row(node).to_vec()).unwrap();
        let hi = Tensor::vector(h.row(node).to_vec()).unwrap();
        let want = gru_cell(&xi, &hi, &gru).unwrap();
        for (a, b) in out.row(node).iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn stacked_with_identity_encoder_is_plain_gru() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let gru = GruParams::init(&mut rng, 1, 6, false).unwrap();
    let readout = Readout::init(&mut rng, 6).unwrap();
    let gcn = GcnParams {
        w0: Tensor::identity(1),
        w1: Tensor::identity(1),
        output_activation: Activation::Identity,
    };
    let mut shape = ModelShape::new(ModelKind::Stacked, 6);
    shape.gcn_activation = Activation::Identity;
    let stacked = Model::from_params(
        shape,
        ModelParams {
            network: Network::Stacked { gcn, gru: gru.clone() },
            readout: readout.clone(),
        },
    )
    .unwrap();
    let plain = Model::from_params(
        ModelShape::new(ModelKind::PlainGru, 6),
        ModelParams {
            network: Network::PlainGru(gru),
            readout,
        },
    )
    .unwrap();
    let windows = uniform(&mut rng, &[3, 5, 4], 0.0, 1.0);
    let i4 = Tensor::identity(4);
    let a = stacked.predict(&i4, &windows).unwrap();
    let b = plain.predict(&i4, &windows).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

#[test]
fn stacked_matches_two_stage_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for activation in [Activation::Sigmoid, Activation::Identity] {
        let mut shape = ModelShape::new(ModelKind::Stacked, 4);
        shape.gcn_activation = activation;
        let model = Model::init(shape, rng.gen()).unwrap();
        let Network::Stacked { gcn, gru } = &model.params().network else {
            unreachable!()
        };
        let a_hat = random_a_hat(&mut rng, 5);
        let window = uniform(&mut rng, &[4, 5], 0.0, 1.0);
        let batched = model.forward_sequence(&window, &a_hat).unwrap();
        let reference = stacked_gcn_gru_forward(&window, &a_hat, gcn, gru, &model.params().readout).unwrap();
        assert!(batched.max_abs_diff(&reference).unwrap() < 1e-12);
    }
}

#[test]
fn zero_parameters_predict_the_readout_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a_hat = random_a_hat(&mut rng, 4);
    for kind in ModelKind::ALL {
        let mut model = Model::init(ModelShape::new(kind, 3), 1).unwrap();
        model.params_mut().visit_mut(&mut |t| t.data_mut().fill(0.0));
        model.params_mut().readout.b_out = Tensor::vector(vec![0.37]).unwrap();
        let window = uniform(&mut rng, &[5, 4], 0.0, 1.0);
        let out = model.forward_sequence(&window, &a_hat).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.37), "{kind}: {out:?}");
    }
}

#[test]
fn single_step_window_is_one_cell_plus_readout() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a_hat = random_a_hat(&mut rng, 3);
    let model = Model::init(ModelShape::new(ModelKind::Stgbgru, 4), 2).unwrap();
    let Network::Stgbgru(cell) = &model.params().network else {
        unreachable!()
    };
    let window = uniform(&mut rng, &[1, 3], 0.0, 1.0);
    let x = window.reshape(&[3, 1]).unwrap();
    let h = stgbgru_cell(&x, &Tensor::zeros(&[3, 4]), &a_hat, cell).unwrap();
    let r = &model.params().readout;
    let out = model.forward_sequence(&window, &a_hat).unwrap();
    for node in 0..3 {
        let want: f64 = h.row(node).iter().zip(r.w_out.data()).map(|(a, w)| a * w).sum::<f64>() + r.b_out.data()[0];
        assert!((out.data()[node] - want).abs() < 1e-14);
    }
}

#[test]
fn batched_prediction_matches_single_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a_hat = random_a_hat(&mut rng, 4);
    for kind in ModelKind::ALL {
        let model = Model::init(ModelShape::new(kind, 5), 3).unwrap();
        let windows = uniform(&mut rng, &[6, 3, 4], 0.0, 1.0);
        let batched = model.predict(&a_hat, &windows).unwrap();
        for b in 0..6 {
            let single = Tensor::matrix(3, 4, windows.data()[b * 12..(b + 1) * 12].to_vec()).unwrap();
            let out = model.forward_sequence(&single, &a_hat).unwrap();
            assert_eq!(out.data(), batched.row(b));
        }
    }
}

#[test]
fn hidden_state_stays_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for depth in [1, 2] {
        for _ in 0..20 {
            let mut p = StgbgruParams::init(&mut rng, 1, 4, depth, true).unwrap();
            p.visit_mut(&mut |t| t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-5.0..5.0)));
            let a_hat = random_a_hat(&mut rng, 5);
            let mut h = uniform(&mut rng, &[5, 4], -1.0, 1.0);
            for _ in 0..10 {
                let x = uniform(&mut rng, &[5, 1], -3.0, 3.0);
                h = stgbgru_cell(&x, &h, &a_hat, &p).unwrap();
                assert!(h.max_abs() <= 1.0);
            }
        }
    }
}

#[test]
fn full_loss_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a_hat = random_a_hat(&mut rng, 4);
    for (kind, depth) in [
        (ModelKind::Stgbgru, 1),
        (ModelKind::Stgbgru, 2),
        (ModelKind::Stacked, 1),
        (ModelKind::PlainGru, 1),
    ] {
        let mut shape = ModelShape::new(kind, 3);
        shape.gcn_depth = depth;
        shape.candidate_bias = true;
        let mut model = Model::init(shape, 4).unwrap();
        randomize(model.params_mut(), &mut rng);
        let windows = uniform(&mut rng, &[2, 3, 4], 0.0, 1.0);
        let targets = uniform(&mut rng, &[2, 4], 0.0, 1.0);
        let mut flat = Vec::new();
        model.params().visit(&mut |_, t| flat.push(t.clone()));

        let err = check_gradients(
            |tape: &mut Tape, vars| {
                let mut it = vars.iter().copied();
                let p = model.params().map(&mut |_| it.next().unwrap());
                let pred = model.record(tape, &p, &a_hat, &windows)?;
                let (b, n) = (2, 4);
                let node_major: Vec<f64> = (0..n).flat_map(|j| (0..b).map(move |i| (i, j))).map(|(i, j)| targets.at(i, j)).collect();
                let t = tape.constant(Tensor::matrix(n * b, 1, node_major)?);
                tape.mse(pred, t)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{kind} depth {depth}: {err}");

        // the convenience entry point agrees with the tape
        let (loss, grads) = model.loss_and_grads(&a_hat, &windows, &targets).unwrap();
        let pred = model.predict(&a_hat, &windows).unwrap();
        let mse = pred.data().iter().zip(targets.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / 8.0;
        assert!((loss - mse).abs() < 1e-14);
        assert_eq!(grads.num_scalars(), model.params().num_scalars());
    }
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    for kind in ModelKind::ALL {
        let shape = ModelShape::new(kind, 8);
        let a = ModelParams::init(&shape, 42).unwrap();
        assert_eq!(a, ModelParams::init(&shape, 42).unwrap());
        assert_ne!(a, ModelParams::init(&shape, 43).unwrap());
        a.validate().unwrap();
        let mut bound_ok = true;
        a.visit(&mut |name, t| {
            let fan_in = if t.rank() == 2 { t.shape()[0] } else { return };
            bound_ok &= t.data().iter().all(|v| v.abs() <= (1.0 / fan_in as f64).sqrt());
            assert!(!name.is_empty());
        });
        assert!(bound_ok);
    }
    assert!(matches!(Model::init(ModelShape::new(ModelKind::Stgbgru, 0), 1), Err(Error::Contract(_))));
}

#[test]
fn shape_errors_surface() {
    let model = Model::init(ModelShape::new(ModelKind::Stgbgru, 3), 1).unwrap();
    let windows = Tensor::zeros(&[2, 3, 4]);
    assert!(matches!(model.predict(&Tensor::identity(3), &windows), Err(Error::Shape { .. })));
    assert!(matches!(
        model.loss_and_grads(&Tensor::identity(4), &windows, &Tensor::zeros(&[2, 3])),
        Err(Error::Shape { .. })
    ));
    let gcn = GcnParams {
        w0: Tensor::zeros(&[2, 3]),
        w1: Tensor::zeros(&[3, 1]),
        output_activation: Activation::Identity,
    };
    assert!(gcn2_forward(&Tensor::zeros(&[4, 1]), &Tensor::identity(4), &gcn).is_err());
    assert!("lstm".parse::<ModelKind>().is_err());
    assert_eq!("plain-gru".parse::<ModelKind>().unwrap(), ModelKind::PlainGru);
}
