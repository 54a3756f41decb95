mod common;

use casgnn::cascade::GuidancePair;
use casgnn::graph::{
    aggregate_messages, build_nodes, compute_edges, default_scales, gru_update, guidance_attention, run_gr, GrConfig,
    GrParams, GraphState, GraphTopology, NodeTag, Readout,
};
use casgnn::tensor::gradcheck::{check_params, CheckConfig};
use casgnn::tensor::{ParamStore, Shape, Tape, Tensor, Var};
use casgnn::{Error, Modality};
use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(cin: usize, c: usize, scales: Vec<usize>, t: usize, seed: u64) -> (ParamStore<f64>, GrParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let config = GrConfig {
        in_channels: cin,
        node_channels: c,
        scales,
        iterations: t,
    };
    let params = GrParams::new(&mut store, "gr", config, &mut rng).unwrap();
    randomize(&mut store, 0.5, &mut rng);
    (store, params, rng)
}

fn leaves(tape: &mut Tape<f64>, ts: &[T]) -> Vec<Var> {
    ts.iter().map(|t| tape.constant(t.clone())).collect()
}

fn state(nodes: Vec<Var>) -> GraphState {
    GraphState {
        nodes,
        iteration: 0,
        guidance: None,
    }
}

#[test]
fn topology_counts() {
    for n in [1, 2, 3, 5] {
        let t = GraphTopology::new(n).unwrap();
        assert_eq!(t.node_count(), 2 * n);
        assert_eq!(t.edges().len(), 2 * n * (n - 1) + 2 * n, "n = {n}");
        for l in 0..t.node_count() {
            assert_eq!(t.incoming(l).len(), n, "in-degree of node {l}");
            for &ei in t.incoming(l) {
                let e = t.edges()[ei];
                assert_eq!(e.to, l);
                assert!(linked(&t, e.from, e.to));
            }
        }
        let pairs = (0..2 * n).flat_map(|k| (0..2 * n).map(move |l| (k, l)));
        assert_eq!(pairs.filter(|&(k, l)| linked(&t, k, l)).count(), t.edges().len());
    }
    assert!(matches!(GraphTopology::new(0), Err(Error::Config(_))));
    let dup = vec![
        NodeTag {
            modality: Modality::Appearance,
            scale: 0
        };
        2
    ];
    assert!(matches!(GraphTopology::with_nodes(1, dup), Err(Error::Config(_))));
}

#[test]
fn scales_are_clipped_powers_of_two() {
    assert_eq!(default_scales(3, 16), vec![2, 4, 8]);
    assert_eq!(default_scales(4, 5), vec![2, 4, 5, 5]);
}

#[test]
fn constant_features_give_constant_nodes() {
    let (store, params, _) = setup(2, 3, vec![1, 2], 1, 1);
    let feat = Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, c, _, _| [0.7, -0.2][c]);
    let nodes = {
        let mut tape = Tape::new();
        let f = tape.constant(feat.clone());
        let vs = build_nodes(&mut tape, &store, &params, f, Modality::Geometry, (4, 4)).unwrap();
        vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>()
    };
    for (i, node) in nodes.iter().enumerate() {
        let proj = params.projection(NodeTag {
            modality: Modality::Geometry,
            scale: i,
        });
        let (w, b) = (store.get(proj.weight), store.get(proj.bias));
        for o in 0..3 {
            let expect = b.get(0, o, 0, 0) + 0.7 * w.get(o, 0, 0, 0) - 0.2 * w.get(o, 1, 0, 0);
            for y in 0..4 {
                for x in 0..4 {
                    assert!((node.get(0, o, y, x) - expect).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn build_nodes_matches_oracle() {
    let (store, params, mut rng) = setup(3, 4, vec![1, 2, 3], 1, 2);
    let feat = random(Shape::new(1, 3, 6, 5), &mut rng);
    for m in Modality::ALL {
        let mut tape = Tape::new();
        let f = tape.constant(feat.clone());
        let vs = build_nodes(&mut tape, &store, &params, f, m, (6, 5)).unwrap();
        let want = common::build_nodes(&store, &params, &feat, m, (6, 5));
        for (v, w) in vs.iter().zip(&want) {
            assert!(max_diff(tape.value(*v), w) < 1e-9);
        }
    }
    let mut tape = Tape::new();
    let small = tape.constant(random(Shape::new(1, 3, 2, 2), &mut rng));
    let err = build_nodes(&mut tape, &store, &params, small, Modality::Appearance, (2, 2));
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn identical_nodes_have_bias_edges() {
    let (store, params, mut rng) = setup(2, 3, vec![1, 2], 1, 3);
    let topo = GraphTopology::new(2).unwrap();
    let v = random(Shape::new(1, 3, 4, 4), &mut rng);
    let mut tape = Tape::new();
    let nodes = leaves(&mut tape, &vec![v; 4]);
    let edges = compute_edges(&mut tape, &store, &params, &state(nodes), &topo).unwrap();
    let b = store.get(params.edge.bias);
    for &e in &edges {
        let got = tape.value(e);
        let want = Tensor::from_fn(got.shape(), |_, c, _, _| b.get(0, c, 0, 0));
        assert!(max_diff(got, &want) < 1e-12);
    }
}

#[test]
fn edges_match_the_direct_difference_convolution() {
    let (store, params, mut rng) = setup(2, 3, vec![1, 2], 1, 4);
    let topo = GraphTopology::new(2).unwrap();
    let vals: Vec<T> = (0..4).map(|_| random(Shape::new(1, 3, 5, 4), &mut rng)).collect();
    let mut tape = Tape::new();
    let nodes = leaves(&mut tape, &vals);
    let edges = compute_edges(&mut tape, &store, &params, &state(nodes), &topo).unwrap();
    assert_eq!(edges.len(), topo.edges().len());
    for (e, &var) in topo.edges().iter().zip(&edges) {
        let want = edge(&store, &params, &vals[e.from], &vals[e.to]);
        assert!(max_diff(tape.value(var), &want) < 1e-9);
    }
}

#[test]
fn aggregation_matches_oracle_on_random_node_orders() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..10 {
        let (store, params, _) = setup(2, 2, vec![1, 2, 3], 1, 100 + case);
        let mut order: Vec<NodeTag> = GraphTopology::new(3).unwrap().nodes().to_vec();
        order.shuffle(&mut rng);
        let topo = GraphTopology::with_nodes(3, order).unwrap();
        let vals: Vec<T> = (0..6).map(|_| random(Shape::new(1, 2, 4, 4), &mut rng)).collect();
        let mut tape = Tape::new();
        let nodes = leaves(&mut tape, &vals);
        let st = state(nodes);
        let edges = compute_edges(&mut tape, &store, &params, &st, &topo).unwrap();
        let msgs = aggregate_messages(&mut tape, &st, &edges, &topo).unwrap();
        let want = messages(&store, &params, &vals, &topo);
        for (m, w) in msgs.iter().zip(&want) {
            let d = max_diff(tape.value(*m), w);
            assert!(d < 1e-9, "case {case}: {d}");
        }
    }
}

#[test]
fn gru_matches_oracle() {
    let (store, params, mut rng) = setup(2, 3, vec![1], 1, 5);
    let v = random(Shape::new(1, 3, 4, 5), &mut rng);
    let m = random(Shape::new(1, 3, 4, 5), &mut rng);
    let got = eval(|tp| {
        let (vv, mv) = (tp.constant(v.clone()), tp.constant(m.clone()));
        gru_update(tp, &store, &params.gru, vv, mv)
    });
    assert!(max_diff(&got, &gru(&store, &params, &v, &m)) < 1e-9);
}

fn fix_update_gate(store: &mut ParamStore<f64>, params: &GrParams, bias: f64) {
    let (w, b) = (params.gru.update.weight, params.gru.update.bias);
    let (nw, nb) = (store.get(w).shape().numel(), store.get(b).shape().numel());
    store.set_values(w, vec![0.0; nw]).unwrap();
    store.set_values(b, vec![bias; nb]).unwrap();
}

#[test]
fn half_open_update_gate_averages_state_and_candidate() {
    let (mut store, params, mut rng) = setup(2, 3, vec![1], 1, 6);
    fix_update_gate(&mut store, &params, 0.0);
    let v = random(Shape::new(1, 3, 4, 4), &mut rng);
    let m = random(Shape::new(1, 3, 4, 4), &mut rng);
    let got = eval(|tp| {
        let (vv, mv) = (tp.constant(v.clone()), tp.constant(m.clone()));
        gru_update(tp, &store, &params.gru, vv, mv)
    });
    let r = map(&conv_layer(&store, &params.gru.reset, &concat(&[&v, &m])), sigmoid);
    let h = map(
        &conv_layer(
            &store,
            &params.gru.candidate,
            &concat(&[&zip(&r, &v, |a, b| a * b), &m]),
        ),
        f64::tanh,
    );
    let want = zip(&v, &h, |a, b| 0.5 * a + 0.5 * b);
    assert!(max_diff(&got, &want) < 1e-7);
}

#[test]
fn closed_update_gate_keeps_state_exactly() {
    let (mut store, params, mut rng) = setup(2, 3, vec![1], 1, 7);
    fix_update_gate(&mut store, &params, -1000.0);
    let v = random(Shape::new(1, 3, 4, 4), &mut rng);
    let m = random(Shape::new(1, 3, 4, 4), &mut rng);
    let got = eval(|tp| {
        let (vv, mv) = (tp.constant(v.clone()), tp.constant(m.clone()));
        gru_update(tp, &store, &params.gru, vv, mv)
    });
    assert_eq!(got.data(), v.data());
}

#[test]
fn zero_edge_convolution_halves_the_neighbour_sum() {
    let (mut store, params, mut rng) = setup(2, 3, vec![1, 2, 3], 1, 16);
    for id in [params.edge.weight, params.edge.bias] {
        let n = store.get(id).shape().numel();
        store.set_values(id, vec![0.0; n]).unwrap();
    }
    let topo = GraphTopology::new(3).unwrap();
    let vals: Vec<T> = (0..6).map(|_| random(Shape::new(1, 3, 4, 4), &mut rng)).collect();
    let mut tape = Tape::new();
    let nodes = leaves(&mut tape, &vals);
    let st = state(nodes);
    let edges = compute_edges(&mut tape, &store, &params, &st, &topo).unwrap();
    let msgs = aggregate_messages(&mut tape, &st, &edges, &topo).unwrap();
    for (l, m) in msgs.iter().enumerate() {
        let mut sum = Tensor::zeros(vals[l].shape());
        for k in (0..6).filter(|&k| linked(&topo, k, l)) {
            sum = zip(&sum, &vals[k], |a, b| a + b);
        }
        assert!(max_diff(tape.value(*m), &map(&sum, |v| 0.5 * v)) < 1e-7);
    }
}

#[test]
fn closed_update_gate_preserves_initial_nodes_over_all_iterations() {
    let (mut store, params, mut rng) = setup(2, 3, vec![1, 2], 3, 17);
    fix_update_gate(&mut store, &params, -1000.0);
    let topo = GraphTopology::new(2).unwrap();
    let fc = random(Shape::new(1, 2, 4, 4), &mut rng);
    let fd = random(Shape::new(1, 2, 4, 4), &mut rng);
    let mut tape = Tape::new();
    let (c, d) = (tape.constant(fc), tape.constant(fd));
    let init = [
        build_nodes(&mut tape, &store, &params, c, Modality::Appearance, (4, 4)).unwrap(),
        build_nodes(&mut tape, &store, &params, d, Modality::Geometry, (4, 4)).unwrap(),
    ];
    let out = run_gr(&mut tape, &store, &params, &topo, c, d, None).unwrap();
    for (i, tag) in topo.nodes().iter().enumerate() {
        let want = init[tag.modality.index()][tag.scale];
        assert_eq!(tape.value(out.state.nodes[i]).data(), tape.value(want).data());
    }
}

#[test]
fn attention_is_sigmoid_of_channel_means() {
    let g = Tensor::from_fn(
        Shape::new(1, 2, 3, 3),
        |_, c, y, x| if c == 0 { 0.0 } else { (y * 3 + x) as f64 },
    );
    let a = eval(|tp| {
        let v = tp.constant(g.clone());
        guidance_attention(tp, v)
    });
    assert_eq!(a.shape(), Shape::new(1, 2, 1, 1));
    assert_eq!(a.data()[0], 0.5);
    assert!((a.data()[1] - sigmoid(4.0)).abs() < 1e-12);
}

fn run(
    store: &ParamStore<f64>,
    params: &GrParams,
    topo: &GraphTopology,
    fc: &T,
    fd: &T,
    guide: Option<(&T, &T)>,
) -> (T, T, Vec<T>) {
    let mut tape = Tape::new();
    let (c, d) = (tape.constant(fc.clone()), tape.constant(fd.clone()));
    let pair = guide.map(|(a, g)| GuidancePair {
        appearance: tape.constant(a.clone()),
        geometry: tape.constant(g.clone()),
        source_level: 1,
    });
    let out = run_gr(&mut tape, store, params, topo, c, d, pair.as_ref()).unwrap();
    assert_eq!(out.state.iteration, params.config.iterations);
    let nodes = out.state.nodes.iter().map(|&v| tape.value(v).clone()).collect();
    (
        tape.value(out.appearance).clone(),
        tape.value(out.geometry).clone(),
        nodes,
    )
}

#[test]
fn single_scale_single_step_unrolls() {
    let (store, params, mut rng) = setup(2, 2, vec![1], 1, 8);
    let topo = GraphTopology::new(1).unwrap();
    let fc = random(Shape::new(1, 2, 4, 4), &mut rng);
    let fd = random(Shape::new(1, 2, 4, 4), &mut rng);
    let (a, g, _) = run(&store, &params, &topo, &fc, &fd, None);

    // Written out by hand for the two-node graph rgb <-> depth.
    let vc = common::build_nodes(&store, &params, &fc, Modality::Appearance, (4, 4)).remove(0);
    let vd = common::build_nodes(&store, &params, &fd, Modality::Geometry, (4, 4)).remove(0);
    let mc = zip(&map(&edge(&store, &params, &vd, &vc), sigmoid), &vd, |s, v| s * v);
    let md = zip(&map(&edge(&store, &params, &vc, &vd), sigmoid), &vc, |s, v| s * v);
    let want_a = conv_layer(&store, &params.merge[0], &gru(&store, &params, &vc, &mc));
    let want_g = conv_layer(&store, &params.merge[1], &gru(&store, &params, &vd, &md));
    assert!(max_diff(&a, &want_a) < 1e-9);
    assert!(max_diff(&g, &want_g) < 1e-9);
}

#[test]
fn full_module_matches_oracle_with_and_without_guidance() {
    let (store, params, mut rng) = setup(3, 4, vec![1, 2, 4], 3, 9);
    let topo = GraphTopology::new(3).unwrap();
    let fc = random(Shape::new(1, 3, 8, 8), &mut rng);
    let fd = random(Shape::new(1, 3, 8, 8), &mut rng);
    let ga = random(Shape::new(1, 4, 8, 8), &mut rng);
    let gg = random(Shape::new(1, 4, 8, 8), &mut rng);
    for guide in [None, Some((&ga, &gg))] {
        let (a, g, nodes) = run(&store, &params, &topo, &fc, &fd, guide);
        let want = common::run_gr(&store, &params, &topo, &fc, &fd, guide);
        assert_eq!(a.shape(), Shape::new(1, 4, 8, 8));
        assert_eq!(g.shape(), Shape::new(1, 4, 8, 8));
        assert!(max_diff(&a, &want.appearance) < 1e-9);
        assert!(max_diff(&g, &want.geometry) < 1e-9);
        for (n, w) in nodes.iter().zip(&want.nodes) {
            assert!(max_diff(n, w) < 1e-9);
        }
    }
}

#[test]
fn zero_guidance_halves_a_single_update() {
    let (store, params, mut rng) = setup(2, 3, vec![1, 2], 1, 11);
    let topo = GraphTopology::new(2).unwrap();
    let fc = random(Shape::new(1, 2, 4, 4), &mut rng);
    let fd = random(Shape::new(1, 2, 4, 4), &mut rng);
    let zero = Tensor::zeros(Shape::new(1, 3, 4, 4));
    let (_, _, free) = run(&store, &params, &topo, &fc, &fd, None);
    let (_, _, gated) = run(&store, &params, &topo, &fc, &fd, Some((&zero, &zero)));
    for (f, g) in free.iter().zip(&gated) {
        assert!(max_diff(&map(f, |v| 0.5 * v), g) < 1e-12);
    }
}

#[test]
fn node_order_does_not_change_the_result() {
    let (store, params, mut rng) = setup(2, 2, vec![1, 2, 3], 2, 12);
    let fc = random(Shape::new(1, 2, 6, 6), &mut rng);
    let fd = random(Shape::new(1, 2, 6, 6), &mut rng);
    let base = GraphTopology::new(3).unwrap();
    let (a0, g0, n0) = run(&store, &params, &base, &fc, &fd, None);
    for _ in 0..3 {
        let mut order = base.nodes().to_vec();
        order.shuffle(&mut rng);
        let topo = GraphTopology::with_nodes(3, order).unwrap();
        let (a, g, n) = run(&store, &params, &topo, &fc, &fd, None);
        assert!(max_diff(&a, &a0) < 1e-12);
        assert!(max_diff(&g, &g0) < 1e-12);
        for (i, tag) in topo.nodes().iter().enumerate() {
            assert!(max_diff(&n[i], &n0[base.position(*tag).unwrap()]) < 1e-12);
        }
    }
}

#[test]
fn mismatched_topology_is_rejected() {
    let (store, params, mut rng) = setup(2, 2, vec![1, 2], 1, 13);
    let topo = GraphTopology::new(3).unwrap();
    let mut tape = Tape::new();
    let c = tape.constant(random(Shape::new(1, 2, 4, 4), &mut rng));
    let d = tape.constant(random(Shape::new(1, 2, 4, 3), &mut rng));
    assert!(matches!(
        run_gr(&mut tape, &store, &params, &topo, c, c, None),
        Err(Error::Config(_))
    ));
    let topo = GraphTopology::new(2).unwrap();
    assert!(matches!(
        run_gr(&mut tape, &store, &params, &topo, c, d, None),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn readout_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let r = Readout::new(&mut store, "readout", 5, 4, &mut rng).unwrap();
    randomize(&mut store, 0.5, &mut rng);
    let a = random(Shape::new(1, 2, 4, 4), &mut rng);
    let b = random(Shape::new(1, 3, 4, 4), &mut rng);
    let got = eval(|tp| {
        let (va, vb) = (tp.constant(a.clone()), tp.constant(b.clone()));
        r.forward(tp, &store, &[va, vb], (16, 16))
    });
    assert_eq!(got.shape(), Shape::new(1, 1, 16, 16));
    assert!(max_diff(&got, &readout(&store, &r, &[&a, &b], (16, 16))) < 1e-9);
}

#[test]
fn single_precision_module_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::<f32>::new();
    let config = GrConfig {
        in_channels: 2,
        node_channels: 2,
        scales: vec![1, 2],
        iterations: 2,
    };
    let params = GrParams::new(&mut store, "gr", config, &mut rng).unwrap();
    let readout = Readout::new(&mut store, "readout", 4, 2, &mut rng).unwrap();
    let topo = GraphTopology::new(2).unwrap();
    let fc = Tensor::<f32>::uniform(Shape::new(1, 2, 8, 8), -1.0, 1.0, &mut rng);
    let fd = Tensor::<f32>::uniform(Shape::new(1, 2, 8, 8), -1.0, 1.0, &mut rng);
    let checks = check_params(
        &store,
        |tp, s| {
            let (c, d) = (tp.constant(fc.clone()), tp.constant(fd.clone()));
            let out = run_gr(tp, s, &params, &topo, c, d, None)?;
            let logits = readout.forward(tp, s, &[out.appearance, out.geometry], (8, 8))?;
            let sq = tp.mul(logits, logits)?;
            tp.mean(sq)
        },
        CheckConfig::F32,
        &mut rng,
        &mut Tape::new(),
    )
    .unwrap();
    for c in &checks {
        assert!(c.max_rel_err < 1e-3, "{}: {}", c.name, c.max_rel_err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn module_output_shapes_follow_the_features(
        n in 1usize..4, t in 1usize..3, c in 1usize..4, h in 4usize..9, w in 4usize..9, seed in 0u64..1000,
    ) {
        let scales = default_scales(n, h.min(w));
        let (store, params, mut rng) = setup(2, c, scales, t, seed);
        let topo = GraphTopology::new(n).unwrap();
        let fc = random(Shape::new(1, 2, h, w), &mut rng);
        let (a, g, nodes) = run(&store, &params, &topo, &fc, &fc, None);
        prop_assert_eq!(a.shape(), Shape::new(1, c, h, w));
        prop_assert_eq!(g.shape(), Shape::new(1, c, h, w));
        prop_assert_eq!(nodes.len(), 2 * n);
        prop_assert!(a.data().iter().chain(g.data()).all(|v| v.is_finite()));
    }
}
