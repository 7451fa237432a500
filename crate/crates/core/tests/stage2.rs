//! Stage-2 forward laws and training invariants.

use tel2veh::flowdata::{make_windows, CameraMapping, FlowKind, NormScope, Normalizer, TaskSpec};
use tel2veh::fusion::{
    stage2_forward, train_stage2, DynamicLossModel, FusionBatch, FusionConfig, FusionModel, SampleSet, SampleSpec,
};
use tel2veh::graphspec::GraphSpec;
use tel2veh::numcore::{SeededRng, Tensor};
use tel2veh::stgnn::{FeatureMap, StgnnConfig, StgnnModel, TrainConfig};
use tel2veh::synthgen::{generate, SynthConfig};

fn grid_graph(n: usize) -> GraphSpec {
    let data = generate(&SynthConfig {
        n_nodes: n,
        m_cameras: 2,
        days: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    GraphSpec::build_distance_graph(&data.segments, 500.0, 0.1).unwrap()
}

fn batch(graph: &GraphSpec, m: usize, k: usize, d: usize, seed: u64) -> FusionBatch {
    let n = graph.n_nodes();
    let mut rng = SeededRng::new(seed);
    let cams: Vec<String> = (1..=m).map(|i| format!("Cam{i}")).collect();
    let mapping = CameraMapping::new(
        cams.iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), graph.node_ids()[i * 5 % n].clone()))
            .collect(),
    )
    .unwrap();
    FusionBatch {
        gct_features: FeatureMap {
            values: Tensor::from_fn(&[k, n, d], |_| rng.normal()),
            source: FlowKind::Gct,
            node_ids: graph.node_ids().to_vec(),
        },
        vehicle_features: FeatureMap {
            values: Tensor::from_fn(&[k, m, d], |_| rng.normal()),
            source: FlowKind::Vehicle,
            node_ids: cams,
        },
        graph: graph.clone(),
        camera_mapping: mapping,
    }
}

fn model(graph: &GraphSpec, batch: &FusionBatch, k: usize, d: usize, out: usize) -> FusionModel {
    let cams = batch.camera_nodes().unwrap();
    FusionModel::new(
        FusionConfig::new(k, d, graph.n_nodes(), out),
        graph,
        &cams,
        (0.0, 1.0),
        &mut SeededRng::new(5),
    )
    .unwrap()
}

#[test]
fn full_size_output_shape() {
    let graph = grid_graph(49);
    let b = batch(&graph, 9, 4, 3, 1);
    let pred = stage2_forward(&b, &model(&graph, &b, 4, 3, 12)).unwrap();
    assert_eq!(pred.combined.shape(), &[49, 12]);
    assert_eq!(pred.with_cameras.shape(), &[9, 12]);
    assert_eq!(pred.without_cameras.shape(), &[40, 12]);
}

#[test]
fn zero_output_head_gives_zero_predictions() {
    let graph = grid_graph(6);
    let b = batch(&graph, 2, 2, 3, 2);
    let mut m = model(&graph, &b, 2, 3, 4);
    for name in ["stgnn3.head2.w", "stgnn3.head2.b"] {
        m.params_mut().get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let pred = stage2_forward(&b, &m).unwrap();
    assert!(pred.combined.data().iter().all(|&v| v == 0.0));
}

#[test]
fn consistent_node_permutation_permutes_predictions() {
    let graph = grid_graph(6);
    let b = batch(&graph, 2, 2, 3, 3);
    let m = model(&graph, &b, 2, 3, 4);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut pb = b.clone();
    pb.graph = graph.permute(&perm);
    let (k, n, d) = (2, 6, 3);
    let old = b.gct_features.values.data();
    pb.gct_features.values = Tensor::from_fn(&[k, n, d], |i| {
        let (c, rest) = (i / (n * d), i % (n * d));
        old[c * n * d + perm[rest / d] * d + rest % d]
    });
    pb.gct_features.node_ids = perm.iter().map(|&p| graph.node_ids()[p].clone()).collect();
    let base = stage2_forward(&b, &m).unwrap().combined;
    let moved = stage2_forward(&pb, &m.permute_nodes(&perm).unwrap()).unwrap().combined;
    for (i, &p) in perm.iter().enumerate() {
        for t in 0..4 {
            let (a, e) = (moved.data()[i * 4 + t], base.data()[p * 4 + t]);
            assert!((a - e).abs() < 1e-9, "node {i} step {t}: {a} vs {e}");
        }
    }
}

#[test]
fn empty_camera_set_is_rejected() {
    let graph = grid_graph(6);
    let mut b = batch(&graph, 2, 2, 3, 4);
    let m = model(&graph, &b, 2, 3, 4);
    b.vehicle_features.values = Tensor::zeros(&[2, 0, 3]);
    b.vehicle_features.node_ids.clear();
    assert!(stage2_forward(&b, &m).is_err());
}

struct Small {
    gct_ext: StgnnModel,
    veh_ext: StgnnModel,
    graph: GraphSpec,
    train: SampleSet,
    val: SampleSet,
    scale: (f64, f64),
}

fn small_problem() -> Small {
    let data = generate(&SynthConfig {
        n_nodes: 5,
        m_cameras: 2,
        days: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let graph = GraphSpec::build_distance_graph(&data.segments, 500.0, 0.1).unwrap();
    let task = TaskSpec {
        n_gct_nodes: 5,
        n_vehicle_nodes: 2,
        input_steps: 12,
        output_steps: 3,
        interval_minutes: 5,
    };
    let rows = data.gct.n_rows();
    let train_rows = 0..2 * rows / 3;
    let all = make_windows(&data.gct, &task, 0..rows, true);
    let (train_w, val_w): (Vec<_>, Vec<_>) = all.into_iter().partition(|w| w.rows().end <= train_rows.end);
    let gct_norm = Normalizer::fit_scoped(&data.gct, train_rows.clone(), NormScope::Pooled).unwrap();
    let veh_norm = Normalizer::fit_scoped(&data.veh, train_rows, NormScope::Pooled).unwrap();
    let ext = |n: usize, seed: u64| {
        let mut cfg = StgnnConfig::with_defaults(n, 12, 3);
        cfg.channels = 4;
        cfg.head_hidden = 8;
        let mut m = StgnnModel::new(cfg, &mut SeededRng::new(seed)).unwrap();
        m.freeze();
        m
    };
    let (gct_ext, veh_ext) = (ext(5, 1), ext(2, 2));
    let set = |w: &[_]| {
        SampleSet::build(&SampleSpec {
            gct: &data.gct,
            veh: &data.veh,
            camera_nodes: &[0, 1],
            windows: w,
            gct_norm: &gct_norm,
            veh_norm: &veh_norm,
            graph: &graph,
            extractors: Some((&gct_ext, &veh_ext)),
        })
        .unwrap()
    };
    let train = set(&train_w);
    let val = set(&val_w);
    Small {
        scale: (veh_norm.per_node_mean[0], veh_norm.per_node_std[0]),
        gct_ext,
        veh_ext,
        graph,
        train,
        val,
    }
}

#[test]
fn training_keeps_loss_identity_lambda_sign_and_frozen_extractors() {
    let s = small_problem();
    let cfg = FusionConfig::new(4, 3, 5, 3);
    let tc = TrainConfig {
        max_epochs: 2,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let before = (s.gct_ext.checksum(), s.veh_ext.checksum());
    let run = || train_stage2(&s.gct_ext, &s.veh_ext, &s.graph, &s.train, &s.val, &cfg, s.scale, &tc, 7).unwrap();
    let (m1, log1) = run();
    assert_eq!((s.gct_ext.checksum(), s.veh_ext.checksum()), before);
    assert!(!log1.steps.is_empty());
    let first = log1.steps[0];
    assert!((first.lambda - 1e-4).abs() < 1e-9, "initial lambda {}", first.lambda);
    for b in &log1.steps {
        assert!(b.is_consistent(), "{b:?}");
        assert_eq!(b.total.to_bits(), (b.loss_with + b.lambda * b.loss_without).to_bits());
        assert!(b.lambda >= 0.0);
    }
    let (m2, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(m1.params().checksum(), m2.params().checksum());
}

#[test]
fn unfrozen_extractor_is_rejected() {
    let s = small_problem();
    let live = StgnnModel::from_params(s.gct_ext.config().clone(), s.gct_ext.params().clone()).unwrap();
    let cfg = FusionConfig::new(4, 3, 5, 3);
    let tc = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    assert!(train_stage2(&live, &s.veh_ext, &s.graph, &s.train, &s.val, &cfg, s.scale, &tc, 0).is_err());
}
