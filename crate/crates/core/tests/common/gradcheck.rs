use tel2veh::fusion::{batch_loss, DynamicLossModel, FusionConfig, FusionModel, SampleSet, SampleSpec};
use tel2veh::flowdata::{make_windows, NormScope, Normalizer, TaskSpec};
use tel2veh::graphspec::GraphSpec;
use tel2veh::numcore::{SeededRng, Tape, Tensor, Var};
use tel2veh::stgnn::{StgnnConfig, StgnnModel};
use tel2veh::synthgen::{generate, SynthConfig};

pub const STEP: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const GRAPH_TOL: f64 = 1e-3;

/// |a - n| / max(|a|, |n|, 1e-3).
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn random(shape: &[usize], rng: &mut SeededRng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

/// Values bounded away from zero so |x| and relu-type kinks are not crossed.
pub fn away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform_in(0.2, 1.5);
        if rng.uniform() < 0.5 {
            -v
        } else {
            v
        }
    })
}

/// Scalarises `f` with a fixed random weighting and returns the worst relative
/// error between every input's gradient and central differences.
pub fn check(inputs: Vec<Tensor>, f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>) -> f64 {
    let weights = |shape: &[usize]| random(shape, &mut SeededRng::new(99), -1.0, 1.0);
    let eval = |vals: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&vars);
        let w = tape.constant(weights(&out.shape()));
        out.mul(w).unwrap().sum().item()
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&vars);
    let w = tape.constant(weights(&out.shape()));
    let loss = out.mul(w).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}


/// Worst relative error per primitive, over every differentiable op.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut rng = SeededRng::new(1);
    let a = random(&[2, 3, 4], &mut rng, -2.0, 2.0);
    let b = random(&[1, 3, 1], &mut rng, -2.0, 2.0);
    out.push(("add", check(vec![a.clone(), b.clone()], |v| v[0].add(v[1]).unwrap())));
    out.push(("sub", check(vec![a.clone(), b.clone()], |v| v[0].sub(v[1]).unwrap())));
    out.push(("mul", check(vec![a.clone(), b.clone()], |v| v[0].mul(v[1]).unwrap())));
    out.push(("scale", check(vec![a.clone()], |v| v[0].scale(-2.5))));
    out.push(("sigmoid", check(vec![a.clone()], |v| v[0].sigmoid())));
    out.push(("tanh", check(vec![a.clone()], |v| v[0].tanh())));
    out.push(("softplus", check(vec![random(&[5], &mut rng, -30.0, 30.0)], |v| v[0].softplus())));
    let k = away_from_zero(&[3, 4], &mut rng);
    out.push(("relu", check(vec![k.clone()], |v| v[0].relu())));
    out.push(("leaky_relu", check(vec![k.clone()], |v| v[0].leaky_relu(0.2))));
    out.push(("abs", check(vec![k], |v| v[0].abs())));

    let mut rng = SeededRng::new(2);
    out.push((
        "matmul",
        check(
            vec![random(&[3, 4], &mut rng, -1.0, 1.0), random(&[4, 2], &mut rng, -1.0, 1.0)],
            |v| v[0].matmul(v[1]).unwrap(),
        ),
    ));
    out.push((
        "matmul batched",
        check(
            vec![random(&[2, 3, 4, 5], &mut rng, -1.0, 1.0), random(&[3, 5, 2], &mut rng, -1.0, 1.0)],
            |v| v[0].matmul(v[1]).unwrap(),
        ),
    ));
    out.push((
        "matmul graph",
        check(
            vec![random(&[4, 4], &mut rng, -1.0, 1.0), random(&[2, 3, 4, 5], &mut rng, -1.0, 1.0)],
            |v| v[0].matmul(v[1]).unwrap(),
        ),
    ));
    for (dilation, k) in [(1, 1), (1, 2), (2, 2), (3, 3)] {
        out.push((
            "dilated conv",
            check(
                vec![random(&[2, 3, 4, 9], &mut rng, -1.0, 1.0), random(&[2, 3, k], &mut rng, -1.0, 1.0)],
                |v| v[0].dilated_causal_conv1d(v[1], dilation).unwrap(),
            ),
        ));
    }

    let mut rng = SeededRng::new(3);
    let a = random(&[2, 3, 4], &mut rng, -2.0, 2.0);
    out.push(("softmax", check(vec![a.clone()], |v| v[0].softmax(1).unwrap())));
    out.push(("softmax last", check(vec![a.clone()], |v| v[0].softmax(2).unwrap())));
    out.push(("sum_axis", check(vec![a.clone()], |v| v[0].sum_axis(1).unwrap())));
    out.push(("mean_axis", check(vec![a.clone()], |v| v[0].mean_axis(2).unwrap())));
    out.push(("sum", check(vec![a.clone()], |v| v[0].sum())));
    out.push(("mean", check(vec![a.clone()], |v| v[0].mean())));
    out.push(("reshape", check(vec![a.clone()], |v| v[0].reshape(&[6, 4]).unwrap())));
    out.push(("permute", check(vec![a.clone()], |v| v[0].permute(&[2, 0, 1]).unwrap())));
    out.push(("slice", check(vec![a.clone()], |v| v[0].slice(2, 1, 2).unwrap())));
    out.push(("tail", check(vec![a.clone()], |v| v[0].tail(2, 3).unwrap())));
    out.push(("index_select", check(vec![a.clone()], |v| v[0].index_select(1, &[2, 0, 2]).unwrap())));
    let b = random(&[2, 1, 4], &mut rng, -2.0, 2.0);
    out.push(("concat", check(vec![a, b], |v| Var::concat(&[v[0], v[1]], 1).unwrap())));

    let mut rng = SeededRng::new(4);
    out.push((
        "gated unit",
        check(
            vec![random(&[2, 3], &mut rng, -1.0, 1.0), random(&[2, 3], &mut rng, -1.0, 1.0)],
            |v| v[0].tanh().mul(v[1].sigmoid()).unwrap().mul(v[0]).unwrap(),
        ),
    ));
    out
}

/// Full two-term stage-2 loss with N=4, M=2, K=2 maps and L=2 layers.
/// Returns (parameters checked, worst relative error, trainable tensor names).
pub fn stage2_graph_errors() -> (usize, f64, Vec<String>) {

    let data = generate(&SynthConfig {
        n_nodes: 4,
        m_cameras: 2,
        days: 2,
        ..SynthConfig::default()
    })
    .unwrap();
    let graph = GraphSpec::build_distance_graph(&data.segments, 500.0, 0.1).unwrap();
    let task = TaskSpec {
        n_gct_nodes: 4,
        n_vehicle_nodes: 2,
        input_steps: 12,
        output_steps: 3,
        interval_minutes: 5,
    };
    let windows: Vec<_> = make_windows(&data.gct, &task, 0..data.gct.n_rows(), true)
        .into_iter()
        .step_by(40)
        .take(3)
        .collect();
    let rows = 0..data.gct.n_rows();
    let gct_norm = Normalizer::fit_scoped(&data.gct, rows.clone(), NormScope::Pooled).unwrap();
    let veh_norm = Normalizer::fit_scoped(&data.veh, rows, NormScope::Pooled).unwrap();
    let extractor = |n: usize, seed: u64| {
        let mut cfg = StgnnConfig::with_defaults(n, 12, 3);
        cfg.channels = 2;
        cfg.layers = 2;
        cfg.dilations = vec![1, 2];
        cfg.head_hidden = 4;
        cfg.embedding_dim = 3;
        let mut m = StgnnModel::new(cfg, &mut SeededRng::new(seed)).unwrap();
        m.freeze();
        m
    };
    let (ge, ve) = (extractor(4, 1), extractor(2, 2));
    let samples = SampleSet::build(&SampleSpec {
        gct: &data.gct,
        veh: &data.veh,
        camera_nodes: &[0, 1],
        windows: &windows,
        gct_norm: &gct_norm,
        veh_norm: &veh_norm,
        graph: &graph,
        extractors: Some((&ge, &ve)),
    })
    .unwrap();
    let width = ge.config().feature_width();
    let mut cfg = FusionConfig::new(2, width, 4, 3);
    cfg.stgnn3.head_hidden = 4;
    cfg.stgnn3.embedding_dim = 3;
    assert_eq!(cfg.stgnn3.layers, 2);
    let mut model = FusionModel::new(cfg, &graph, &[0, 1], (200.0, 80.0), &mut SeededRng::new(3)).unwrap();
    // a visible lambda so the second loss term carries gradient
    model.params_mut().get_mut("lambda.theta").unwrap().data_mut()[0] = 0.3;
    let idx: Vec<usize> = (0..samples.len()).collect();

    let loss_at = |m: &FusionModel| {
        let tape = Tape::new();
        let p = m.params().bind(&tape, true);
        batch_loss(m, &tape, &p, &samples, &idx).unwrap().1.total
    };
    let tape = Tape::new();
    let p = model.params().bind(&tape, true);
    let (loss, _) = batch_loss(&model, &tape, &p, &samples, &idx).unwrap();
    let grads = p.gradients(&tape.backward(loss).unwrap());
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, g) in names.iter().zip(&grads) {
        for i in 0..g.len() {
            let mut plus = model.clone();
            plus.params_mut().get_mut(name).unwrap().data_mut()[i] += STEP;
            let mut minus = model.clone();
            minus.params_mut().get_mut(name).unwrap().data_mut()[i] -= STEP;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[i], numeric));
            checked += 1;
        }
    }
    (checked, worst, names)
}
