//! Central finite-difference gradient checks for single ops and for whole
//! models.

use adarl_core::encoder::{AttentionMode, Encoder, EncoderConfig};
use adarl_core::policy::{Agent, AgentSpec};
use adarl_core::ppo::{minibatch_loss, PpoConfig, Transition};
use adarl_core::tensor::{Graph, ParamStore, Tensor, Var};
use adarl_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const OP_TOL: f64 = 1e-4;
pub const LOSS_TOL: f64 = 1e-3;
/// Denominator floor for the relative error, so that coordinates whose
/// true gradient is zero are judged on absolute error.
pub const FLOOR: f64 = 1e-6;
/// Floor for whole-model losses, per unit of loss magnitude (at least 1).
/// At step 1e-5 the rounding noise of a forward pass through the encoder
/// moves central differences by up to a few 1e-10, so gradients smaller
/// than this are judged on absolute error.
pub const LOSS_FLOOR: f64 = 1e-5;
pub const INSTANCES: usize = 100;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    rel_error_floored(analytic, numeric, FLOOR)
}

pub fn rel_error_floored(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn small_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Values in [-1, 1] kept at least `gap` away from every point in `kinks`.
pub fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x: f64 = rng.random_range(-1.0..1.0);
            if kinks.iter().all(|k| (x - k).abs() > gap) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub seed: u64,
    pub inputs: Inputs,
    pub build: Build,
}

fn case(
    name: &'static str,
    seed: u64,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        seed,
        inputs: Box::new(inputs),
        build: Box::new(build),
    }
}

fn one(rank: usize) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + Copy {
    move |r| {
        let s = small_shape(r, rank);
        vec![rand_tensor(r, &s, -1.0, 1.0)]
    }
}

fn broadcast_pair(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    let shape = small_shape(r, 3);
    vec![rand_tensor(r, &shape, -1.0, 1.0), rand_tensor(r, &shape[1..], -1.0, 1.0)]
}

/// Every differentiable op of the graph.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case(
            "matmul",
            1,
            |r| {
                let (b, m, k, n) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
                vec![rand_tensor(r, &[b, m, k], -1.0, 1.0), rand_tensor(r, &[k, n], -1.0, 1.0)]
            },
            |g, v| g.matmul(v[0], v[1]),
        ),
        case(
            "batched matmul",
            2,
            |r| {
                let (b, m, k, n) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
                vec![rand_tensor(r, &[b, m, k], -1.0, 1.0), rand_tensor(r, &[b, k, n], -1.0, 1.0)]
            },
            |g, v| g.matmul(v[0], v[1]),
        ),
        case("add", 3, broadcast_pair, |g, v| g.add(v[0], v[1])),
        case("sub", 4, broadcast_pair, |g, v| g.sub(v[0], v[1])),
        case("mul", 5, broadcast_pair, |g, v| g.mul(v[0], v[1])),
        case("scale", 6, one(2), |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", 7, one(2), |g, v| g.add_scalar(v[0], 0.3)),
        case("neg", 28, one(2), |g, v| g.neg(v[0])),
        case("tanh", 8, one(2), |g, v| g.tanh(v[0])),
        case("exp", 9, one(2), |g, v| g.exp(v[0])),
        case(
            "log",
            10,
            |r| {
                let s = small_shape(r, 2);
                vec![rand_tensor(r, &s, 0.2, 2.0)]
            },
            |g, v| g.log(v[0]),
        ),
        case(
            "clamp",
            11,
            |r| {
                let s = small_shape(r, 2);
                vec![away_from(r, &s, &[-0.5, 0.5], 1e-3)]
            },
            |g, v| g.clamp(v[0], -0.5, 0.5),
        ),
        case(
            "minimum",
            12,
            |r| {
                let s = small_shape(r, 2);
                let a = rand_tensor(r, &s, -1.0, 1.0);
                let b_data = a
                    .data()
                    .iter()
                    .map(|&x| loop {
                        let y: f64 = r.random_range(-1.0..1.0);
                        if (x - y).abs() > 1e-3 {
                            break y;
                        }
                    })
                    .collect();
                vec![a, Tensor::new(s, b_data).unwrap()]
            },
            |g, v| g.minimum(v[0], v[1]),
        ),
        case("softmax", 13, one(2), |g, v| g.softmax_last(v[0])),
        case(
            "layer_norm",
            14,
            |r| {
                let mut s = small_shape(r, 2);
                s[1] = r.random_range(3..=6);
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            |g, v| g.layer_norm_last(v[0], 1e-9),
        ),
        case("sum", 15, one(3), |g, v| g.sum(v[0])),
        case("mean", 16, one(3), |g, v| g.mean(v[0])),
        case("sum_axis", 17, one(3), |g, v| g.sum_axis(v[0], 1)),
        case("mean_axis", 18, one(3), |g, v| g.mean_axis(v[0], 0)),
        case("transpose", 19, one(3), |g, v| g.transpose(v[0])),
        case("swap_axes", 20, one(3), |g, v| g.swap_axes(v[0], 0, 2)),
        case("reshape", 21, one(3), |g, v| {
            let n = g.value(v[0]).len();
            g.reshape(v[0], &[n])
        }),
        case(
            "slice",
            22,
            |r| {
                let mut s = small_shape(r, 3);
                s[1] = r.random_range(2..=5);
                vec![rand_tensor(r, &s, -1.0, 1.0)]
            },
            |g, v| {
                let len = g.shape(v[0])[1];
                g.slice(v[0], 1, 1, len - 1)
            },
        ),
        case(
            "concat",
            23,
            |r| {
                let s = small_shape(r, 3);
                let mut s2 = s.clone();
                s2[2] = r.random_range(1..=3);
                vec![rand_tensor(r, &s, -1.0, 1.0), rand_tensor(r, &s2, -1.0, 1.0)]
            },
            |g, v| g.concat(&[v[0], v[1]], 2),
        ),
        case(
            "attention",
            24,
            |r| {
                let (b, tq, tk, d, dv) = (
                    r.random_range(1..3),
                    r.random_range(1..4),
                    r.random_range(1..4),
                    r.random_range(1..4),
                    r.random_range(1..4),
                );
                vec![
                    rand_tensor(r, &[b, tq, d], -1.0, 1.0),
                    rand_tensor(r, &[b, tk, d], -1.0, 1.0),
                    rand_tensor(r, &[b, tk, dv], -1.0, 1.0),
                ]
            },
            |g, v| {
                let d = *g.shape(v[0]).last().unwrap();
                g.attention(v[0], v[1], v[2], 1.0 / (d as f64).sqrt())
            },
        ),
        case("fan-out", 25, one(2), |g, v| {
            let a = g.tanh(v[0])?;
            let b = g.exp(v[0])?;
            let c = g.mul(a, v[0])?;
            g.add(c, b)
        }),
    ]
}

/// Scalar probe: sum(out * weights) with fixed random weights, so every
/// output coordinate contributes with a distinct sensitivity.
fn probe(build: &Build, inputs: &[Tensor], weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng) -> (f64, Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    let shape = g.shape(out).to_vec();
    let w = weights.get_or_insert_with(|| rand_tensor(rng, &shape, -1.0, 1.0));
    let wv = g.constant(w.clone()).unwrap();
    let prod = g.mul(out, wv).unwrap();
    let loss = g.sum(prod).unwrap();
    (g.value(loss).item().unwrap(), g, vars, loss)
}

fn op_instance_error(build: &Build, inputs: Vec<Tensor>, rng: &mut ChaCha8Rng) -> f64 {
    let mut weights = None;
    let (_, g, vars, loss) = probe(build, &inputs, &mut weights, rng);
    let grads = g.gradients(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v);
        for j in 0..inputs[i].len() {
            let mut eval = |delta: f64| {
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] += delta;
                probe(build, &shifted, &mut weights, rng).0
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic.data()[j], numeric));
        }
    }
    worst
}

/// Worst relative error of `case` over `instances` random instances.
pub fn op_error(case: &OpCase, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    (0..instances)
        .map(|_| {
            let inputs = (case.inputs)(&mut rng);
            op_instance_error(&case.build, inputs, &mut rng)
        })
        .fold(0.0, f64::max)
}

/// Worst relative error between the accumulated parameter gradients of
/// `loss` and central differences over every trainable scalar of the model.
pub fn param_error<M: Clone>(
    model: &M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: &dyn Fn(&M, &mut Graph) -> Var,
) -> f64 {
    let mut m = model.clone();
    let mut g = Graph::new();
    let l = loss(&m, &mut g);
    let floor = LOSS_FLOOR * g.value(l).item().unwrap().abs().max(1.0);
    store(&mut m).zero_grad();
    g.backward(l, store(&mut m)).unwrap();
    let analytic: Vec<(bool, Vec<f64>)> = store(&mut m)
        .iter()
        .map(|(_, p)| (p.trainable, p.grad.clone()))
        .collect();
    let eval = |pi: usize, j: usize, delta: f64| {
        let mut m = model.clone();
        let p = store(&mut m).iter_mut().nth(pi).unwrap();
        p.tensor.data_mut()[j] += delta;
        let mut g = Graph::new();
        let l = loss(&m, &mut g);
        g.value(l).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (pi, (trainable, grad)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        for (j, a) in grad.iter().enumerate() {
            let numeric = (eval(pi, j, STEP) - eval(pi, j, -STEP)) / (2.0 * STEP);
            worst = worst.max(rel_error_floored(*a, numeric, floor));
        }
    }
    worst
}

pub fn tiny_encoder_config(mode: AttentionMode) -> EncoderConfig {
    EncoderConfig {
        mode,
        d_model: 8,
        heads: 2,
        layers: 1,
        t_pred: 2,
        d_s: 8,
        dropout: 0.0,
        input_scale: 10.0,
    }
}

pub fn tiny_agent(mode: AttentionMode, rng: &mut ChaCha8Rng) -> Agent {
    let spec = AgentSpec {
        encoder: tiny_encoder_config(mode),
        intervals: vec![1, 5, 20],
        lookback: 4,
        n_features: 4,
    };
    let mut agent = Agent::new(spec, rng).unwrap();
    // Move every parameter off its initial value so biases and gains take
    // part with generic values.
    for p in agent.store.iter_mut() {
        for x in p.tensor.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    agent
}

/// Normalized window-like input `[B, N=2, tau=4, F=4]`.
fn tiny_batch(rng: &mut ChaCha8Rng, b: usize) -> Tensor {
    rand_tensor(rng, &[b, 2, 4, 4], -0.05, 0.05)
}

fn mode_of(instance: u64) -> AttentionMode {
    if instance % 2 == 0 {
        AttentionMode::Variate
    } else {
        AttentionMode::Temporal
    }
}

fn x_states(batch: &Tensor) -> Vec<Tensor> {
    let per = batch.len() / batch.shape()[0];
    batch
        .data()
        .chunks(per)
        .map(|c| Tensor::new(batch.shape()[1..].to_vec(), c.to_vec()).unwrap())
        .collect()
}

/// Encoder alone: loss = sum(embeddings * W) over a random batch.
pub fn encoder_pipeline_error(instance: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
    let mut store = ParamStore::new();
    let enc = Encoder::new(tiny_encoder_config(mode_of(instance)), 4, 4, &mut store, &mut rng).unwrap();
    for p in store.iter_mut() {
        for x in p.tensor.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    let x = tiny_batch(&mut rng, 2);
    let w = rand_tensor(&mut rng, &[2, 2, 8], -1.0, 1.0);
    let model = (enc, store);
    param_error(&model, |m| &mut m.1, &|m, g| {
        let xv = g.constant(x.clone()).unwrap();
        let out = m.0.forward(g, &m.1, xv, None).unwrap();
        let wv = g.constant(w.clone()).unwrap();
        let p = g.mul(out.embeddings, wv).unwrap();
        g.sum(p).unwrap()
    })
}

/// Joint log-probability of stored actions, weighted and summed.
pub fn joint_log_prob_error(instance: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + instance);
    let agent = tiny_agent(mode_of(instance), &mut rng);
    let b = 2;
    let x = tiny_batch(&mut rng, b);
    let mut onehot = vec![0.0; b * 3];
    for i in 0..b {
        onehot[i * 3 + rng.random_range(0..3)] = 1.0;
    }
    let onehot = Tensor::new(vec![b, 3], onehot).unwrap();
    // Actions drawn the way the policy samples them: mean + sigma * noise.
    let outputs = agent.evaluate(&x_states(&x)).unwrap();
    let raw = Tensor::new(
        vec![b, 2],
        outputs
            .iter()
            .flat_map(|o| o.mean.iter().zip(&o.log_std).map(|(m, ls)| m + ls.exp() * rng.random_range(-2.0..2.0)).collect::<Vec<_>>())
            .collect(),
    )
    .unwrap();
    let w = rand_tensor(&mut rng, &[b], -1.0, 1.0);
    param_error(&agent, |a| &mut a.store, &|a, g| {
        let xv = g.constant(x.clone()).unwrap();
        let vars = a.forward(g, xv, None).unwrap();
        let oh = g.constant(onehot.clone()).unwrap();
        let rv = g.constant(raw.clone()).unwrap();
        let terms = vars.action_terms(g, oh, rv).unwrap();
        let wv = g.constant(w.clone()).unwrap();
        let p = g.mul(terms.log_prob, wv).unwrap();
        g.sum(p).unwrap()
    })
}

/// Complete PPO loss (clipped surrogate, value and entropy terms) on a
/// two-transition minibatch. Old log-probabilities are offset from the
/// current ones so that both clipped and unclipped ratios occur, kept
/// clear of the clip boundaries.
pub fn full_loss_error(instance: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + instance);
    let agent = tiny_agent(mode_of(instance), &mut rng);
    let cfg = PpoConfig::default();
    let b = 2;
    let states: Vec<Tensor> = (0..b)
        .map(|_| rand_tensor(&mut rng, &[2, 4, 4], -0.05, 0.05))
        .collect();
    let outputs = agent.evaluate(&states).unwrap();
    let (lo, hi) = ((1.0 - cfg.clip).ln(), (1.0 + cfg.clip).ln());
    let transitions: Vec<Transition> = states
        .into_iter()
        .zip(outputs)
        .map(|(state, out)| {
            let k = rng.random_range(0..3);
            let raw: Vec<f64> = out
                .mean
                .iter()
                .zip(&out.log_std)
                .map(|(m, ls)| m + ls.exp() * rng.random_range(-2.0..2.0))
                .collect();
            let lp = adarl_core::policy::joint_log_prob(&out, k, &raw);
            let offset = loop {
                let d: f64 = rng.random_range(-0.5..0.5);
                if (d - lo).abs() > 0.02 && (d - hi).abs() > 0.02 {
                    break d;
                }
            };
            Transition {
                state,
                epoch: 0,
                next_epoch: 1,
                interval_index: k,
                interval: [1, 5, 20][k],
                best_interval: 1,
                raw,
                weights: vec![0.5, 0.5],
                reward: 0.0,
                raw_return: 0.0,
                cost_factor: 1.0,
                log_prob: lp - offset,
                value: out.value,
                values: out.values.clone(),
                probs: out.probs.clone(),
                done: false,
            }
        })
        .collect();
    let adv: Vec<f64> = (0..b).map(|_| rng.random_range(-1.5..1.5)).collect();
    let ret: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch: Vec<&Transition> = transitions.iter().collect();
    param_error(&agent, |a| &mut a.store, &|a, g| {
        minibatch_loss(g, a, &cfg, &batch, &adv, &ret, None).unwrap().total
    })
}
