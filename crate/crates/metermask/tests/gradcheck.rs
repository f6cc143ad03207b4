//! Central finite differences as the independent oracle for every autodiff
//! primitive and for a small recurrent composite.

use metermask::graph::{Graph, NodeId};
use metermask::tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

fn close(analytic: f64, fd: f64) -> bool {
    let diff = (analytic - fd).abs();
    diff <= ABS_FLOOR.max(REL_TOL * analytic.abs().max(fd.abs()))
}

/// Evaluate the scalar loss produced by `build` at the given input values.
fn eval_loss(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t)).collect();
    let loss = build(&mut g, &ids);
    g.value(loss).values()[0]
}

/// Compare analytic gradients of `build` against central differences for
/// every element of every input.
fn fd_check(name: &str, inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &ids);
    assert_eq!(g.value(loss).numel(), 1, "{name}: loss must be scalar");
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.adjoint(id)
                .map(|a| a.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= H;
            let fd = (eval_loss(&plus, build) - eval_loss(&minus, build)) / (2.0 * H);
            let a = analytic[i][j];
            assert!(
                close(a, fd),
                "{name}: input {i} element {j}: analytic {a} vs fd {fd}"
            );
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Weighted sum against a fixed constant, reducing any tensor to a scalar
/// without flattening the gradient structure.
fn weighted_sum(g: &mut Graph, x: NodeId, weights: &Tensor) -> NodeId {
    let w = g.constant(weights);
    let prod = g.mul(x, w).unwrap();
    g.sum(prod)
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, vec![3, 2], -1.0, 1.0);
    let w = rand_tensor(&mut rng, vec![2, 2], -1.0, 1.0);
    fd_check("matmul", &[a, b], &|g, ids| {
        let c = g.matmul(ids[0], ids[1]).unwrap();
        weighted_sum(g, c, &w)
    });
}

#[test]
fn add_sub_mul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
    let b = rand_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
    let w = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
    fd_check("add", &[a.clone(), b.clone()], &|g, ids| {
        let c = g.add(ids[0], ids[1]).unwrap();
        weighted_sum(g, c, &w)
    });
    fd_check("sub", &[a.clone(), b.clone()], &|g, ids| {
        let c = g.sub(ids[0], ids[1]).unwrap();
        weighted_sum(g, c, &w)
    });
    fd_check("mul", &[a, b], &|g, ids| {
        let c = g.mul(ids[0], ids[1]).unwrap();
        weighted_sum(g, c, &w)
    });
}

#[test]
fn row_broadcast_add_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    let bias = rand_tensor(&mut rng, vec![4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
    fd_check("add_row", &[a, bias], &|g, ids| {
        let c = g.add(ids[0], ids[1]).unwrap();
        weighted_sum(g, c, &w)
    });
}

#[test]
fn scalar_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, vec![2, 2], -2.0, 2.0);
    let w = rand_tensor(&mut rng, vec![2, 2], -1.0, 1.0);
    fd_check("mul_scalar", &[a.clone()], &|g, ids| {
        let c = g.mul_scalar(ids[0], -1.7);
        weighted_sum(g, c, &w)
    });
    fd_check("add_scalar", &[a], &|g, ids| {
        let c = g.add_scalar(ids[0], 0.9);
        weighted_sum(g, c, &w)
    });
}

#[test]
fn activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, vec![2, 3], -2.0, 2.0);
    let w = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
    fd_check("sigmoid", &[a.clone()], &|g, ids| {
        let c = g.sigmoid(ids[0]);
        weighted_sum(g, c, &w)
    });
    fd_check("tanh", &[a.clone()], &|g, ids| {
        let c = g.tanh(ids[0]);
        weighted_sum(g, c, &w)
    });
    fd_check("square", &[a], &|g, ids| {
        let c = g.square(ids[0]);
        weighted_sum(g, c, &w)
    });
}

#[test]
fn log_and_clamp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // log on a safely positive domain
    let a = rand_tensor(&mut rng, vec![2, 3], 0.2, 3.0);
    let w = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
    fd_check("log", &[a], &|g, ids| {
        let c = g.log(ids[0]).unwrap();
        weighted_sum(g, c, &w)
    });
    // clamp checked strictly inside and strictly outside the band so the
    // finite difference never straddles the kink
    let b = Tensor::new(vec![4], vec![0.3, 0.7, -0.5, 1.5]).unwrap();
    let wb = Tensor::new(vec![4], vec![0.9, -1.1, 0.4, 0.8]).unwrap();
    fd_check("clamp", &[b], &|g, ids| {
        let c = g.clamp(ids[0], 0.0, 1.0);
        let w = g.constant(&wb);
        let prod = g.mul(c, w).unwrap();
        g.sum(prod)
    });
}

#[test]
fn reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&mut rng, vec![3, 2], -1.0, 1.0);
    fd_check("sum", &[a.clone()], &|g, ids| {
        let s = g.sum(ids[0]);
        g.mul_scalar(s, 1.3)
    });
    fd_check("mean", &[a], &|g, ids| {
        let m = g.mean(ids[0]);
        g.mul_scalar(m, -0.7)
    });
}

#[test]
fn concat_and_slice_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&mut rng, vec![2, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
    let w = rand_tensor(&mut rng, vec![2, 5], -1.0, 1.0);
    fd_check("concat", &[a.clone(), b.clone()], &|g, ids| {
        let c = g.concat_cols(&[ids[0], ids[1]]).unwrap();
        weighted_sum(g, c, &w)
    });
    let ws = rand_tensor(&mut rng, vec![2, 2], -1.0, 1.0);
    fd_check("slice", &[b], &|g, ids| {
        let c = g.slice_cols(ids[0], 1, 2).unwrap();
        weighted_sum(g, c, &ws)
    });
}

#[test]
fn lstm_composite_gradient() {
    // One LSTM layer driven through a scalar loss: gradients of every
    // parameter tensor against finite differences.
    use metermask::lstm::{init_params, stack_forward, HeadKind, LstmStackConfig};

    let cfg = LstmStackConfig::new(1, 4, 3, HeadKind::SigmoidScalar);
    let params = init_params(&cfg, 42);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seq: Vec<Tensor> = (0..4)
        .map(|_| rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0))
        .collect();

    let tensors: Vec<Tensor> = params.tensors.iter().map(|t| t.value.detached()).collect();
    let seq_ref = seq.clone();
    let cfg_ref = cfg.clone();
    let build = move |g: &mut Graph, ids: &[NodeId]| -> NodeId {
        let bound = metermask::lstm::BoundParams::from_ids(ids);
        let inputs: Vec<NodeId> = seq_ref.iter().map(|t| g.constant(t)).collect();
        let outs = stack_forward(g, &bound, &cfg_ref, &inputs).unwrap();
        let cat = g.concat_cols(&outs).unwrap();
        let sq = g.square(cat);
        g.mean(sq)
    };
    fd_check("lstm", &tensors, &build);
}
