//! Reverse-mode gradients of a small two-layer network against central
//! finite differences.

use noisequant::{Graph, Tensor};
use noisequant::autodiff::Var;

const H: f64 = 1e-6;

struct Net {
    x: Tensor,
    target: Tensor,
    params: Vec<Tensor>,
}

fn fixture() -> Net {
    let vals = |n: usize, k: f64| (0..n).map(|i| ((i as f64 + 1.0) * k).sin() * 0.7).collect::<Vec<_>>();
    Net {
        x: Tensor::new(vec![4, 3], vals(12, 1.3)).unwrap(),
        target: Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.3, 0.7, 0.5, 0.5]).unwrap(),
        params: vec![
            Tensor::new(vec![3, 5], vals(15, 0.7)).unwrap(),
            Tensor::vector(vals(5, 2.1)),
            Tensor::new(vec![5, 2], vals(10, 0.4)).unwrap(),
            Tensor::vector(vals(2, 3.3)),
        ],
    }
}

/// Softplus hidden layer, softmax output, cross-entropy against soft targets.
fn record(g: &mut Graph, net: &Net) -> (Var, Vec<Var>) {
    let x = g.constant(net.x.clone());
    let p: Vec<Var> = net.params.iter().map(|t| g.param(t.clone())).collect();
    let h = g.matmul(x, p[0]).unwrap();
    let h = g.add_bias(h, p[1]).unwrap();
    let h = g.softplus(h);
    let o = g.matmul(h, p[2]).unwrap();
    let o = g.add_bias(o, p[3]).unwrap();
    let s = g.softmax_rows(o).unwrap();
    let ls = g.log(s).unwrap();
    let t = g.constant(net.target.clone());
    let prod = g.mul(ls, t).unwrap();
    let total = g.mean(prod);
    (g.neg(total), p)
}

fn loss(net: &Net) -> f64 {
    let mut g = Graph::new();
    let (l, _) = record(&mut g, net);
    g.value(l).item()
}

#[test]
fn two_layer_network_matches_finite_differences() {
    let mut net = fixture();
    let mut g = Graph::new();
    let (l, p) = record(&mut g, &net);
    g.backward(l).unwrap();
    let analytic: Vec<Tensor> = p.iter().map(|&v| g.grad_or_zero(v)).collect();

    let mut checked = 0;
    for k in 0..net.params.len() {
        for i in 0..net.params[k].numel() {
            let orig = net.params[k].data()[i];
            net.params[k].data_mut()[i] = orig + H;
            let up = loss(&net);
            net.params[k].data_mut()[i] = orig - H;
            let down = loss(&net);
            net.params[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * H);
            let a = analytic[k].data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
            assert!(rel <= 1e-5, "param {k}[{i}]: analytic {a} vs fd {fd}");
            checked += 1;
        }
    }
    assert_eq!(checked, 15 + 5 + 10 + 2);
}

#[test]
fn backward_accumulates_into_existing_gradients() {
    let net = fixture();
    let mut g = Graph::new();
    let (l, p) = record(&mut g, &net);
    g.backward(l).unwrap();
    let once: Vec<Tensor> = p.iter().map(|&v| g.grad_or_zero(v)).collect();
    g.backward(l).unwrap();
    for (k, &v) in p.iter().enumerate() {
        let twice = g.grad_or_zero(v);
        for (a, b) in twice.data().iter().zip(once[k].data()) {
            assert!((a - 2.0 * b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }
    g.zero_grad();
    assert!(p.iter().all(|&v| g.grad(v).is_none()));
}
