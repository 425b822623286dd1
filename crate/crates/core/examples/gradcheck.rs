//! Reverse-mode gradients of a small MLP against central differences.
//!
//! ```text
//! cargo run --release --example gradcheck
//! ```

use hg3nerf::diffcore::{Graph, ParamSet, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mlp_params(rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let mut init = |r, c| Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-0.5..0.5)).collect());
    p.push("w1", init(3, 16));
    p.push("b1", init(1, 16));
    p.push("w2", init(16, 4));
    p.push("b2", init(1, 4));
    p
}

/// Softplus density and sigmoid color heads, squared error against a target.
fn loss(params: &ParamSet, g: &mut Graph, x: &Tensor, y: &Tensor) -> (Vec<hg3nerf::diffcore::Var>, hg3nerf::diffcore::Var) {
    let v = params.bind(g);
    let x = g.constant(x.clone());
    let h = g.matmul(x, v[0]).unwrap();
    let h = g.add(h, v[1]).unwrap();
    let h = g.sin(h).unwrap();
    let o = g.matmul(h, v[2]).unwrap();
    let o = g.add(o, v[3]).unwrap();
    let o = g.softplus(o).unwrap();
    let y = g.constant(y.clone());
    let d = g.sub(o, y).unwrap();
    let d = g.square(d).unwrap();
    (v, g.mean(d).unwrap())
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = mlp_params(&mut rng);
    let x = Tensor::matrix(8, 3, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let y = Tensor::matrix(8, 4, (0..32).map(|_| rng.gen()).collect());

    let mut g = Graph::new();
    let (vars, l) = loss(&params, &mut g, &x, &y);
    g.backward(l).unwrap();
    let grads = params.collect_grads(&g, &vars);
    println!("loss {:.6}, {} parameters, {} tape nodes", g.value(l).item().unwrap(), params.num_values(), g.len());

    let value = |p: &ParamSet| {
        let mut g = Graph::new();
        let (_, l) = loss(p, &mut g, &x, &y);
        g.value(l).item().unwrap()
    };
    let h = 1e-5;
    for (b, block) in params.blocks().iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..block.value.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.blocks_mut()[b].value.data_mut()[k] += h;
            minus.blocks_mut()[b].value.data_mut()[k] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            let a = grads[b][k];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-7));
        }
        println!("{:>3}: max relative error {worst:.2e}", block.name);
    }
}
