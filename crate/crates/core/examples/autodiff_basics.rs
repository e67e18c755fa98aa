//! Tape autodiff, a finite-difference check and a few Adam steps on a
//! tiny gated regression.

use fremure::numcore::{finite_diff_check, AdamConfig, AdamState, Graph, ParamStore, Rng, Tensor};

fn main() -> fremure::Result<()> {
    let mut rng = Rng::new(1);
    let x = Tensor::new(vec![8, 3], rng.normals(24))?;
    let target: Vec<f64> = x.data().chunks(3).map(|r| r[0] - 0.5 * r[2]).collect();
    let y = Tensor::new(vec![8, 1], target)?;

    let mut store = ParamStore::new();
    let w = store.insert_uniform("w", &[3, 1], 0.5, &mut rng)?;
    let gate = store.insert_const("gate", &[1, 1], 0.0)?;

    let loss = |g: &mut Graph, store: &ParamStore| -> fremure::Result<_> {
        let xv = g.constant(&x);
        let yv = g.constant(&y);
        let wv = g.param(store, w);
        let gv = g.param(store, gate);
        let s = g.sigmoid(gv);
        let pred = g.matmul(xv, wv)?;
        let gated = g.matmul(pred, s)?;
        let err = g.sub(gated, yv)?;
        let sq = g.mul(err, err)?;
        Ok(g.mean(sq))
    };

    let rel = finite_diff_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            let s = g.sigmoid(sq);
            Ok(g.sum(s))
        },
        &Tensor::new(vec![4], rng.normals(4))?,
        1e-5,
    )?;
    println!("sum(sigmoid(x²)) gradient check: max rel error {rel:.2e}");

    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        },
    );
    for step in 0..=200 {
        let mut g = Graph::new();
        let l = loss(&mut g, &store)?;
        if step % 50 == 0 {
            println!("step {step:>3}  loss {:.6}", g.scalar(l));
        }
        g.backward(l)?;
        store.zero_grads();
        store.absorb_grads(&g)?;
        adam.step(&mut store)?;
    }
    println!("w = {:?}", store.get(w).data());
    Ok(())
}
