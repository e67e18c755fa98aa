//! Mixture head: per-class densities, the variance floor and the
//! frequency-weighted anti-collapse regularizer.

use fremure::freqgate::{compute_frequencies, DEFAULT_FREQ_EPS};
use fremure::heads::{gmm_density, GmmConfig, GmmPlusHead, HeadPass};
use fremure::numcore::{Graph, ParamStore, Rng, Tensor};

fn main() -> fremure::Result<()> {
    let mut rng = Rng::new(5);
    let mut store = ParamStore::new();
    let cfg = GmmConfig::default();
    let head = GmmPlusHead::new(&mut store, "gmm", cfg, 6, 3, &mut rng)?;
    let prior = compute_frequencies(&[800, 150, 12], DEFAULT_FREQ_EPS)?;

    for c in 0..3 {
        let m = head.class_params(&store, c);
        println!(
            "class {c}: means {:.3?} variances {:.3?} weights {:.3?}",
            m.means, m.variances, m.weights
        );
        println!(
            "         density at first mean {:.4}",
            gmm_density(m.means[0], &m)
        );
    }

    let z = Tensor::new(vec![2, 6], rng.normals(12))?;
    let mut g = Graph::new();
    let zv = g.constant(&z);
    let out = head.forward(&mut g, &store, zv, &mut HeadPass::deterministic())?;
    println!("\nlogits {:.3?}", g.value(out.logits));

    let mut g = Graph::new();
    let reg = head.regularizer(&mut g, &store, &prior)?;
    println!("regularizer at init {:.5}", g.scalar(reg));

    // squeeze every component towards the floor
    store.get_mut(head.rho).data_mut().fill(-12.0);
    let mut g = Graph::new();
    let reg = head.regularizer(&mut g, &store, &prior)?;
    let min_var = head
        .variances(&store)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    println!(
        "squeezed: regularizer {:.5}, min σ² {min_var:.6} (floor {})",
        g.scalar(reg),
        cfg.sigma_min
    );
    Ok(())
}
