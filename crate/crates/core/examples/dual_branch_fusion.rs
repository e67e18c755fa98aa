//! One pass of the dual-branch generator over a small clip: head and tail
//! encoders, their gated fusion and the windowed global encoder.

use fremure::dpeg::{ClipLayout, Dpeg, DpegConfig, WindowConfig};
use fremure::freqgate::{compute_frequencies, DEFAULT_FREQ_EPS};
use fremure::numcore::{Graph, ParamStore, Rng, Tensor};

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

fn main() -> fremure::Result<()> {
    let (frames, pairs, input_dim) = (6, 3, 10);
    let keys: Vec<(usize, usize, usize)> = (0..frames)
        .flat_map(|f| (0..pairs).map(move |p| (f, 0, p + 1)))
        .collect();
    let layout = ClipLayout::new(&keys)?;
    let prior = compute_frequencies(&[500, 120, 40, 9, 3], DEFAULT_FREQ_EPS)?;

    let mut rng = Rng::new(3);
    let mut store = ParamStore::new();
    let cfg = DpegConfig {
        input_dim,
        dim: 16,
        heads: 4,
        ffn: 32,
        window: WindowConfig::default(),
        dual_branch: true,
        frequency: true,
    };
    let dpeg = Dpeg::new(&mut store, "dpeg", cfg, prior.num_classes(), &mut rng)?;
    let raw = Tensor::new(
        vec![keys.len(), input_dim],
        rng.normals(keys.len() * input_dim),
    )?;

    let mut g = Graph::new();
    let rv = g.constant(&raw);
    let out = dpeg.forward(&mut g, &store, rv, &layout, &prior)?;
    println!("rows {}  windows {}", layout.rows(), out.windows.len());
    println!("fusion frequencies {:.3?}", dpeg.fusion_frequencies(&prior));
    println!("mean |H_loc| {:.4}", mean_abs(g.value(out.h_loc)));
    if let Some(t) = out.t_loc {
        println!("mean |T_loc| {:.4}", mean_abs(g.value(t)));
    }
    println!("mean |Z_loc| {:.4}", mean_abs(g.value(out.z_loc)));
    println!("embedding shape {:?}", g.shape(out.embedding));
    for (frame, row) in g.value(out.embedding).chunks(16).step_by(pairs).enumerate() {
        println!("frame {frame} pair 0: {:>7.3?}", &row[..4]);
    }
    Ok(())
}
