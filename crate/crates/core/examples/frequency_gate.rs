//! Class-frequency prior and the frequency-aware feature correction.

use fremure::freqgate::{
    compute_frequencies, frequency_correct_tensor, gate_values, FrequencyGate, DEFAULT_FREQ_EPS,
};
use fremure::numcore::{ParamStore, Rng, Tensor};

fn main() -> fremure::Result<()> {
    let prior = compute_frequencies(&[900, 60, 25, 10, 5, 0], DEFAULT_FREQ_EPS)?;
    println!("{:>6} {:>9} {:>12}", "class", "freq", "log(1/f)");
    for (c, (f, info)) in prior.f.iter().zip(prior.self_information()).enumerate() {
        println!("{c:>6} {f:>9.4} {info:>12.3}");
    }

    let dim = 4;
    let mut rng = Rng::new(7);
    let mut store = ParamStore::new();
    let gate = FrequencyGate::new(&mut store, "gate", prior.num_classes(), dim, &mut rng)?;
    println!(
        "\ninitial gate: {:.4?}",
        gate_values(&prior, &gate, &store)?.data()
    );

    // push every channel towards the normalised branch
    store.get_mut(gate.weight).data_mut().fill(0.1);
    let g = gate_values(&prior, &gate, &store)?;
    println!("tail-weighted gate: {:.4?}", g.data());

    let x = Tensor::new(
        vec![2, dim],
        vec![10.0, 12.0, 8.0, 30.0, -1.0, 0.0, 1.0, 2.0],
    )?;
    let corrected = frequency_correct_tensor(&x, &g)?;
    for (row, out) in x.data().chunks(dim).zip(corrected.data().chunks(dim)) {
        println!("{row:>6.2?} -> {out:>6.3?}");
    }
    Ok(())
}
