//! The long-tail generator: Zipf marginals, record layout and priors.

use fremure::data::{generate_dataset, zipf_pmf, SyntheticConfig};

fn main() -> fremure::Result<()> {
    let cfg = SyntheticConfig::default();
    let ds = generate_dataset(&cfg, 0)?;
    println!("{} train / {} test records", ds.train.len(), ds.test.len());

    let n = cfg.classes.attention;
    let mut counts = vec![0usize; n];
    for r in &ds.train {
        counts[r.attn] += 1;
    }
    let target = zipf_pmf(n, cfg.zipf_s);
    println!("{:>6} {:>10} {:>10}", "class", "empirical", "zipf");
    for c in 0..n {
        println!(
            "{c:>6} {:>10.4} {:>10.4}",
            counts[c] as f64 / ds.train.len() as f64,
            target[c]
        );
    }
    let first = &ds.train[0];
    println!(
        "\nfirst record: clip {} frame {} pair ({}, {}) attn {} spat {:?} cont {:?}",
        first.clip, first.frame, first.subj, first.obj, first.attn, first.spat, first.cont
    );
    println!("contact prior {:.3?}", ds.priors.contact.f);
    Ok(())
}
