//! Monte Carlo Bayesian head: how sample count trades noise for cost, and
//! how the predicted variance shows up as aleatoric uncertainty.

use fremure::heads::{bayesian_forward, BayesianConfig, BayesianHead, LabelMode};
use fremure::numcore::{ParamStore, Rng};

fn main() -> fremure::Result<()> {
    let mut rng = Rng::new(11);
    let mut store = ParamStore::new();
    let head = BayesianHead::new(
        &mut store,
        "head",
        BayesianConfig::default(),
        3,
        4,
        &mut rng,
    )?;
    let z = [0.8, -0.3, 0.5];

    println!("{:>6} {:>10} {:>10}", "S", "mean p0", "std p0");
    for s in [1usize, 10, 100, 1000] {
        let h = BayesianHead {
            cfg: BayesianConfig {
                eval_samples: s,
                ..head.cfg
            },
            ..head.clone()
        };
        let p0: Vec<f64> = (0..40)
            .map(|_| {
                bayesian_forward(&h, &store, &z, Some(&mut rng), false, LabelMode::Single)
                    .map(|r| r.0[0])
            })
            .collect::<fremure::Result<_>>()?;
        let m = p0.iter().sum::<f64>() / p0.len() as f64;
        let sd = (p0.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (p0.len() - 1) as f64).sqrt();
        println!("{s:>6} {m:>10.5} {sd:>10.5}");
    }

    println!(
        "\n{:>12} {:>10} {:>10}",
        "log σ² bias", "aleatoric", "epistemic"
    );
    for bias in [-6.0, -2.0, 0.0, 2.0] {
        store
            .get_mut(head.logvar.bias.unwrap())
            .data_mut()
            .fill(bias);
        let (_, u) = bayesian_forward(&head, &store, &z, Some(&mut rng), false, LabelMode::Single)?;
        println!("{bias:>12.1} {:>10.4} {:>10.4}", u.aleatoric, u.epistemic);
    }
    Ok(())
}
