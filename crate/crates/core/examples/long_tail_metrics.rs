//! R@K against mR@K on a skewed toy problem where a ranker that always
//! prefers the head class looks good on recall and poor on mean recall.

use fremure::metrics::{metrics_report, Candidate, Constraint, ScoredFrame};
use fremure::numcore::Rng;

fn main() -> fremure::Result<()> {
    let classes = 5;
    let freq = [0.6, 0.2, 0.1, 0.07, 0.03];
    let cdf: Vec<f64> = freq
        .iter()
        .scan(0.0, |s, f| {
            *s += f;
            Some(*s)
        })
        .collect();
    let mut rng = Rng::new(9);
    let frames: Vec<ScoredFrame> = (0..200)
        .map(|_| {
            let mut f = ScoredFrame::default();
            for pair in 0..3 {
                let truth = rng.from_cdf(&cdf);
                f.truth.insert((pair, truth));
                for class in 0..classes {
                    // scores follow the prior, plus a small hint of the truth
                    let score = freq[class]
                        + if class == truth { 0.05 } else { 0.0 }
                        + 0.01 * rng.uniform();
                    f.candidates.push(Candidate {
                        pair,
                        class,
                        group: 0,
                        score,
                    });
                }
            }
            f
        })
        .collect();

    for constraint in [Constraint::No, Constraint::With] {
        let report = metrics_report(&frames, &[1, 3, 5], constraint, &freq)?;
        println!("constraint = {constraint}");
        print!("{}", report.to_csv());
        let at = &report.at[0];
        println!(
            "per-class recall @1: {:?}",
            at.per_class
                .iter()
                .map(|r| r.map(|v| (v * 100.0).round() / 100.0))
                .collect::<Vec<_>>()
        );
        println!(
            "head classes {:?}, tail classes {:?}\n",
            at.buckets.head_classes, at.buckets.tail_classes
        );
    }
    Ok(())
}
