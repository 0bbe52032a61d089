//! Detection-theory and significance statistics on hand-entered counts.

use usvkit::metrics::{d_prime, d_prime_of, paired_t, probit, rates, welch_t, OutcomeTally};
use usvkit::pipeline::{compare_label_runs, LabelRecord};
use usvkit::classifier::CallLabel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // detections, hits, false alarms, misses
    for (name, d, h, f, m) in [("careful", 139, 124, 15, 6), ("trigger-happy", 1470, 78, 1392, 33), ("timid", 40, 38, 2, 90)] {
        let tally = OutcomeTally::new(d, h, f, m)?;
        let r = rates(&tally)?;
        let dp = d_prime_of(&tally)?;
        println!("{name:<14} hit {:.3}  FA {:.3}  d' {:+.3}", r.hit_rate, r.false_alarm_rate, dp.value);
    }

    println!("z(0.975) = {:.6}", probit(0.975)?);
    let perfect = d_prime(1.0, 0.0, Some(40))?;
    println!("d'(1, 0) with n = 40 correction: {:.3} (corrected: {})", perfect.value, perfect.corrected);

    let before = [0.71, 0.64, 0.69, 0.75, 0.66];
    let after = [0.80, 0.73, 0.70, 0.83, 0.74];
    let w = welch_t(&after, &before)?;
    println!("Welch t({:.2}) = {:.3}, p = {:.4}", w.df, w.t, w.p_two_tailed);
    let pairs: Vec<(f64, f64)> = before.iter().copied().zip(after.iter().copied()).collect();
    let p = paired_t(&pairs)?;
    println!("paired t({}) = {:.3}, p = {:.4}", p.df, p.t, p.p_two_tailed);

    // Per-recording accuracy of two labeling runs.
    let run = |hits: &[usize]| -> Vec<LabelRecord> {
        hits.iter()
            .enumerate()
            .flat_map(|(r, &k)| {
                (0..10).map(move |i| LabelRecord {
                    recording: format!("rec{r}"),
                    predicted: if i < k { CallLabel::Flat } else { CallLabel::Trill },
                    truth: CallLabel::Flat,
                })
            })
            .collect()
    };
    let cmp = compare_label_runs(&run(&[6, 7, 5, 8]), &run(&[8, 9, 7, 8]))?;
    println!("label runs: pre mean {:.3}, post mean {:.3}", cmp.pre.mean, cmp.post.mean);
    for t in &cmp.tests {
        println!("  {:?} t = {:.3}, p = {:.4}", t.kind, t.t, t.p_two_tailed);
    }
    Ok(())
}
