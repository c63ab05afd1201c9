// Generates a Zipf-skewed open-loop request trace and prints plan popularity.

use std::time::Duration;

use stageserve::bench::{zipf_weights, LoadProfile, RequestTrace};

fn main() {
    let profile = LoadProfile {
        rate: 500.0,
        duration: Duration::from_secs(2),
        ..LoadProfile::default()
    };
    let plans = 10;
    let trace = RequestTrace::generate(&profile, plans, 1);
    let mut hits = vec![0usize; plans];
    for r in &trace.requests {
        hits[r.plan] += 1;
    }
    let weights = zipf_weights(plans, profile.alpha);
    println!(
        "{} requests, {:.1} records each on average",
        trace.requests.len(),
        profile.mean_records()
    );
    for (i, (h, w)) in hits.iter().zip(&weights).enumerate() {
        println!(
            "plan {i}: {h:>4} requests ({:.3} observed, {w:.3} expected)",
            *h as f64 / trace.requests.len() as f64
        );
    }
}
