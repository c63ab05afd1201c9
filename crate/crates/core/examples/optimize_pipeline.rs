// Builds a two-branch text classifier and shows what each optimizer step did.

use stageserve::optimizer;
use stageserve::prelude::*;

fn main() {
    let store = ObjectStore::new();
    let b = PipelineBuilder::new(&store);
    let tokens = b
        .csv(Schema::single("Text", DataType::Text), ',')
        .unwrap()
        .select("Text")
        .unwrap()
        .tokenize(&TokenizerParams::default())
        .unwrap();
    let chars = NgramParams::new(3, ["the", "ood", "bad", "ovi"].map(String::from).to_vec());
    let words = NgramParams::new(1, ["good", "bad", "movie"].map(String::from).to_vec());
    let c = tokens.char_ngram(&chars).unwrap();
    let w = tokens.word_ngram(&words).unwrap();
    let weights = LinearParams {
        weights: vec![0.2, 1.5, -1.5, 0.1, 2.0, -2.0, 0.3],
        bias: -0.1,
    };
    let graph = c
        .concat(&[&w])
        .unwrap()
        .linear_classifier(&weights)
        .unwrap()
        .graph()
        .clone();
    println!("{} transform nodes", graph.len());

    let (plan, reports) = optimizer::plan_with_reports(&graph, &store).unwrap();
    for r in &reports {
        println!("{} ({} passes)", r.step, r.passes);
        for (rule, site) in &r.applications {
            println!("  {rule} @ {site}");
        }
    }
    print!("{}", plan.dump());
    for s in &plan.bindings {
        println!("{} -> {}", s.logical, s.impl_key);
    }
    println!("engine: {:?}, digest {}", plan.engine_hint, plan.digest.short());
}
