// Scratch: per-class global accuracy diagnosis. Not part of the deliverable.
use hyfem::config::scenario_defaults;
use hyfem::data::{gen_synthetic, partition_hybrid, split_test_per_class};
use hyfem::eval::argmax;
use hyfem::federation::Simulation;
use hyfem::nn::predict;
use hyfem::seeding;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let spec = {
        let mut s = scenario_defaults("paper-4x3").unwrap();
        s.seed = seed;
        s
    };
    let schema = spec.schema().unwrap();
    let all = gen_synthetic(&schema, spec.train_per_class + spec.test_per_class, spec.separation, seeding::derive(seed, 10)).unwrap();
    let (train, test) = split_test_per_class(all, spec.test_per_class);
    let (datasets, plan) = partition_hybrid(&train, &schema, spec.clients, spec.classes_per_client, spec.views_per_client, seeding::derive(seed, 11)).unwrap();
    let mut sim = Simulation::new(schema.clone(), &spec.model_config(), datasets, test.clone(), spec.rounds.clone(), seed, 1).unwrap();
    sim.run().unwrap();

    let mut confusion = vec![vec![0usize; 8]; 8];
    for s in &test {
        let scores = predict(sim.server().extractors(), sim.server().global_head().mlp(), &s.blocks).unwrap();
        confusion[s.label][argmax(&scores)] += 1;
    }
    println!("class owners: {:?}", (0..8).map(|c| plan.class_sets.iter().filter(|cs| cs.contains(&c)).count()).collect::<Vec<_>>());
    for (c, row) in confusion.iter().enumerate() {
        println!("true {c}: {row:?}");
    }
    // Per-client local accuracy per class on own model
    for client in sim.clients() {
        let mut per_class = vec![(0usize, 0usize); 8];
        for s in &test {
            let blocks = client.dataset().view_of(s);
            let scores = predict(client.extractors(), client.head(), &blocks).unwrap();
            per_class[s.label].1 += 1;
            if argmax(&scores) == s.label { per_class[s.label].0 += 1; }
        }
        println!("client {} classes {:?} views {:?}: per-class correct {:?}",
            client.client_id(),
            &plan.class_sets[client.client_id()],
            client.feature_set(),
            per_class.iter().map(|(a, b)| format!("{a}/{b}")).collect::<Vec<_>>());
    }
}
