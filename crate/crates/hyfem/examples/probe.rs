// Scratch diagnostics for round-phase dynamics. Not part of the deliverable.

use hyfem::config::scenario_defaults;
use hyfem::data::{gen_synthetic, partition_hybrid, split_test_per_class};
use hyfem::eval;
use hyfem::federation::{
    distribute, embedded_heads, local_update_prox, ClientModelView, LocalAnchors, Simulation,
};
use hyfem::seeding;

fn main() {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(9);
    let h0: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(16);
    let mut spec = scenario_defaults("paper-4x3").unwrap();
    spec.seed = seed;
    spec.global_head_hidden = h0;

    let schema = spec.schema().unwrap();
    let all = gen_synthetic(
        &schema,
        spec.train_per_class + spec.test_per_class,
        spec.separation,
        seeding::derive(seed, 10),
    )
    .unwrap();
    let (train, test) = split_test_per_class(all, spec.test_per_class);
    let (datasets, _) = partition_hybrid(
        &train,
        &schema,
        spec.clients,
        spec.classes_per_client,
        spec.views_per_client,
        seeding::derive(seed, 11),
    )
    .unwrap();

    let mut sim = Simulation::new(
        schema.clone(),
        &spec.model_config(),
        datasets,
        test.clone(),
        spec.rounds.clone(),
        seed,
        1,
    )
    .unwrap();

    // Manual round loop with phase-by-phase evaluation.
    for t in 0..spec.rounds.rounds {
        let lr = sim.config().lr_at(t);
        let weights = sim.config().prox_weights();
        let (q, b) = (sim.config().local_steps, sim.config().batch_size);

        let mut anchors = Vec::new();
        {
            let server = sim.server();
            for client in sim.clients() {
                let head_anchor = server.anchor_head(client.client_id()).unwrap();
                let ext = client
                    .feature_set()
                    .iter()
                    .map(|&d| server.extractor(d).clone())
                    .collect();
                anchors.push(
                    LocalAnchors::new(head_anchor, client.feature_set(), ext, &schema).unwrap(),
                );
            }
        }
        for (client, anchor) in sim.clients_mut().iter_mut().zip(&anchors) {
            local_update_prox(client, anchor, weights, q, b, lr).unwrap();
        }
        let post_local = mean_local(&sim, &test);

        let passes = sim.config().matching_passes;
        {
            let (server, clients, rng) = sim.parts_mut();
            let views: Vec<ClientModelView<'_>> = clients
                .iter()
                .map(|c| ClientModelView {
                    client_id: c.client_id(),
                    feature_set: c.feature_set(),
                    extractors: c.extractors(),
                })
                .collect();
            server.aggregate_extractors(&views).unwrap();
            let heads = embedded_heads(clients, &schema).unwrap();
            server.run_matching(&heads, passes, rng).unwrap();
        }

        let counts: Vec<usize> = sim
            .server()
            .global_head()
            .match_counts()
            .iter()
            .copied()
            .collect();
        let used = counts.iter().filter(|c| **c > 0).count();
        let maxc = counts.iter().max().copied().unwrap_or(0);

        {
            let (server, clients, _) = sim.parts_mut();
            distribute(server, clients, &schema).unwrap();
        }
        let post_dist = mean_local(&sim, &test);
        let global = eval::eval_global(
            sim.server().extractors(),
            sim.server().global_head().mlp(),
            &test,
        )
        .unwrap();
        println!(
            "round {t:2} lr {lr:.5}: local(post-train) {post_local:.4} -> local(post-dist) {post_dist:.4}  global {global:.4}  slots used {used}/{} maxcount {maxc}",
            counts.len()
        );
    }
}

fn mean_local(sim: &Simulation, test: &[hyfem::data::Sample]) -> f64 {
    let mut acc = 0.0;
    for c in sim.clients() {
        acc += eval::eval_local(c.extractors(), c.head(), c.feature_set(), test).unwrap();
    }
    acc / sim.clients().len() as f64
}
