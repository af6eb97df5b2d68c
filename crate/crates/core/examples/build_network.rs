//! Loads a network file, prints its edges and the free-flow next hops.
//!
//! cargo run --example build_network [path/to/network.json]

use std::path::PathBuf;

use mdp_routing::experiments::{random_network, GeneratorConfig};
use mdp_routing::network::RoadNetwork;

fn main() {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/diamond.json"));
    let net = RoadNetwork::load(&path).expect("network file");
    println!("{} nodes, {} edges", net.n_nodes(), net.n_edges());
    for (j, e) in net.edges().iter().enumerate() {
        println!(
            "  edge {j:>2}: {} -> {}  l(0) = {:.3}  l(0.5) = {:.3}  capacity {}",
            e.source,
            e.target,
            e.latency.value(0.0),
            e.latency.value(0.5),
            e.capacity
        );
    }
    let d = net.n_nodes() - 1;
    println!("hops to node {d}: {:?}", (0..net.n_nodes()).map(|a| net.hop_distance(a, d)).collect::<Vec<_>>());

    // the seeded generator used by the benchmarks
    let bench = random_network(&GeneratorConfig::congestion_benchmark(8), 1).unwrap();
    println!("benchmark network: {} nodes, {} edges (with self-loops)", bench.n_nodes(), bench.n_edges());
}
