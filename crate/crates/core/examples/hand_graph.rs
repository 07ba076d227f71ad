//! Builds the augmented hand graph, shows each partition strategy and dumps
//! the spatial partition as JSON.
//!
//! `cargo run --example hand_graph`

use pulsar::graph::{build_hand_graph, graph_dump, partition_adjacency, Handedness, PartitionStrategy};

fn main() -> pulsar::Result<()> {
    let graph = build_hand_graph(Handedness::Right);
    graph.validate()?;
    let n = graph.vertex_count();
    println!("{n} vertices, {} edges in total", graph.all_edges().count());
    println!("augmented edges: {:?}", graph.augmented_edges().collect::<Vec<_>>());
    println!("hops from the wrist: {:?}", graph.hop_distance());

    for strategy in [PartitionStrategy::Uniform, PartitionStrategy::Distance, PartitionStrategy::Spatial] {
        let adj = partition_adjacency(&graph, strategy);
        let sums: Vec<f64> = (0..n).map(|r| (0..adj.subset_count()).map(|k| (0..n).map(|c| adj.entry(k, r, c)).sum::<f64>()).sum()).collect();
        println!(
            "{:<9} {} subset(s), support {} pairs, summed row mass {:.1}..{:.1}",
            strategy.tag(),
            adj.subset_count(),
            adj.support().len(),
            sums.iter().cloned().fold(f64::INFINITY, f64::min),
            sums.iter().cloned().fold(0.0, f64::max)
        );
    }
    let adj = partition_adjacency(&graph, PartitionStrategy::Spatial);
    println!("{}", serde_json::to_string_pretty(&graph_dump(&graph, &adj))?);
    Ok(())
}
