//! Runs the training-free architecture search on a toy cell space and prints
//! the pruning audit for the first round plus the final single-path cell.

use metantk::nas::{self, KernelScoreConfig, SearchConfig};
use metantk::regions::{sample_probes, ProbeGen};
use metantk::tasks::{gen_tasks, TaskBatchConfig, TaskFamily};

fn main() -> metantk::Result<()> {
    let supernet = nas::build_supernet(&nas::SuperNetConfig {
        num_cells: 1,
        nodes_per_cell: 2,
        width: 12,
        input_dim: 3,
        output_dim: 2,
        ops: nas::OperatorKind::ALL.to_vec(),
    })?;
    let tasks = gen_tasks(&TaskBatchConfig {
        num_tasks: 2,
        query_size: 4,
        support_size: 4,
        input_dim: 3,
        output_dim: 2,
        family: TaskFamily::GaussianBlobs { classes: 2, spread: 0.25 },
        seed: 5,
        normalize_inputs: true,
    })?;
    let config = SearchConfig {
        kernel: KernelScoreConfig::default_with_seed(11),
        probes: sample_probes(3, 256, ProbeGen::UniformCube, 0)?,
    };

    println!(
        "supernet: {} edges, {} alive operators",
        supernet.edges.len(),
        supernet.alive_ops()
    );
    let (arch, audit) = nas::search(&supernet, &tasks, &config)?;
    println!("\nround 0 audit (delta_C, delta_R, rank sum, pruned):");
    for row in audit.iter().filter(|r| r.round == 0) {
        println!(
            "  {} {:11} dC {:9.3} dR {:6.2} s {:3} {}",
            row.edge,
            row.kind.name(),
            row.delta_c,
            row.delta_r,
            row.s,
            if row.pruned { "pruned" } else { "" }
        );
    }
    let rounds = audit.iter().map(|r| r.round).max().unwrap() + 1;
    println!("\nsearch finished in {rounds} rounds; final architecture:\n{}", arch.to_text());
    Ok(())
}
