//! Counts distinct ReLU activation patterns over probe sets for networks of
//! growing width, the expressivity proxy used by the architecture search.

use metantk::net::{init_params, Activation, NetworkSpec};
use metantk::regions::{count_linear_regions, sample_probes, ProbeGen};

fn main() -> metantk::Result<()> {
    let probes = sample_probes(2, 512, ProbeGen::UniformCube, 0)?;
    println!("hidden widths    regions (of {} probes, 3 seed average)", probes.inputs.rows());
    for widths in [vec![2], vec![4], vec![8, 8], vec![16, 16]] {
        let spec = NetworkSpec::new(2, widths.clone(), 1, Activation::ReLU, 1.5, 0.2)?;
        let mut acc = 0.0;
        for seed in 0..3 {
            let params = init_params(&spec, seed);
            acc += count_linear_regions(&spec, &params, &probes)? as f64;
        }
        println!("{widths:?}    {:.1}", acc / 3.0);
    }
    Ok(())
}
