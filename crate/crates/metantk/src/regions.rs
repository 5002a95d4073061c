//! Linear-region estimate: the number of distinct ReLU sign patterns an
//! untrained network realizes over a fixed probe set. An expressivity proxy
//! for the architecture scores; exact region enumeration is exponential and
//! unnecessary for ranking.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::net::{self, ActivationPattern, Activation, NetworkSpec, ParamVector};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeGen {
    /// Uniform on the cube [-1, 1]^d.
    UniformCube,
    /// Uniform direction on the unit sphere.
    UnitSphere,
}

impl ProbeGen {
    pub fn name(self) -> &'static str {
        match self {
            ProbeGen::UniformCube => "cube",
            ProbeGen::UnitSphere => "sphere",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub inputs: Mat,
    pub seed: u64,
    pub generation: ProbeGen,
}

/// Deterministic probe draw. The stream is row-sequential, so the first P'
/// rows of a larger draw with the same seed are exactly the smaller draw
/// (probe sets nest, which makes region counts monotone under probe growth).
pub fn sample_probes(d: usize, count: usize, generation: ProbeGen, seed: u64) -> Result<ProbeSet> {
    if d == 0 || count == 0 {
        return Err(Error::InvalidConfig("probe sets need d >= 1 and count >= 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut inputs = Mat::zeros(count, d);
    for i in 0..count {
        match generation {
            ProbeGen::UniformCube => {
                for j in 0..d {
                    inputs.set(i, j, rng.uniform(-1.0, 1.0));
                }
            }
            ProbeGen::UnitSphere => loop {
                let row: Vec<f64> = (0..d).map(|_| rng.normal(0.0, 1.0)).collect();
                let norm = crate::mat::norm2(&row);
                if norm > 1e-12 {
                    for (j, v) in row.iter().enumerate() {
                        inputs.set(i, j, v / norm);
                    }
                    break;
                }
            },
        }
    }
    Ok(ProbeSet { inputs, seed, generation })
}

/// Counts distinct patterns.
pub fn count_distinct_patterns(patterns: &[ActivationPattern]) -> usize {
    let mut set = HashSet::with_capacity(patterns.len());
    for p in patterns {
        set.insert(p.clone());
    }
    set.len()
}

/// Number of distinct hidden sign patterns over the probe inputs.
/// Defined for ReLU networks only.
pub fn count_linear_regions(
    spec: &NetworkSpec,
    params: &ParamVector,
    probes: &ProbeSet,
) -> Result<usize> {
    if spec.activation != Activation::ReLU {
        return Err(Error::RegionsUndefined(spec.activation.name()));
    }
    let (_, patterns) = net::forward(spec, params, &probes.inputs, true)?;
    Ok(count_distinct_patterns(&patterns.expect("patterns requested")))
}
