//! Builds mixed mini-batches: Hungarian pairing of multi-camera and
//! single-camera pids under the exclusion queue, then camera-spread image
//! selection. Prints each plan in the `plans.tsv` line format.

use std::collections::BTreeSet;

use mixpipe::centroids::recompute_full;
use mixpipe::rng::{stage_rng, Stage};
use mixpipe::sampler::{
    compose_minibatch, multicam_memory, next_pairs, queue_capacity, ExclusionQueue, ImagePools, PairingStrategy,
};
use mixpipe::synth::{generate, SynthSpec};

fn main() -> mixpipe::Result<()> {
    let data = generate(&SynthSpec { num_multicam_pids: 16, num_singlecam_pids: 48, seed: 3, ..SynthSpec::default() })?;
    let (n_p, n_k, iterations) = (4, 4, 6);

    let memory = recompute_full(&data.manifest, &data.features)?;
    let multi = multicam_memory(&data.manifest, &data.features, None)?;
    let pools = ImagePools::from_manifest(&data.manifest, &BTreeSet::new());
    let mut queue = ExclusionQueue::new(queue_capacity(2, iterations, n_p, memory.len()));
    let mut rng = stage_rng(0, Stage::Sampler);

    for t in 0..iterations {
        let step = next_pairs(&multi, &memory, &mut queue, PairingStrategy::Median, n_p, None, &mut rng)?;
        let plan = compose_minibatch(&step.pairs, &pools, n_k, &mut rng)?;
        println!("{}", plan.to_line(t));
        assert!(plan.violations(n_p, n_k, &pools.cameras_per_multi_pid()).is_empty());
    }
    println!("queue holds {} of {} pids", queue.len(), queue.capacity());
    Ok(())
}
