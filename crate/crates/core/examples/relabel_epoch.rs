//! One refinement epoch on raw features: junk removal, relabelling of
//! mislabelled images and merging of fragmented identities, scored against
//! the generator's ground truth.

use std::collections::BTreeMap;

use mixpipe::centroids::recompute_full;
use mixpipe::config::PipelineConfig;
use mixpipe::relabel::run_relabeling_epoch;
use mixpipe::rng::{stage_rng, Stage};
use mixpipe::synth::{generate, score_partition, SynthSpec};
use mixpipe::{DatasetManifest, Pid, SampleId, Source};

fn main() -> mixpipe::Result<()> {
    let spec = SynthSpec {
        num_multicam_pids: 8,
        num_singlecam_pids: 60,
        intra_noise_sigma: 0.03,
        camera_bias_norm: 0.03,
        frag_rate: 0.2,
        mislabel_rate: 0.03,
        junk_rate: 0.03,
        junk_max_cos: 0.3,
        seed: 5,
        ..SynthSpec::default()
    };
    let data = generate(&spec)?;
    let config = PipelineConfig { k_per_pid: 2 * spec.images_per_pid, ..PipelineConfig::default() };

    let memory = recompute_full(&data.manifest, &data.features)?;
    let mut rng = stage_rng(config.seed, Stage::Relabel);
    // Raw features stand in for the encoder here.
    let out = run_relabeling_epoch(&data.manifest, &data.features, |x| Ok(x.clone()), &memory, &config, &mut rng)?;
    print!("{}", out.report.to_text());

    let before = labels(&data.manifest, |_| true);
    let after = labels(&out.manifest, |s| !out.removed.contains(&s));
    println!("pairwise F1 before {:.4}", score_partition(&before, &data.truth)?.f1);
    println!("pairwise F1 after  {:.4}", score_partition(&after, &data.truth)?.f1);
    Ok(())
}

fn labels(m: &DatasetManifest, keep: impl Fn(SampleId) -> bool) -> BTreeMap<SampleId, Pid> {
    m.records()
        .iter()
        .filter(|r| r.source == Source::SingleCamera && keep(r.sample_id))
        .map(|r| (r.sample_id, r.pid))
        .collect()
}
