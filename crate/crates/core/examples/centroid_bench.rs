//! Embedding cost of the K-per-pid refinement subset against a full
//! recompute of every single-camera centroid.

use mixpipe::bench::bench_centroids;
use mixpipe::config::PipelineConfig;
use mixpipe::synth::{generate, SynthSpec};

fn main() -> mixpipe::Result<()> {
    let data = generate(&SynthSpec { images_per_pid: 24, num_singlecam_pids: 100, seed: 1, ..SynthSpec::default() })?;
    let table = bench_centroids(&data.manifest, &data.features, &[2, 4, 8, 16], &PipelineConfig::default())?;
    print!("{}", table.to_text());
    for row in &table.rows {
        let name = row.k.map_or("naive".to_string(), |k| format!("K={k}"));
        println!("{name}: {:.3} ms", row.seconds * 1e3);
    }
    Ok(())
}
