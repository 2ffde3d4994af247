//! Generates a small noisy synthetic dataset and writes the manifest,
//! features and ground truth to a directory.
//!
//!     cargo run --example generate_dataset -- /tmp/mixpipe-data

use mixpipe::io::{write_embeddings, write_manifest};
use mixpipe::synth::{generate, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth-out".into());
    let spec = SynthSpec {
        num_multicam_pids: 16,
        num_singlecam_pids: 48,
        frag_rate: 0.1,
        mislabel_rate: 0.02,
        junk_rate: 0.02,
        num_eval_pids: 8,
        seed: 11,
        ..SynthSpec::default()
    };
    let data = generate(&spec)?;
    std::fs::create_dir_all(&out)?;
    write_manifest(&data.manifest, format!("{out}/manifest.tsv"))?;
    write_embeddings(&data.features, format!("{out}/features.mxeb"))?;
    std::fs::write(format!("{out}/truth.tsv"), data.truth.to_text())?;

    let c = data.manifest.counts();
    println!("{c:?}");
    println!(
        "{} junk, {} mislabelled, {} fragment pids",
        data.truth.junk_ids().count(),
        data.truth.mislabel_set.len(),
        data.truth.fragment_map.len()
    );
    Ok(())
}
