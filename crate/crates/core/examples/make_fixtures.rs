//! Regenerates the committed test fixtures under `tests/data/`.
//!
//! ```text
//! cargo run -p linecolor --example make_fixtures
//! ```
//!
//! Writes the 200-frame test clip, the CMFT golden case, and the golden shot
//! index and manifest built from the clip. Only rerun when the fixtures are
//! meant to change.

use std::fs;
use std::path::Path;

use linecolor::cmft::{cmft_transfer_naive, FeatureMap};
use linecolor::datasmith::{build_dataset, DatasetConfig, MANIFEST_FILE, SHOTS_FILE};
use linecolor::golden::GoldenCase;
use linecolor::synthetic;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLIP_SEED: u64 = 11;
const SHOT_LENGTHS: [usize; 4] = [46, 60, 41, 53];
const GOLDEN_SEED: u64 = 20240501;

fn main() -> linecolor::Result<()> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let clip_dir = data.join("clip");
    if clip_dir.exists() {
        fs::remove_dir_all(&clip_dir).expect("remove old clip");
    }
    fs::create_dir_all(&clip_dir).expect("create clip dir");
    for (i, f) in synthetic::clip(CLIP_SEED, &SHOT_LENGTHS, 64, 64, 3, 1.5).iter().enumerate() {
        f.save_png(&clip_dir.join(format!("frame_{i:04}.png")))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(GOLDEN_SEED);
    let mut map = |l: usize| {
        FeatureMap::from_fn(8, 8, l, |_, _, _| rng.gen_range(-1.0..1.0)).expect("finite values")
    };
    let (query, key, payload) = (map(4), map(4), map(4));
    let expected = cmft_transfer_naive(&query, &key, &payload)?;
    GoldenCase {
        seed: GOLDEN_SEED,
        tolerance: 1e-5,
        query,
        key,
        payload,
        expected,
    }
    .save(&data.join("cmft_golden.bin"))?;

    // the golden manifest is built from a copy so its relative paths do not
    // depend on where the repository lives
    let work = tempfile::tempdir().expect("tempdir");
    let frames = work.path().join("frames");
    fs::create_dir_all(&frames).expect("create frames");
    for entry in fs::read_dir(&clip_dir).expect("read clip") {
        let p = entry.expect("entry").path();
        fs::copy(&p, frames.join(p.file_name().expect("name"))).expect("copy frame");
    }
    std::env::set_var("SOURCE_DATE_EPOCH", "0");
    let out = work.path().join("dataset");
    let summary = build_dataset(&frames, &out, &DatasetConfig::default())?;
    fs::copy(out.join(SHOTS_FILE), data.join("clip_shots.tsv")).expect("copy shots");
    fs::copy(out.join(MANIFEST_FILE), data.join("clip_manifest.tsv")).expect("copy manifest");
    println!(
        "{} frames, shots {:?}, {} pairs",
        summary.frames.len(),
        summary.shots.shots(),
        summary.manifest.records.len()
    );
    Ok(())
}
