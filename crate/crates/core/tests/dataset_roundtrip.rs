use std::path::PathBuf;

use nalgebra::Vector3;
use wipose::io::{write_calibration, Calibration, DatasetIndex, IoError};
use wipose::rfsim::Action;
use wipose::train::{ring_layout, Site, SyntheticRecipe};

fn recipe() -> SyntheticRecipe {
    let tx = Vector3::new(0.0, 0.0, 1.0);
    let sites = [1.0, 1.3]
        .into_iter()
        .map(|s| Site {
            layout: ring_layout(tx, &[-0.7, 0.0, 0.7], &[3.0 * s, 3.4 * s, 3.0 * s]).unwrap(),
            spots: vec![vec![0.25; 4]],
        })
        .collect();
    SyntheticRecipe {
        sites,
        orientations: vec![0.0],
        actions: vec![Action::Jump, Action::Squat],
        repetitions: 1,
        frames_per_clip: 6,
        frame_rate: 30.0,
        placement_jitter: 0.1,
        noise_std: 1e-5,
        drift_step_std: 0.02,
        scatterers: vec![],
        seed: 21,
    }
}

#[test]
fn simulated_dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = recipe();
    let expected = recipe.build(16).unwrap();

    let mut index = None;
    // Write in reverse order; the index is canonicalised by id before saving.
    for meta in recipe.metas().into_iter().rev() {
        let raw = recipe.simulate_clip(&meta).unwrap();
        let idx = index.get_or_insert_with(|| {
            DatasetIndex::new(raw.csi[0].sample_rate(), raw.csi[0].subcarrier_freqs().to_vec(), dir.path())
        });
        let cal = PathBuf::from(format!("cal/{}.json", meta.id));
        write_calibration(&dir.path().join(&cal), &Calibration::from_layout(raw.layout.clone())).unwrap();
        idx.add_raw_clip(&raw, &cal).unwrap();
    }
    let mut index = index.unwrap();
    index.canonicalize().unwrap();
    let path = dir.path().join("index.json");
    index.save(&path).unwrap();

    let mut loaded = DatasetIndex::load(&path).unwrap();
    assert!(matches!(loaded.read_dataset(), Err(IoError::Parse(_))));
    for meta in recipe.metas() {
        let raw = loaded.read_raw_clip(meta.id).unwrap();
        assert_eq!(raw, recipe.simulate_clip(&meta).unwrap());
        loaded.set_features(&raw.featurize(16).unwrap(), 16).unwrap();
    }
    loaded.save(&path).unwrap();

    let dataset = DatasetIndex::load(&path).unwrap().read_dataset().unwrap();
    assert_eq!(dataset.clips, expected.clips);
    assert_eq!(dataset.metas(), recipe.metas());

    std::fs::remove_file(dir.path().join("cal/1.json")).unwrap();
    assert!(matches!(
        DatasetIndex::load(&path),
        Err(IoError::MissingFile(_))
    ));
}
