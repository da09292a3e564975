use std::path::Path;

use disasternet::{Dataset, DefaultEmbedders, GeoEmbedConfig, ImageEmbedConfig, TextEmbedConfig};

fn example_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/example.jsonl"))
}

#[test]
fn example_file_loads_and_embeds() {
    let ds = Dataset::load(example_path()).unwrap();
    assert_eq!(ds.class_names, ["fire", "flood", "earthquake"]);
    assert_eq!(ds.image_dim, 4);
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.class_counts(), vec![2, 2, 2]);
    assert!(ds.samples[3].image_features.is_none());
    assert!(ds.samples[4].coords.is_none());
    assert!(ds.samples[5].text.is_empty());

    let embedders = DefaultEmbedders::new(
        TextEmbedConfig::default(),
        ImageEmbedConfig { dim_i: 4 },
        GeoEmbedConfig::default(),
    )
    .unwrap();
    let data = embedders.embed_dataset(&ds).unwrap();
    assert_eq!(data.labels, vec![0, 1, 2, 0, 1, 2]);
    assert!(data.samples[3].image.data().iter().all(|&v| v == 0.0));
    assert!(data.samples[4].geo.data().iter().all(|&v| v == 0.0));
}

#[test]
fn example_file_round_trips_bit_exactly() {
    let ds = Dataset::load(example_path()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy.jsonl");
    ds.save(&out).unwrap();
    assert_eq!(Dataset::load(&out).unwrap(), ds);
}
