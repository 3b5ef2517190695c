use tdet_detect::data::{generate_dataset, save_dataset, DatasetConfig};

#[test]
fn same_seed_gives_identical_datasets() {
    let cfg = DatasetConfig::default();
    let a = generate_dataset(11, 4, &cfg).unwrap();
    let b = generate_dataset(11, 4, &cfg).unwrap();
    assert_eq!(a, b);
    let c = generate_dataset(12, 4, &cfg).unwrap();
    assert_ne!(a, c);
}

#[test]
fn prefixes_agree_across_sizes() {
    let cfg = DatasetConfig::default();
    let small = generate_dataset(3, 2, &cfg).unwrap();
    let large = generate_dataset(3, 5, &cfg).unwrap();
    assert_eq!(small[..], large[..2]);
}

#[test]
fn zero_sequences_is_empty() {
    assert!(generate_dataset(1, 0, &DatasetConfig::default()).unwrap().is_empty());
}

#[test]
fn annotations_stay_in_bounds_over_100_sequences() {
    let cfg = DatasetConfig::default();
    let size = cfg.image_size as f32;
    let mut blurred = 0;
    for seq in generate_dataset(5, 100, &cfg).unwrap() {
        assert_eq!(seq.frames.len(), cfg.seq_len);
        assert!(!seq.frames[0].blurred);
        for f in &seq.frames {
            assert_eq!((f.image.width, f.image.height), (cfg.image_size, cfg.image_size));
            assert!((cfg.min_objects..=cfg.max_objects).contains(&f.objects.len()));
            for o in &f.objects {
                let b = o.bbox;
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= size && b.y_max <= size, "{b:?}");
                assert!(o.class < cfg.num_classes);
            }
            blurred += f.blurred as usize;
        }
    }
    assert!(blurred > 0);
}

#[test]
fn objects_move_smoothly() {
    let cfg = DatasetConfig::default();
    for seq in generate_dataset(9, 20, &cfg).unwrap() {
        for w in seq.frames.windows(2) {
            for (a, b) in w[0].objects.iter().zip(&w[1].objects) {
                assert_eq!(a.class, b.class);
                assert!((a.bbox.x_min - b.bbox.x_min).abs() <= 2.0);
                assert!((a.bbox.y_min - b.bbox.y_min).abs() <= 2.0);
            }
        }
    }
}

#[test]
fn invalid_sizes_fail() {
    let bad = [
        DatasetConfig { image_size: 16, ..Default::default() },
        DatasetConfig { num_classes: 1, ..Default::default() },
        DatasetConfig { num_classes: 5, ..Default::default() },
        DatasetConfig { seq_len: 0, ..Default::default() },
        DatasetConfig { max_box: 40, ..Default::default() },
        DatasetConfig { blur_prob: 1.5, ..Default::default() },
    ];
    for cfg in bad {
        assert!(generate_dataset(0, 1, &cfg).is_err(), "{cfg:?}");
    }
}

#[test]
fn saved_dataset_layout() {
    let dir = tempfile::tempdir().unwrap();
    let seqs = generate_dataset(2, 2, &DatasetConfig::default()).unwrap();
    save_dataset(dir.path(), &seqs).unwrap();
    let seq0 = dir.path().join("seq_000");
    assert!(seq0.join("frame_00.ppm").is_file());
    assert!(seq0.join("frame_09.ppm").is_file());
    let ann: serde_json::Value = serde_json::from_slice(&std::fs::read(seq0.join("annotations.json")).unwrap()).unwrap();
    assert_eq!(ann["frames"].as_array().unwrap().len(), 10);
    let header = std::fs::read(seq0.join("frame_00.ppm")).unwrap();
    assert!(header.starts_with(b"P6"));
}
