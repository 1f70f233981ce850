use ssda_core::data::{
    generate_synthetic, load_dataset, make_split, write_dataset, Domain, DomainDataset, FileFormat, Manifest, Sample,
    SplitCase, SplitSpec, SyntheticSpec,
};

fn small_spec(categories: usize) -> SyntheticSpec {
    SyntheticSpec { num_categories: categories, images_per_category: 4, image_size: 16, seed: 2, ..SyntheticSpec::default() }
}

fn relabel(ds: DomainDataset<f32>, names: &[String]) -> DomainDataset<f32> {
    DomainDataset::new(ds.into_samples(), names.to_vec()).unwrap()
}

#[test]
fn raw_tensor_files_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = generate_synthetic::<f32>(&small_spec(3)).unwrap();
    let manifest = write_dataset(&src, &tgt, dir.path(), FileFormat::Ssda).unwrap();
    let back = load_dataset::<f32>(dir.path(), &Manifest::from_file(&dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.categories, src.categories());
    for (orig, domain) in [(&src, Domain::Source), (&tgt, Domain::Target)] {
        let loaded = back.domain(domain);
        assert_eq!(loaded.len(), orig.len());
        // Files are read in name order, which is the write order within a category.
        let mut expected: Vec<&Sample<f32>> = orig.samples().iter().collect();
        expected.sort_by_key(|s| s.label);
        for (a, b) in loaded.samples().iter().zip(expected) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.image, b.image);
            assert_eq!(a.meta.elevation, b.meta.elevation);
            let az = (a.meta.azimuth.unwrap() - b.meta.azimuth.unwrap()).abs();
            assert!(az < 0.006 || (az - 360.0).abs() < 0.006);
        }
    }
}

#[test]
fn png_files_round_trip_within_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = generate_synthetic::<f64>(&small_spec(2)).unwrap();
    write_dataset(&src, &tgt, dir.path(), FileFormat::Png).unwrap();
    let manifest = Manifest::from_file(&dir.path().join("manifest.json")).unwrap();
    let back = load_dataset::<f64>(dir.path(), &manifest).unwrap();
    let loaded = back.domain(Domain::Source);
    let mut expected: Vec<_> = src.samples().iter().collect();
    expected.sort_by_key(|s| s.label);
    for (a, b) in loaded.samples().iter().zip(expected) {
        let worst = a.image.pixels().iter().zip(b.image.pixels()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
    }
}

#[test]
fn ten_class_layout_and_elevation_splits() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::sar_ten_class(16);
    let (src, tgt) = generate_synthetic::<f32>(&small_spec(10)).unwrap();
    let (src, tgt) = (relabel(src, &manifest.categories), relabel(tgt, &manifest.categories));
    write_dataset(&src, &tgt, dir.path(), FileFormat::Png).unwrap();
    let all = load_dataset::<f32>(dir.path(), &manifest).unwrap();
    assert_eq!(all.num_classes(), 10);
    assert_eq!(all.domain(Domain::Target).class_counts(), vec![4; 10]);

    // Synthetic elevations cycle through 14, 15, 16, 17 degrees.
    let target = all.domain(Domain::Target);
    let case1 = make_split(&target, &SplitSpec { k_shot: 1, case: SplitCase::CaseI, seed: 0, test_fraction: None }).unwrap();
    assert_eq!(case1.test.len(), 10);
    assert!(case1.test.samples().iter().all(|s| s.meta.elevation == Some(17.0)));
    assert_eq!(case1.labeled.class_counts(), vec![1; 10]);
    assert_eq!(case1.unlabeled.len(), 20);

    let case2 = make_split(&target, &SplitSpec { k_shot: 1, case: SplitCase::CaseII, seed: 0, test_fraction: None });
    assert!(case2.is_err(), "one training image per category cannot give a 1-shot split with unlabeled data");
}

#[test]
fn missing_category_directory_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = generate_synthetic::<f32>(&small_spec(2)).unwrap();
    write_dataset(&src, &tgt, dir.path(), FileFormat::Ssda).unwrap();
    let mut manifest = Manifest::from_file(&dir.path().join("manifest.json")).unwrap();
    manifest.categories.push("ghost".into());
    let err = load_dataset::<f32>(dir.path(), &manifest).unwrap_err();
    assert!(err.to_string().contains("ghost"), "{err}");
}
