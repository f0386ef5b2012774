use std::fs;

use clockdistill::data::{
    generate_dataset, generate_samples, load_dataset, parse_annotations, to_coco, DatasetSpec,
    ANNOTATION_FILE,
};
use clockdistill::Error;

fn small(num_images: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_images,
        seed,
        ..DatasetSpec::default()
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = small(12, 5);
    generate_dataset(&spec, a.path()).unwrap();
    generate_dataset(&spec, b.path()).unwrap();
    let read = |d: &std::path::Path| fs::read(d.join(ANNOTATION_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    for i in 0..12u64 {
        let name = format!("images/{i:06}.png");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
    let other = generate_samples(&small(12, 6)).unwrap();
    assert_ne!(generate_samples(&spec).unwrap(), other);
}

#[test]
fn empty_dataset_has_a_valid_annotation_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate_dataset(&small(0, 1), dir.path()).unwrap();
    assert_eq!((d.num_images, d.num_objects), (0, 0));
    let ann = parse_annotations(&fs::read_to_string(d.annotation_file).unwrap()).unwrap();
    assert!(ann.samples.is_empty());
    assert_eq!(ann.categories.len(), 3);
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn fixed_size_objects_have_the_expected_area() {
    let spec = DatasetSpec {
        num_images: 20,
        min_objects: 1,
        max_objects: 1,
        min_size: 0.5,
        max_size: 0.5,
        ..DatasetSpec::default()
    };
    let side = 0.5 * spec.image_size as f64;
    for s in generate_samples(&spec).unwrap() {
        assert_eq!(s.gts.len(), 1);
        let b = s.gts[0].bbox;
        let (w, h) = (b.w * spec.image_size as f64, b.h * spec.image_size as f64);
        // tight boxes are within one pixel of the drawn extent on each side
        assert!(w <= side + 2.0 && h <= side + 2.0, "{w}x{h}");
        assert!(w >= side - 2.0 && h >= side - 2.0, "{w}x{h}");
    }
}

#[test]
fn disk_round_trip_matches_generator() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(10, 3);
    generate_dataset(&spec, dir.path()).unwrap();
    let original = generate_samples(&spec).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), original.len());
    for (a, b) in loaded.iter().zip(&original) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.image, b.image);
        assert_eq!(a.gts.len(), b.gts.len());
        for (x, y) in a.gts.iter().zip(&b.gts) {
            assert_eq!(x.class_id, y.class_id);
            for (u, v) in x.bbox.to_array().iter().zip(y.bbox.to_array()) {
                assert!((u - v).abs() < 1e-6, "{u} vs {v}");
            }
        }
    }
}

#[test]
fn categories_are_remapped_contiguously() {
    let text = r#"{
        "images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 20}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 99, "bbox": [0, 0, 5, 10], "area": 50},
            {"id": 2, "image_id": 1, "category_id": 7, "bbox": [5, 10, 5, 10], "area": 50},
            {"id": 3, "image_id": 1, "category_id": 12, "bbox": [2, 2, 2, 2], "area": 4}
        ],
        "categories": [
            {"id": 12, "name": "b"}, {"id": 99, "name": "c"}, {"id": 7, "name": "a"}
        ]
    }"#;
    let ann = parse_annotations(text).unwrap();
    let map: Vec<(u64, usize)> = ann.categories.iter().map(|c| (c.category_id, c.class_id)).collect();
    assert_eq!(map, [(7, 0), (12, 1), (99, 2)]);
    let classes: Vec<usize> = ann.samples[0].gts.iter().map(|g| g.class_id).collect();
    assert_eq!(classes, [2, 0, 1]);
    let b = ann.samples[0].gts[0].bbox;
    assert_eq!(b.to_array(), [0.25, 0.25, 0.5, 0.5]);
}

#[test]
fn zero_width_annotation_names_the_record() {
    let text = r#"{
        "images": [{"id": 1, "file_name": "a.png", "width": 10, "height": 10}],
        "annotations": [{"id": 42, "image_id": 1, "category_id": 1, "bbox": [1, 1, 0, 3], "area": 0}],
        "categories": [{"id": 1, "name": "disk"}]
    }"#;
    match parse_annotations(text) {
        Err(Error::Annotation { record, .. }) => assert!(record.contains("42"), "{record}"),
        other => panic!("expected an annotation error, got {other:?}"),
    }
    let missing = r#"{"images": [], "annotations": [{"id": 3}], "categories": []}"#;
    match parse_annotations(missing) {
        Err(Error::Annotation { record, .. }) => assert!(record.contains("annotations[0]"), "{record}"),
        other => panic!("expected an annotation error, got {other:?}"),
    }
}

#[test]
fn emitted_boxes_are_valid_and_classes_balanced() {
    let spec = small(500, 9);
    let samples = generate_samples(&spec).unwrap();
    let coco = to_coco(&samples, spec.num_classes);
    let mut counts = [0usize; 3];
    for s in &samples {
        for g in &s.gts {
            g.bbox.validate().unwrap();
            counts[g.class_id] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    assert!(n >= 1000, "only {n} objects");
    assert_eq!(coco.annotations.len(), n);
    let p = 1.0 / 3.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}
