use std::path::{Path, PathBuf};

use diffyolo_core::data::{export_dataset, generate_synthetic, load_deeppcb, BBox, SyntheticConfig};
use diffyolo_core::CoreError;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn loads_fixture_tree() {
    let items = load_deeppcb(&fixture("deeppcb"), 1).unwrap();
    let ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
    // the template image and the image without annotation are skipped
    assert_eq!(ids, ["group00041/00041/00041000", "group00041/00041/00041001", "group00050/00050/00050007"]);

    let first = &items[0];
    assert_eq!(first.image.shape(), (1, 100, 100));
    assert_eq!(first.boxes.len(), 2);
    assert_eq!(first.boxes[0].bbox, BBox::new(10.0, 10.0, 50.0, 50.0));
    assert_eq!(first.boxes[0].class, 2);
    assert_eq!(first.boxes[1].class, 0);

    let second = &items[1];
    assert_eq!(second.image.shape(), (1, 80, 120));
    assert_eq!(second.boxes[0].class, 5);
    // 100 60 130 90 on a 120x80 image is clipped
    assert_eq!(second.boxes[1].bbox, BBox::new(100.0, 60.0, 120.0, 80.0));

    for item in &items {
        item.validate().unwrap();
    }
    let rgb = load_deeppcb(&fixture("deeppcb"), 3).unwrap();
    assert_eq!(rgb[2].image.shape(), (3, 48, 48));
}

#[test]
fn png_pixels_are_unit_scaled() {
    let items = load_deeppcb(&fixture("deeppcb"), 1).unwrap();
    let raw = image::open(fixture("deeppcb/group00041/00041/00041000_test.png")).unwrap().to_luma8();
    for (v, p) in items[0].image.data().iter().zip(raw.pixels()) {
        assert_eq!(*v, p.0[0] as f32 / 255.0);
    }
}

#[test]
fn bad_line_is_reported_with_location() {
    match load_deeppcb(&fixture("deeppcb_bad"), 1) {
        Err(CoreError::Annotation { path, line, .. }) => {
            assert!(path.ends_with("g/x.txt"), "{}", path.display());
            assert_eq!(line, 2);
        }
        other => panic!("expected annotation error, got {:?}", other.map(|v| v.len())),
    }
}

#[test]
fn empty_directory_gives_empty_list() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_deeppcb(dir.path(), 1).unwrap().is_empty());
    assert!(load_deeppcb(&dir.path().join("missing"), 1).is_err());
}

#[test]
fn synthetic_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let items = generate_synthetic(&SyntheticConfig { count: 12, ..Default::default() }, 4).unwrap();
    export_dataset(&items, dir.path()).unwrap();
    let back = load_deeppcb(dir.path(), 1).unwrap();
    assert_eq!(back.len(), items.len());
    for (a, b) in items.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert!(a.image.bit_eq(&b.image));
        assert_eq!(a.boxes, b.boxes);
    }
}
