use std::fs;
use std::path::Path;

use ldca::dataset::{check_disjoint, load_dataset, load_image, ChannelStats, LoadOptions, Resize};
use ldca::episode::ImageRef;
use ldca::LdcaError;
use proptest::prelude::*;

fn write_png(path: &Path, side: u32, rgb: [u8; 3]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let pixels: Vec<u8> = (0..side * side).flat_map(|_| rgb).collect();
    image::save_buffer(path, &pixels, side, side, image::ColorType::Rgb8).unwrap();
}

fn write_layout(root: &Path, splits: &[(&str, &[&str])], side: u32) {
    for (split, classes) in splits {
        for (i, c) in classes.iter().enumerate() {
            for j in 0..2u8 {
                let v = 40 * i as u8 + 10 * j;
                write_png(
                    &root.join(split).join(c).join(format!("{j}.png")),
                    side,
                    [v, 100 + v, 200 - v],
                );
            }
        }
    }
}

#[test]
fn normalization_matches_direct_computation() {
    let dir = tempfile::tempdir().unwrap();
    write_png(&dir.path().join("train/a/0.png"), 8, [0, 51, 255]);
    write_png(&dir.path().join("train/b/0.png"), 8, [255, 102, 255]);
    write_png(&dir.path().join("test/c/0.png"), 8, [128, 128, 128]);
    let ds = load_dataset(dir.path(), &LoadOptions::new(8)).unwrap();
    let n = ds.normalization;
    let want_mean = [0.5, 153.0 / 2.0 / 255.0, 1.0];
    let want_std = [0.5, 25.5 / 255.0, 1.0];
    for c in 0..3 {
        assert!((n.mean[c] - want_mean[c]).abs() < 1e-12);
        assert!((n.std[c] - want_std[c]).abs() < 1e-12);
    }
    let test = ds.split("test").unwrap();
    let img = test.image(ImageRef { class: 0, image: 0 }, &n).unwrap();
    for c in 0..3 {
        let want = (128.0 / 255.0 - n.mean[c]) / n.std[c];
        let plane = &img.data()[c * 64..(c + 1) * 64];
        assert!(plane.iter().all(|v| (v - want).abs() < 1e-12));
    }
}

#[test]
fn images_at_the_target_side_are_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let pixels: Vec<u8> = (0..84 * 84 * 3).map(|i| (i * 7 % 251) as u8).collect();
    image::save_buffer(&path, &pixels, 84, 84, image::ColorType::Rgb8).unwrap();
    for resize in [Resize::Bilinear, Resize::Nearest] {
        assert_eq!(load_image(&path, 84, resize).unwrap(), pixels);
    }
    assert_eq!(
        load_image(&path, 21, Resize::Bilinear).unwrap().len(),
        21 * 21 * 3
    );
}

#[test]
fn grayscale_and_jpeg_decode_to_rgb() {
    let dir = tempfile::tempdir().unwrap();
    let gray = dir.path().join("g.png");
    image::save_buffer(&gray, &[90u8; 16], 4, 4, image::ColorType::L8).unwrap();
    assert_eq!(
        load_image(&gray, 4, Resize::Bilinear).unwrap(),
        vec![90u8; 48]
    );
    let jpg = dir.path().join("j.jpg");
    image::save_buffer(&jpg, &[200u8; 48], 4, 4, image::ColorType::Rgb8).unwrap();
    assert_eq!(load_image(&jpg, 4, Resize::Bilinear).unwrap().len(), 48);
}

#[test]
fn undecodable_file_names_its_path() {
    let dir = tempfile::tempdir().unwrap();
    write_layout(dir.path(), &[("train", &["a", "b"])], 8);
    let bad = dir.path().join("train/a/broken.png");
    fs::write(&bad, b"not an image").unwrap();
    match load_dataset(dir.path(), &LoadOptions::new(8)).unwrap_err() {
        LdcaError::Image { path, .. } => assert_eq!(path, bad),
        other => panic!("{other:?}"),
    }
}

#[test]
fn manifest_layout_loads() {
    let dir = tempfile::tempdir().unwrap();
    for c in ["a", "b", "c"] {
        write_png(&dir.path().join(c).join("0.png"), 8, [1, 2, 3]);
    }
    fs::write(
        dir.path().join("manifest.json"),
        r#"{"train": ["a", "b"], "test": ["c"]}"#,
    )
    .unwrap();
    let ds = load_dataset(dir.path(), &LoadOptions::new(8)).unwrap();
    assert_eq!(ds.split("train").unwrap().classes.len(), 2);
    assert_eq!(ds.split("test").unwrap().classes[0].name, "c");
    assert!(ds.split("val").is_err());
    fs::write(
        dir.path().join("manifest.json"),
        r#"{"train": ["a"], "test": ["a"]}"#,
    )
    .unwrap();
    assert!(matches!(
        load_dataset(dir.path(), &LoadOptions::new(8)),
        Err(LdcaError::Data(_))
    ));
}

#[test]
fn loading_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    write_layout(dir.path(), &[("train", &["a", "b"]), ("test", &["c"])], 10);
    let a = load_dataset(dir.path(), &LoadOptions::new(8)).unwrap();
    let b = load_dataset(dir.path(), &LoadOptions::new(8)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.digest, b.digest);
}

#[test]
fn overlapping_class_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    write_layout(dir.path(), &[("train", &["a", "b"]), ("test", &["b"])], 8);
    match load_dataset(dir.path(), &LoadOptions::new(8)).unwrap_err() {
        LdcaError::Data(msg) => assert!(msg.contains("b (train, test)"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn identity_stats_leave_values_scaled() {
    let s = ChannelStats::identity();
    assert_eq!((s.mean, s.std), ([0.0; 3], [1.0; 3]));
}

proptest! {
    /// Random class-to-split assignments; a layout loads exactly when no
    /// class name lands in two splits.
    #[test]
    fn disjointness_is_enforced(assign in proptest::collection::vec(proptest::collection::vec(0usize..3, 1..3), 1..6)) {
        let splits = ["train", "val", "test"];
        let mut layout: Vec<(String, Vec<String>)> = splits.iter().map(|s| (s.to_string(), vec![])).collect();
        for (class, owners) in assign.iter().enumerate() {
            for &o in owners {
                if !layout[o].1.contains(&format!("k{class}")) {
                    layout[o].1.push(format!("k{class}"));
                }
            }
        }
        let shared = assign.iter().any(|o| o.iter().any(|&x| x != o[0]));
        prop_assert_eq!(check_disjoint(&layout).is_err(), shared);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn loader_rejects_adversarial_layouts(owners in proptest::collection::vec(0usize..3, 2..5), dup in 0usize..5, into in 0usize..3) {
        let dir = tempfile::tempdir().unwrap();
        let splits = ["train", "val", "test"];
        for (i, &o) in owners.iter().enumerate() {
            write_png(&dir.path().join(splits[o]).join(format!("k{i}")).join("0.png"), 4, [9, 9, 9]);
        }
        let dup = dup % owners.len();
        let copied = into != owners[dup];
        write_png(&dir.path().join(splits[into]).join(format!("k{dup}")).join("1.png"), 4, [9, 9, 9]);
        let mut opts = LoadOptions::new(4);
        opts.normalization = Some(ChannelStats::identity());
        let result = load_dataset(dir.path(), &opts);
        if copied {
            prop_assert!(matches!(result, Err(LdcaError::Data(_))));
        } else {
            prop_assert!(result.is_ok());
        }
    }
}
