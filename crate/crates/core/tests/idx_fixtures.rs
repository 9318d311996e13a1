use std::path::PathBuf;

use acal_core::data::{load_idx, parse_idx_images, parse_idx_labels, write_idx, DataError, Split};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Byte value of pixel (i, r, c) in the four-image fixture.
fn fixture_byte(i: usize, r: usize, c: usize) -> u8 {
    match (i, r, c) {
        (0, 0, 0) => 0,
        (0, 0, 1) => 255,
        _ => ((i * 64 + r * 9 + c * 5) % 256) as u8,
    }
}

fn parse_offset(e: DataError) -> (usize, String) {
    match e {
        DataError::Parse { offset, detail } => (offset, detail),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn four_image_fixture_parses_exactly() {
    let ds = load_idx(fixture("four-images.idx"), fixture("four-labels.idx"), "fixture", 10, Split::Test).unwrap();
    assert_eq!(ds.len(), 4);
    assert_eq!(ds.image_shape(), [1, 28, 28]);
    assert_eq!(ds.labels(), &[Some(3), Some(1), Some(4), Some(1)]);
    for i in 0..4 {
        let img = ds.image(i);
        for r in 0..28 {
            for c in 0..28 {
                let want = f64::from(fixture_byte(i, r, c)) / 127.5 - 1.0;
                assert_eq!(img[r * 28 + c], want, "pixel ({i},{r},{c})");
            }
        }
    }
    assert_eq!(ds.image(0)[0], -1.0);
    assert_eq!(ds.image(0)[1], 1.0);
}

#[test]
fn malformed_headers_report_offsets() {
    let read = |n: &str| std::fs::read(fixture(n)).unwrap();

    let (off, detail) = parse_offset(parse_idx_images(&read("bad-magic-images.idx")).unwrap_err());
    assert_eq!(off, 0);
    assert_eq!(detail, "bad magic 0x00000804, expected 0x00000803");

    let (off, detail) = parse_offset(parse_idx_labels(&read("labels-with-image-magic.idx")).unwrap_err());
    assert_eq!(off, 0);
    assert_eq!(detail, "bad magic 0x00000803, expected 0x00000801");

    // Images passed where labels belong, and the reverse.
    assert_eq!(parse_offset(parse_idx_labels(&read("four-images.idx")).unwrap_err()).0, 0);
    assert_eq!(parse_offset(parse_idx_images(&read("four-labels.idx")).unwrap_err()).0, 0);

    let (off, detail) = parse_offset(parse_idx_images(&read("truncated-header-images.idx")).unwrap_err());
    assert_eq!(off, 8);
    assert_eq!(detail, "truncated header: missing dimension");

    let (off, detail) = parse_offset(parse_idx_images(&read("truncated-images.idx")).unwrap_err());
    assert_eq!(off, 16 + 4 * 784 - 10);
    assert_eq!(detail, "truncated payload: header declares 3136 bytes, found 3126");

    let (off, detail) = parse_offset(parse_idx_images(&read("trailing-images.idx")).unwrap_err());
    assert_eq!(off, 16 + 4 * 784);
    assert_eq!(detail, "3 trailing bytes");
}

#[test]
fn mismatched_pairs_report_offsets() {
    let e = load_idx(fixture("four-images.idx"), fixture("three-labels.idx"), "f", 10, Split::Test).unwrap_err();
    let (off, detail) = parse_offset(e);
    assert_eq!(off, 4);
    assert_eq!(detail, "label count 3 does not match 4 images");

    let e = load_idx(fixture("four-images.idx"), fixture("out-of-range-labels.idx"), "f", 10, Split::Test).unwrap_err();
    let (off, detail) = parse_offset(e);
    assert_eq!(off, 10);
    assert_eq!(detail, "label 12 outside 0..10");
}

#[test]
fn export_and_reload_is_identical() {
    let ds = load_idx(fixture("four-images.idx"), fixture("four-labels.idx"), "fixture", 10, Split::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (i, l) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    write_idx(&ds, &i, &l).unwrap();
    assert_eq!(std::fs::read(&i).unwrap(), std::fs::read(fixture("four-images.idx")).unwrap());
    assert_eq!(std::fs::read(&l).unwrap(), std::fs::read(fixture("four-labels.idx")).unwrap());
    let again = load_idx(&i, &l, "fixture", 10, Split::Test).unwrap();
    assert_eq!(again, ds);
}
