//! Big-endian IDX image and label files (the classic handwritten-digit
//! distribution format). Pixels are bytes mapped to `x / 127.5 - 1`.

use std::path::Path;

use super::{DataError, DomainDataset, Split};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_err(offset: usize, detail: impl Into<String>) -> DataError {
    DataError::Parse {
        offset,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| parse_err(at, format!("truncated header: missing {what}")))
}

fn header(bytes: &[u8], magic: u32, ndim: usize) -> Result<(Vec<usize>, usize), DataError> {
    let got = read_u32(bytes, 0, "magic")?;
    if got != magic {
        return Err(parse_err(
            0,
            format!("bad magic 0x{got:08x}, expected 0x{magic:08x}"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_u32(bytes, 4 + 4 * d, "dimension")? as usize);
    }
    let start = 4 + 4 * ndim;
    let n: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < n {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: header declares {n} bytes, found {have}"),
        ));
    }
    if have > n {
        return Err(parse_err(start + n, format!("{} trailing bytes", have - n)));
    }
    Ok((dims, start))
}

/// Parses an image file into `([N, H, W], pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<([usize; 3], Vec<f64>), DataError> {
    let (dims, start) = header(bytes, IMAGES_MAGIC, 3)?;
    if dims[1] == 0 || dims[2] == 0 {
        return Err(parse_err(8, format!("zero image extent {}x{}", dims[1], dims[2])));
    }
    let pixels = bytes[start..].iter().map(|&b| f64::from(b) / 127.5 - 1.0).collect();
    Ok(([dims[0], dims[1], dims[2]], pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>, DataError> {
    let (_, start) = header(bytes, LABELS_MAGIC, 1)?;
    Ok(bytes[start..].iter().map(|&b| usize::from(b)).collect())
}

/// Loads a paired image/label file set as a fully labeled single-channel
/// domain.
pub fn load_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    domain_id: &str,
    class_count: usize,
    split: Split,
) -> Result<DomainDataset, DataError> {
    let ([n, h, w], pixels) = parse_idx_images(&std::fs::read(images)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels)?)?;
    if labels.len() != n {
        // The label file's count field disagrees with the image file.
        return Err(parse_err(4, format!("label count {} does not match {n} images", labels.len())));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
        // header(8) + index
        return Err(parse_err(8 + i, format!("label {l} outside 0..{class_count}")));
    }
    DomainDataset::new(
        domain_id,
        [1, h, w],
        pixels,
        labels.into_iter().map(Some).collect(),
        class_count,
        split,
    )
}

/// Writes a fully labeled single-channel dataset. Pixels are quantized to
/// the nearest byte.
pub fn write_idx(
    ds: &DomainDataset,
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
) -> Result<(), DataError> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(DataError::Invalid(format!("IDX holds one channel, dataset has {c}")));
    }
    if ds.labels().iter().any(Option::is_none) || ds.class_count() > 256 {
        return Err(DataError::Invalid("IDX labels must be present and fit a byte".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.pixels().len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.pixels().iter().map(|&v| ((v + 1.0) * 127.5).round() as u8));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels().iter().map(|l| l.unwrap() as u8));
    std::fs::write(images, img)?;
    std::fs::write(labels, lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: u32, h: u32, w: u32, payload: &[u8]) -> Vec<u8> {
        let mut b = IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [n, h, w] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn pixel_mapping_endpoints() {
        let (shape, px) = parse_idx_images(&images(1, 1, 3, &[0, 255, 51])).unwrap();
        assert_eq!(shape, [1, 1, 3]);
        assert_eq!(px[0], -1.0);
        assert_eq!(px[1], 1.0);
        assert!((px[2] - (51.0 / 127.5 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn malformed_inputs_report_offsets() {
        let mut bad = images(1, 1, 2, &[0, 0]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad), Err(DataError::Parse { offset: 0, .. })));
        assert!(matches!(
            parse_idx_images(&images(2, 1, 2, &[0, 0, 0])),
            Err(DataError::Parse { offset: 19, .. })
        ));
        assert!(matches!(
            parse_idx_images(&images(1, 1, 2, &[0, 0, 9])),
            Err(DataError::Parse { offset: 18, .. })
        ));
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(DataError::Parse { offset: 0, .. })));
        assert!(matches!(
            parse_idx_images(&IMAGES_MAGIC.to_be_bytes()),
            Err(DataError::Parse { offset: 4, .. })
        ));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        std::fs::write(&ip, images(2, 1, 2, &[0, 128, 255, 7])).unwrap();
        let mut lab = LABELS_MAGIC.to_be_bytes().to_vec();
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[3, 1]);
        std::fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp, "d", 10, Split::Train).unwrap();
        assert_eq!(ds.labels(), &[Some(3), Some(1)]);
        let (ip2, lp2) = (dir.path().join("i2.idx"), dir.path().join("l2.idx"));
        write_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(lab, std::fs::read(&lp2).unwrap());
        assert!(load_idx(&ip, &lp, "d", 2, Split::Train).is_err());
    }
}
