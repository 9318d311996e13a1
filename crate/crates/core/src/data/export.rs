use std::fmt::Write as _;
use std::path::Path;

use super::{DataError, DomainDataset};

/// Binary greyscale PGM (P5) for one single-channel image in `[-1, 1]`.
pub fn encode_pgm(pixels: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    out
}

/// Writes `img_00000.pgm`, ... plus a `labels.csv` manifest into `dir`.
/// Unlabeled items have an empty label field.
pub fn export_pgm(ds: &DomainDataset, dir: impl AsRef<Path>) -> Result<(), DataError> {
    let dir = dir.as_ref();
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(DataError::Invalid(format!("PGM export needs one channel, got {c}")));
    }
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("file,label\n");
    for i in 0..ds.len() {
        let name = format!("img_{i:05}.pgm");
        std::fs::write(dir.join(&name), encode_pgm(ds.image(i), h, w))?;
        match ds.label(i) {
            Some(l) => writeln!(manifest, "{name},{l}").unwrap(),
            None => writeln!(manifest, "{name},").unwrap(),
        }
    }
    std::fs::write(dir.join("labels.csv"), manifest)?;
    Ok(())
}
