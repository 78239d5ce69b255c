use std::fs;
use std::path::Path;

use super::{GridError, UncertaintyMap};

/// Renders a normalized uncertainty map as a binary 8-bit graymap (P5).
///
/// Values are scaled by 255 and rounded; 0 is black, 1 is white.
pub fn write_pgm(path: impl AsRef<Path>, map: &UncertaintyMap) -> Result<(), GridError> {
    let path = path.as_ref();
    let mut bytes = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    bytes.extend(
        map.data()
            .iter()
            .map(|&u| (u.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmaps::Measure;

    #[test]
    fn header_and_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.pgm");
        let map = UncertaintyMap::new(1, 3, Measure::Std, true, 3, vec![0.0, 0.5, 1.0]).unwrap();
        write_pgm(&path, &map).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P5\n3 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255]);
    }
}
