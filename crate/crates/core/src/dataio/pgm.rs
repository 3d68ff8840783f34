//! Binary portable graymap (P5, maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::predictor::EvidenceRaster;

pub fn encode(raster: &EvidenceRaster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", raster.width(), raster.height()).into_bytes();
    out.extend_from_slice(raster.levels());
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<EvidenceRaster> {
    let bad = |m: &str| Error::format(path, m);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header fields
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimension"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("PGM maxval must be 255"));
    }
    // exactly one whitespace byte after maxval
    if pos >= bytes.len() {
        return Err(bad("missing pixel data"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h, data.len())));
    }
    EvidenceRaster::from_levels(w, h, data.to_vec())
}

pub fn write(path: &Path, raster: &EvidenceRaster) -> Result<()> {
    fs::write(path, encode(raster)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<EvidenceRaster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_roundtrip() {
        let r = EvidenceRaster::from_levels(3, 2, vec![0, 10, 255, 7, 8, 9]).unwrap();
        let bytes = encode(&r);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode(&bytes, Path::new("x.pgm")).unwrap(), r);
    }

    #[test]
    fn comments_are_skipped_and_garbage_rejected() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([1, 2]);
        assert_eq!(decode(&bytes, Path::new("x")).unwrap().levels(), &[1, 2]);
        assert!(decode(b"P2\n1 1\n255\n0", Path::new("x")).is_err());
        assert!(decode(b"P5\n2 2\n255\n\x00", Path::new("x")).is_err());
        assert!(decode(b"P5\n1 1\n65535\n\x00\x00", Path::new("x")).is_err());
    }
}
