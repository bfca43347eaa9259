use super::ImageDataset;
use crate::error::IdxError;

/// Unsigned-byte data, three dimensions.
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: u32,
    pub dims: Vec<u32>,
}

impl IdxHeader {
    /// Reads the magic and dimension words. A one-dimensional file (labels)
    /// or a non-byte data type is a bad magic; any other rank is a dimension
    /// error.
    pub fn parse(bytes: &[u8]) -> Result<(Self, &[u8]), IdxError> {
        let word = |i: usize| -> Result<u32, IdxError> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
                .ok_or(IdxError::Length {
                    expected: 4 * i + 4,
                    actual: bytes.len(),
                })
        };
        let magic = word(0)?;
        let ndims = (magic & 0xff) as u8;
        if magic >> 8 != 0x08 || ndims == 1 {
            return Err(IdxError::BadMagic(magic));
        }
        if ndims != 3 {
            return Err(IdxError::DimCount(ndims));
        }
        let dims = (1..=3).map(word).collect::<Result<Vec<_>, _>>()?;
        Ok((Self { magic, dims }, &bytes[16..]))
    }
}

/// Decodes an image IDX file, scaling bytes by `1/255`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageDataset, IdxError> {
    let (header, payload) = IdxHeader::parse(bytes)?;
    let [count, rows, cols] = [0, 1, 2].map(|i| header.dims[i] as usize);
    let expected = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or(IdxError::Length {
            expected: usize::MAX,
            actual: payload.len(),
        })?;
    if payload.len() != expected {
        return Err(IdxError::Length {
            expected,
            actual: payload.len(),
        });
    }
    if expected == 0 {
        return Err(IdxError::Empty);
    }
    Ok(ImageDataset {
        rows,
        cols,
        pixels: payload.iter().map(|&b| b as f64 / 255.0).collect(),
    })
}

/// Inverse of [`parse_idx_images`], quantizing with `round(v·255)`.
pub fn encode_idx_images(ds: &ImageDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.pixels.len());
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    for d in [ds.len(), ds.rows, ds.cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(ds.pixels.iter().map(|v| (v * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend([0, 128, 255, 64]);
        b
    }

    #[test]
    fn twenty_byte_fixture() {
        let bytes = fixture();
        assert_eq!(bytes.len(), 20);
        let ds = parse_idx_images(&bytes).unwrap();
        assert_eq!((ds.len(), ds.rows(), ds.cols()), (1, 2, 2));
        let expect = [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0];
        assert_eq!(ds.pixels(), &expect);
        assert!((ds.pixels()[1] - 0.501_961).abs() < 1e-6);
        assert!((ds.pixels()[3] - 0.250_980).abs() < 1e-6);
        assert_eq!(encode_idx_images(&ds), bytes);
    }

    #[test]
    fn label_file_is_bad_magic() {
        let mut bytes = vec![0, 0, 8, 1, 0, 0, 0, 2];
        bytes.extend([3, 4]);
        let err = parse_idx_images(&bytes).unwrap_err();
        assert_eq!(err, IdxError::BadMagic(2049));
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn wrong_rank_and_type() {
        let mut b = fixture();
        b[3] = 2;
        assert_eq!(parse_idx_images(&b), Err(IdxError::DimCount(2)));
        let mut b = fixture();
        b[2] = 0x0d;
        assert!(matches!(parse_idx_images(&b), Err(IdxError::BadMagic(_))));
    }

    #[test]
    fn short_payload() {
        let mut b = fixture();
        b[7] = 2;
        assert_eq!(
            parse_idx_images(&b),
            Err(IdxError::Length { expected: 8, actual: 4 })
        );
        assert!(matches!(parse_idx_images(&b[..10]), Err(IdxError::Length { .. })));
    }
}
