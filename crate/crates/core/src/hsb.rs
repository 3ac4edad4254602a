//! HSB: a minimal little-endian container for hyperspectral cubes.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "HSB1"
//! 4       12          u32 height, width, bands
//! 16      16          f64 lambda_min, lambda_max (nm)
//! 32      4*H*W*D     f32 values, (h, w, d) order, d fastest
//! ```
//!
//! Values are stored as f32, so a round trip is bit-exact for cubes whose
//! values are f32-representable and rounds to nearest otherwise.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optics::HsiCube;

pub const MAGIC: &[u8; 4] = b"HSB1";
pub const HEADER_LEN: usize = 32;

pub fn encoded_len(h: usize, w: usize, d: usize) -> usize {
    HEADER_LEN + 4 * h * w * d
}

pub fn encode(cube: &HsiCube) -> Result<Vec<u8>> {
    let (h, w, d) = cube.dims();
    let mut out = Vec::with_capacity(encoded_len(h, w, d));
    out.extend_from_slice(MAGIC);
    for n in [h, w, d] {
        let n = u32::try_from(n).map_err(|_| Error::format(4, format!("dimension {n} exceeds u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    let (lo, hi) = cube.range();
    out.extend_from_slice(&lo.to_le_bytes());
    out.extend_from_slice(&hi.to_le_bytes());
    for &v in cube.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("four bytes"))
}

fn f64_at(bytes: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(bytes[off..off + 8].try_into().expect("eight bytes"))
}

pub fn decode(bytes: &[u8]) -> Result<HsiCube> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HSB1\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    let dims = [u32_at(bytes, 4), u32_at(bytes, 8), u32_at(bytes, 12)];
    if let Some(i) = dims.iter().position(|&n| n == 0) {
        return Err(Error::format(4 + 4 * i as u64, "zero dimension"));
    }
    let payload = dims
        .iter()
        .try_fold(4u64, |acc, &n| acc.checked_mul(n as u64))
        .and_then(|p| p.checked_add(HEADER_LEN as u64))
        .filter(|&total| usize::try_from(total).is_ok())
        .ok_or_else(|| Error::format(4, format!("dimensions {dims:?} overflow")))?;
    let expected = payload as usize;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let range = (f64_at(bytes, 16), f64_at(bytes, 24));
    if !(range.0.is_finite() && range.1.is_finite() && range.0 < range.1) {
        return Err(Error::format(16, format!("invalid wavelength range {range:?}")));
    }
    let mut data = Vec::with_capacity((expected - HEADER_LEN) / 4);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("four bytes"));
        if !v.is_finite() {
            return Err(Error::format((HEADER_LEN + 4 * i) as u64, "non-finite value"));
        }
        data.push(v as f64);
    }
    let [h, w, d] = dims.map(|n| n as usize);
    HsiCube::new(h, w, d, data, range)
}

pub fn write(path: &Path, cube: &HsiCube) -> Result<()> {
    let bytes = encode(cube)?;
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read(path: &Path) -> Result<HsiCube> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random cube with f32-representable values.
    fn cube(seed: u64, h: usize, w: usize, d: usize) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * d).map(|_| rng.gen::<f32>() as f64).collect();
        HsiCube::new(h, w, d, data, (400.0, 700.0)).unwrap()
    }

    fn offset_of(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn single_voxel_layout() {
        let c = HsiCube::new(1, 1, 1, vec![0.5], (450.0, 650.0)).unwrap();
        let bytes = encode(&c).unwrap();
        assert_eq!(bytes.len(), 4 + 12 + 16 + 4);
        assert_eq!(&bytes[..4], b"HSB1");
        assert_eq!(&bytes[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[16..24], &450f64.to_le_bytes());
        assert_eq!(&bytes[32..], &0.5f32.to_le_bytes());
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hsb");
        let c = cube(1, 4, 4, 3);
        write(&path, &c).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back.dims(), c.dims());
        assert!(back.data().iter().zip(c.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.range(), c.range());
    }

    #[test]
    fn errors_carry_offsets() {
        let good = encode(&cube(2, 2, 3, 4)).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(decode(&bad).unwrap_err()), 0);

        let short = &good[..good.len() - 5];
        let e = decode(short).unwrap_err();
        assert!(e.to_string().contains(&format!("expected {} bytes, found {}", good.len(), short.len())));
        assert_eq!(offset_of(e), short.len() as u64);

        assert_eq!(offset_of(decode(&good[..20]).unwrap_err()), 20);

        let mut zero = good.clone();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(offset_of(decode(&zero).unwrap_err()), 8);

        let mut huge = good.clone();
        for i in 0..3 {
            huge[4 + 4 * i..8 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(decode(&huge).is_err());

        let mut nan = good.clone();
        nan[HEADER_LEN + 8..HEADER_LEN + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(offset_of(decode(&nan).unwrap_err()), (HEADER_LEN + 8) as u64);

        let mut range = good;
        range[24..32].copy_from_slice(&100f64.to_le_bytes());
        assert_eq!(offset_of(decode(&range).unwrap_err()), 16);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read(Path::new("/nonexistent/x.hsb")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, d in 1usize..6) {
            let c = cube(seed, h, w, d);
            let bytes = encode(&c).unwrap();
            prop_assert_eq!(bytes.len(), encoded_len(h, w, d));
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), bytes);
            prop_assert_eq!(back, c);
        }
    }
}
