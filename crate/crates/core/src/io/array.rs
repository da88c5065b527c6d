use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use num_complex::Complex64;

use super::{read_bytes, write_atomic, IoError, Result};

const MAGIC: [u8; 4] = *b"PACS";
pub const PACS_VERSION: u16 = 1;

/// Typed payload of a PACS file, row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    /// Complex double, stored interleaved (re, im).
    C64(Vec<Complex64>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::C64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::C64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn elem_size(code: u8) -> Result<usize> {
    match code {
        0 => Ok(4),
        1 => Ok(8),
        2 => Ok(16),
        c => Err(IoError::BadDtype(c)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PacsArray {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl PacsArray {
    pub fn new(dims: Vec<usize>, data: ArrayData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(IoError::Parse(format!(
                "dims {dims:?} hold {n} values but {} were given",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(IoError::Parse(format!("too many dimensions ({})", dims.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_c64(a: &ArrayD<Complex64>) -> Self {
        Self {
            dims: a.shape().to_vec(),
            data: ArrayData::C64(a.iter().copied().collect()),
        }
    }

    pub fn into_c64_3(self) -> Result<Array3<Complex64>> {
        let ArrayData::C64(v) = self.data else {
            return Err(IoError::Parse("expected a complex array".into()));
        };
        let [a, b, c] = self.dims[..] else {
            return Err(IoError::Parse(format!("expected 3 dims, found {:?}", self.dims)));
        };
        Array3::from_shape_vec((a, b, c), v).map_err(|e| IoError::Parse(e.to_string()))
    }

    pub fn into_f64(self) -> Result<Vec<f64>> {
        match self.data {
            ArrayData::F64(v) => Ok(v),
            _ => Err(IoError::Parse("expected an f64 array".into())),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            ArrayData::F32(v) => Ok(v),
            _ => Err(IoError::Parse("expected an f32 array".into())),
        }
    }

    pub fn into_dyn_f64(self) -> Result<ArrayD<f64>> {
        let dims = self.dims.clone();
        ArrayD::from_shape_vec(IxDyn(&dims), self.into_f64()?).map_err(|e| IoError::Parse(e.to_string()))
    }
}

/// Header: magic, u16 version, u8 dtype, u8 ndim, u64 dims; then the payload.
/// All integers and values little-endian.
pub fn encode_array(a: &PacsArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * a.dims.len() + a.data.len() * 16);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&PACS_VERSION.to_le_bytes());
    out.push(a.data.code());
    out.push(a.dims.len() as u8);
    for &d in &a.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &a.data {
        ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::C64(v) => v.iter().for_each(|z| {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }),
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let s = bytes.get(*at..*at + n).ok_or(IoError::TruncatedPayload {
        expected: *at + n,
        found: bytes.len(),
    })?;
    *at += n;
    Ok(s)
}

pub fn decode_array(bytes: &[u8]) -> Result<PacsArray> {
    let mut at = 0;
    let magic: [u8; 4] = take(bytes, &mut at, 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(IoError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(take(bytes, &mut at, 2)?.try_into().unwrap());
    if version != PACS_VERSION {
        return Err(IoError::BadVersion {
            found: version,
            expected: PACS_VERSION,
        });
    }
    let code = take(bytes, &mut at, 1)?[0];
    let size = elem_size(code)?;
    let ndim = take(bytes, &mut at, 1)?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap());
        dims.push(usize::try_from(d).map_err(|_| IoError::Parse(format!("dimension {d} too large")))?);
    }
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(size))
        .ok_or_else(|| IoError::Parse(format!("dims {dims:?} overflow")))?;
    let payload = &bytes[at..];
    if payload.len() != n {
        return Err(IoError::TruncatedPayload {
            expected: n,
            found: payload.len(),
        });
    }
    let data = match code {
        0 => ArrayData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        1 => ArrayData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        _ => ArrayData::C64(
            payload
                .chunks_exact(16)
                .map(|c| {
                    Complex64::new(
                        f64::from_le_bytes(c[..8].try_into().unwrap()),
                        f64::from_le_bytes(c[8..].try_into().unwrap()),
                    )
                })
                .collect(),
        ),
    };
    Ok(PacsArray { dims, data })
}

pub fn write_array(path: &Path, a: &PacsArray) -> Result<()> {
    write_atomic(path, &encode_array(a))
}

pub fn read_array(path: &Path) -> Result<PacsArray> {
    decode_array(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let a = PacsArray::new(vec![2], ArrayData::F64(vec![1.0, -2.0])).unwrap();
        let b = encode_array(&a);
        assert_eq!(&b[..4], b"PACS");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(b[7], 1);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 32);
    }

    #[test]
    fn complex_is_interleaved() {
        let a = PacsArray::new(vec![1, 1], ArrayData::C64(vec![Complex64::new(3.0, -4.0)])).unwrap();
        let b = encode_array(&a);
        assert_eq!(&b[24..32], &3.0f64.to_le_bytes());
        assert_eq!(&b[32..40], &(-4.0f64).to_le_bytes());
    }

    #[test]
    fn corrupt_inputs() {
        let a = PacsArray::new(vec![2, 3], ArrayData::F32(vec![0.5; 6])).unwrap();
        let mut b = encode_array(&a);
        assert!(matches!(decode_array(&b[..b.len() - 1]), Err(IoError::TruncatedPayload { .. })));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode_array(&extra), Err(IoError::TruncatedPayload { .. })));
        let mut dims = b.clone();
        dims[8] = 3;
        assert!(matches!(decode_array(&dims), Err(IoError::TruncatedPayload { .. })));
        let mut ver = b.clone();
        ver[4] = 9;
        assert!(matches!(decode_array(&ver), Err(IoError::BadVersion { found: 9, .. })));
        let mut dt = b.clone();
        dt[6] = 7;
        assert!(matches!(decode_array(&dt), Err(IoError::BadDtype(7))));
        b[0] = b'X';
        assert!(matches!(decode_array(&b), Err(IoError::BadMagic { .. })));
        assert!(matches!(decode_array(b"PA"), Err(IoError::TruncatedPayload { .. })));
        assert!(PacsArray::new(vec![2, 2], ArrayData::F32(vec![0.0; 3])).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/a.pacs");
        let a = PacsArray::new(vec![0, 4], ArrayData::F64(vec![])).unwrap();
        write_array(&path, &a).unwrap();
        assert_eq!(read_array(&path).unwrap(), a);
        assert!(!dir.path().join("sub/a.pacs.tmp").exists());
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(v in proptest::collection::vec(any::<u32>(), 0..64)) {
            let data: Vec<f32> = v.iter().map(|&b| f32::from_bits(b)).collect();
            let a = PacsArray::new(vec![data.len()], ArrayData::F32(data.clone())).unwrap();
            let ArrayData::F32(back) = decode_array(&encode_array(&a)).unwrap().data else { unreachable!() };
            prop_assert!(back.iter().zip(&data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        #[test]
        fn c64_round_trip(re in proptest::collection::vec(-1e6f64..1e6, 1..20), im in -1e3f64..1e3) {
            let data: Vec<Complex64> = re.iter().map(|&r| Complex64::new(r, im * r)).collect();
            let a = PacsArray::new(vec![1, data.len(), 1], ArrayData::C64(data)).unwrap();
            let back = decode_array(&encode_array(&a)).unwrap();
            prop_assert_eq!(&back, &a);
            prop_assert_eq!(back.into_c64_3().unwrap().dim(), (1, re.len(), 1));
        }
    }
}
