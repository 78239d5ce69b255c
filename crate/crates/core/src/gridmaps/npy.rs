//! Reading and writing a subset of the numpy `.npy` format.
//!
//! Only little-endian `f4`, `f8` and `u1` payloads in C order are supported.
//! Files are written as version 1.0 with the header padded to a multiple of
//! 64 bytes, the same layout `numpy.save` produces.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

/// The npy magic string.
pub const MAGIC: [u8; 6] = *b"\x93NUMPY";

const HEADER_ALIGN: usize = 64;

#[derive(Debug, Error)]
pub enum NpyError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed npy header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype descriptor {0:?} (expected '<f4', '<f8' or '|u1')")]
    UnsupportedDtype(String),
    #[error("fortran_order=True is not supported")]
    FortranOrder,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload has {extra} trailing bytes past the declared shape")]
    TrailingBytes { extra: usize },
    #[error("shape {shape:?} holds {expected} elements but payload has {found}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
}

impl NpyError {
    fn io(path: &Path, source: io::Error) -> Self {
        NpyError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Element type of an array file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
            Dtype::U8 => "|u1",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn from_descr(descr: &str) -> Result<Self, NpyError> {
        match descr {
            "<f4" => Ok(Dtype::F32),
            "<f8" => Ok(Dtype::F64),
            "|u1" | "<u1" => Ok(Dtype::U8),
            other => Err(NpyError::UnsupportedDtype(other.to_string())),
        }
    }
}

/// Typed payload of an array file.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
            ArrayData::U8(_) => Dtype::U8,
        }
    }

    /// Widens any payload to f64. Exact for every supported dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

/// An n-dimensional C-order array as stored in an `.npy` file.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    shape: Vec<usize>,
    data: ArrayData,
}

impl NpyArray {
    pub fn new(shape: Vec<usize>, data: ArrayData) -> Result<Self, NpyError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NpyError::ShapeMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &ArrayData {
        &self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn into_parts(self) -> (Vec<usize>, ArrayData) {
        (self.shape, self.data)
    }
}

/// Loads an array file from disk.
pub fn load_array(path: impl AsRef<Path>) -> Result<NpyArray, NpyError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NpyError::io(path, e))?;
    decode(&bytes)
}

/// Saves an array file to disk.
pub fn save_array(path: impl AsRef<Path>, array: &NpyArray) -> Result<(), NpyError> {
    let path = path.as_ref();
    let bytes = encode(array);
    let mut file = fs::File::create(path).map_err(|e| NpyError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| NpyError::io(path, e))
}

/// Reads an array from a stream positioned at the start of the file.
pub fn read_array<R: Read>(reader: &mut R) -> Result<NpyArray, NpyError> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| NpyError::Io {
            path: "<stream>".into(),
            source: e,
        })?;
    decode(&bytes)
}

/// Decodes a complete `.npy` byte buffer.
pub fn decode(bytes: &[u8]) -> Result<NpyArray, NpyError> {
    if bytes.len() < 10 || bytes[..6] != MAGIC {
        return Err(NpyError::MalformedHeader("missing magic string".into()));
    }
    let major = bytes[6];
    let (header_len, offset) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(NpyError::MalformedHeader("short header length".into()));
            }
            let len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (len as usize, 12)
        }
        v => return Err(NpyError::MalformedHeader(format!("unknown version {v}"))),
    };
    let end = offset + header_len;
    if bytes.len() < end {
        return Err(NpyError::MalformedHeader("header extends past end of file".into()));
    }
    let text = std::str::from_utf8(&bytes[offset..end])
        .map_err(|_| NpyError::MalformedHeader("header is not valid text".into()))?;
    let header = parse_header(text)?;
    if header.fortran_order {
        return Err(NpyError::FortranOrder);
    }
    let count: usize = header.shape.iter().product();
    let payload = &bytes[end..];
    let expected = count * header.dtype.size();
    if payload.len() < expected {
        return Err(NpyError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(NpyError::TrailingBytes {
            extra: payload.len() - expected,
        });
    }
    let data = match header.dtype {
        Dtype::F32 => ArrayData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        Dtype::F64 => ArrayData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ),
        Dtype::U8 => ArrayData::U8(payload.to_vec()),
    };
    NpyArray::new(header.shape, data)
}

/// Encodes an array as a version 1.0 `.npy` byte buffer.
pub fn encode(array: &NpyArray) -> Vec<u8> {
    let shape = match array.shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", array.shape[0]),
        _ => format!(
            "({})",
            array
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        array.dtype().descr(),
        shape
    );
    // magic(6) + version(2) + length(2) + dict + '\n' must be 64-aligned
    let unpadded = 10 + dict.len() + 1;
    let pad = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len() + array.data.len() * array.dtype().size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    match &array.data {
        ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::U8(v) => out.extend_from_slice(v),
    }
    out
}

struct Header {
    dtype: Dtype,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parses the python-literal dict of an npy header.
fn parse_header(text: &str) -> Result<Header, NpyError> {
    let bad = |msg: &str| NpyError::MalformedHeader(msg.to_string());
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| bad("header is not a dict"))?;

    let mut descr = None;
    let mut fortran = None;
    let mut shape = None;
    let mut rest = body.trim_start();
    while !rest.is_empty() {
        let (key, after) = parse_quoted(rest).ok_or_else(|| bad("expected quoted key"))?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| bad("expected ':' after key"))?
            .trim_start();
        let after = match key {
            "descr" => {
                let (value, after) =
                    parse_quoted(after).ok_or_else(|| bad("descr must be a string"))?;
                descr = Some(value.to_string());
                after
            }
            "fortran_order" => {
                if let Some(a) = after.strip_prefix("False") {
                    fortran = Some(false);
                    a
                } else if let Some(a) = after.strip_prefix("True") {
                    fortran = Some(true);
                    a
                } else {
                    return Err(bad("fortran_order must be True or False"));
                }
            }
            "shape" => {
                let inner_end = after.find(')').ok_or_else(|| bad("unterminated shape"))?;
                let inner = after
                    .strip_prefix('(')
                    .ok_or_else(|| bad("shape must be a tuple"))?;
                let inner = &inner[..inner_end - 1];
                let dims = inner
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape dimension")))
                    .collect::<Result<Vec<_>, _>>()?;
                shape = Some(dims);
                &after[inner_end + 1..]
            }
            other => return Err(bad(&format!("unexpected key '{other}'"))),
        };
        let after = after.trim_start();
        rest = match after.strip_prefix(',') {
            Some(r) => r.trim_start(),
            None if after.is_empty() => after,
            None => return Err(bad("expected ',' between entries")),
        };
    }

    let descr = descr.ok_or_else(|| bad("missing 'descr'"))?;
    Ok(Header {
        dtype: Dtype::from_descr(&descr)?,
        fortran_order: fortran.ok_or_else(|| bad("missing 'fortran_order'"))?,
        shape: shape.ok_or_else(|| bad("missing 'shape'"))?,
    })
}

fn parse_quoted(s: &str) -> Option<(&str, &str)> {
    let quote = s.chars().next()?;
    if quote != '\'' && quote != '"' {
        return None;
    }
    let body = &s[1..];
    let end = body.find(quote)?;
    Some((&body[..end], &body[end + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_round_trip() {
        let a = NpyArray::new(vec![2, 3], ArrayData::F64(vec![0.0; 6])).unwrap();
        let back = decode(&encode(&a)).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.shape(), &[2, 3]);
    }

    #[test]
    fn header_is_aligned_and_numpy_shaped() {
        let a = NpyArray::new(vec![3], ArrayData::U8(vec![0, 1, 2])).unwrap();
        let bytes = encode(&a);
        let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        let text = std::str::from_utf8(&bytes[10..10 + hlen]).unwrap();
        assert!(text.starts_with("{'descr': '|u1', 'fortran_order': False, 'shape': (3,), }"));
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn f32_bit_pattern_preserved() {
        let v = 0.1f32;
        let a = NpyArray::new(vec![1], ArrayData::F32(vec![v])).unwrap();
        match decode(&encode(&a)).unwrap().data() {
            ArrayData::F32(x) => assert_eq!(x[0].to_bits(), v.to_bits()),
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let a = NpyArray::new(vec![2, 3], ArrayData::F64(vec![1.0; 6])).unwrap();
        let mut bytes = encode(&a);
        bytes.truncate(bytes.len() - 8);
        assert!(matches!(
            decode(&bytes),
            Err(NpyError::Truncated { expected: 48, found: 40 })
        ));
    }

    #[test]
    fn shape_payload_mismatch() {
        assert!(matches!(
            NpyArray::new(vec![2, 2], ArrayData::F32(vec![0.0; 3])),
            Err(NpyError::ShapeMismatch { expected: 4, found: 3, .. })
        ));
    }

    #[test]
    fn fortran_order_rejected() {
        let a = NpyArray::new(vec![2, 2], ArrayData::F64(vec![0.0; 4])).unwrap();
        let mut bytes = encode(&a);
        let pos = bytes
            .windows(5)
            .position(|w| w == b"False")
            .unwrap();
        bytes.splice(pos..pos + 5, b"True ".iter().copied());
        assert!(matches!(decode(&bytes), Err(NpyError::FortranOrder)));
    }

    #[test]
    fn unsupported_dtype() {
        let a = NpyArray::new(vec![1], ArrayData::F64(vec![0.0])).unwrap();
        let mut bytes = encode(&a);
        let pos = bytes.windows(3).position(|w| w == b"<f8").unwrap();
        bytes[pos + 1] = b'i';
        assert!(matches!(decode(&bytes), Err(NpyError::UnsupportedDtype(d)) if d == "<i8"));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            decode(b"NOTNUMPY\x01\x00"),
            Err(NpyError::MalformedHeader(_))
        ));
    }

    #[test]
    fn parses_numpy_written_header() {
        // header exactly as numpy 2.x writes it for np.zeros((2, 3), '<f4')
        let dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }";
        let mut header = dict.to_string();
        while !(10 + header.len() + 1).is_multiple_of(64) {
            header.push(' ');
        }
        header.push('\n');
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&[1, 0]);
        bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
        bytes.extend_from_slice(header.as_bytes());
        bytes.extend_from_slice(&[0u8; 24]);
        let a = decode(&bytes).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        assert_eq!(a.dtype(), Dtype::F32);
    }

    fn arb_array() -> impl Strategy<Value = NpyArray> {
        prop::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            let s1 = shape.clone();
            let s2 = shape.clone();
            prop_oneof![
                prop::collection::vec(any::<f32>(), n)
                    .prop_map(move |v| NpyArray::new(s1.clone(), ArrayData::F32(v)).unwrap()),
                prop::collection::vec(any::<f64>(), n)
                    .prop_map(move |v| NpyArray::new(s2.clone(), ArrayData::F64(v)).unwrap()),
                prop::collection::vec(any::<u8>(), n)
                    .prop_map(move |v| NpyArray::new(shape.clone(), ArrayData::U8(v)).unwrap()),
            ]
        })
    }

    fn bits(a: &NpyArray) -> Vec<u64> {
        match a.data() {
            ArrayData::F32(v) => v.iter().map(|x| u64::from(x.to_bits())).collect(),
            ArrayData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
            ArrayData::U8(v) => v.iter().map(|&x| u64::from(x)).collect(),
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(a in arb_array()) {
            let back = decode(&encode(&a)).unwrap();
            prop_assert_eq!(back.shape(), a.shape());
            prop_assert_eq!(back.dtype(), a.dtype());
            prop_assert_eq!(bits(&back), bits(&a));
        }
    }
}
