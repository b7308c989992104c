//! `GSTK1` weight container.
//!
//! ```text
//! "GSTK1"
//! repeated until EOF:
//!   name length   u32 LE
//!   name          UTF-8 bytes
//!   rank          u32 LE
//!   dims          rank × u32 LE
//!   payload       product(dims) × f64 LE, row-major
//! ```

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"GSTK1";

pub fn write_records<'a, W: Write>(mut out: W, records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    out.write_all(MAGIC)?;
    for (name, tensor) in records {
        write_u32(&mut out, name.len())?;
        out.write_all(name.as_bytes())?;
        write_u32(&mut out, tensor.rank())?;
        for &d in tensor.shape() {
            write_u32(&mut out, d)?;
        }
        for v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 5];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("missing GSTK1 header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, expected GSTK1".into()));
    }
    let mut records = Vec::new();
    loop {
        let name_len = match read_u32(&mut input) {
            Ok(n) => n,
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name = vec![0u8; name_len];
        read_exact(&mut input, &mut name, "record name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
        let rank = read_u32(&mut input).map_err(|_| truncated(&name))?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input).map_err(|_| truncated(&name))?);
        }
        let count: usize = shape.iter().product();
        let mut bytes = vec![0u8; count * 8];
        read_exact(&mut input, &mut bytes, &name)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format(format!("record '{name}': {e}")))?;
        records.push((name, tensor));
    }
    Ok(records)
}

/// Text stored as a rank-1 record, one byte value per element.
pub fn text_record(text: &str) -> Tensor {
    Tensor::vector(text.bytes().map(f64::from).collect())
}

pub fn record_text(t: &Tensor) -> Result<String> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("text record holds non-byte value {v}")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|_| Error::Format("text record is not UTF-8".into()))
}

fn truncated(name: &str) -> Error {
    Error::Format(format!("truncated record '{name}'"))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input.read_exact(buf).map_err(|_| truncated(what))
}

fn write_u32<W: Write>(out: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> std::io::Result<usize> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::matrix(1, 2, vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_records(&mut buf, [("ab", &t)]).unwrap();
        let mut expect = b"GSTK1".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(b"ab");
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-0.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_records(&b"GSTK2"[..]).is_err());
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_records(&mut buf, [("x", &t)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_records(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn text_records_round_trip() {
        let s = "family=LSTM-F\nlstm_units=50\n";
        assert_eq!(record_text(&text_record(s)).unwrap(), s);
    }

    proptest! {
        #[test]
        fn records_round_trip_bit_exact(
            data in prop::collection::vec(any::<f64>(), 1..40),
            name in "[a-z_.0-9]{1,16}",
        ) {
            let t = Tensor::vector(data);
            let mut buf = Vec::new();
            write_records(&mut buf, [(name.as_str(), &t)]).unwrap();
            let back = read_records(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            let bits: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
            let orig: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, orig);
        }
    }
}
