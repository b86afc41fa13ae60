//! Binary checkpoint: the magic `NSEG1`, then records until end of file.
//! Each record is a little-endian `u64` name length, the UTF-8 name, a `u64`
//! rank, `rank` `u64` dims, and the payload as little-endian `f64`s.

use std::io::{Read, Write};
use std::path::Path;

use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NSEG1";

/// Longest name or rank accepted when reading; guards against garbage input.
const MAX_NAME: u64 = 4096;
const MAX_RANK: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Record {
    pub fn tensor(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    /// Rank-0 record holding one number.
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self {
            name: name.into(),
            dims: Vec::new(),
            data: vec![value],
        }
    }
}

/// Ordered list of records; lookup is by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Record, NnError> {
        self.get(name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing record `{name}`")))
    }

    pub fn scalar(&self, name: &str) -> Result<f64, NnError> {
        let r = self.require(name)?;
        match r.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(NnError::Checkpoint(format!("record `{name}` is not a scalar"))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u64).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.dims.len() as u64).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, NnError> {
        let mut rd = bytes;
        let mut magic = [0u8; 5];
        rd.read_exact(&mut magic)
            .map_err(|_| NnError::Checkpoint("file shorter than the magic".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut records = Vec::new();
        while !rd.is_empty() {
            let name_len = read_u64(&mut rd, "name length")?;
            if name_len > MAX_NAME {
                return Err(NnError::Checkpoint(format!("name length {name_len} too large")));
            }
            let mut name = vec![0u8; name_len as usize];
            rd.read_exact(&mut name)
                .map_err(|_| NnError::Checkpoint("truncated name".into()))?;
            let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("name is not UTF-8".into()))?;
            let rank = read_u64(&mut rd, "rank")?;
            if rank > MAX_RANK {
                return Err(NnError::Checkpoint(format!("record `{name}` has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| read_u64(&mut rd, "dim").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l.checked_mul(8).is_some_and(|b| b <= rd.len()))
                .ok_or_else(|| NnError::Checkpoint(format!("record `{name}` payload truncated")))?;
            let data = rd[..len * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rd = &rd[len * 8..];
            records.push(Record { name, dims, data });
        }
        Ok(Self { records })
    }
}

fn read_u64(rd: &mut &[u8], what: &str) -> Result<u64, NnError> {
    let mut b = [0u8; 8];
    rd.read_exact(&mut b)
        .map_err(|_| NnError::Checkpoint(format!("truncated {what}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), NnError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.encode())?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, NnError> {
    Checkpoint::decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let mut c = Checkpoint::default();
        c.push(Record::tensor("w", vec![2], vec![1.0, -2.5]));
        let bytes = c.encode();
        let mut expected = b"NSEG1".to_vec();
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn rejects_corruption() {
        assert!(Checkpoint::decode(b"NSEG2").is_err());
        let mut c = Checkpoint::default();
        c.push(Record::scalar("adam/t", 3.0));
        let bytes = c.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        assert_eq!(Checkpoint::decode(&bytes).unwrap().scalar("adam/t").unwrap(), 3.0);
        assert!(Checkpoint::decode(b"NSEG1").unwrap().records.is_empty());
    }

    proptest! {
        #[test]
        fn round_trip(recs in proptest::collection::vec(
            ("[a-z./_0-9]{1,12}", proptest::collection::vec(1usize..4, 0..4)), 0..5)) {
            let mut c = Checkpoint::default();
            for (i, (name, dims)) in recs.into_iter().enumerate() {
                let len: usize = dims.iter().product();
                let data = (0..len).map(|j| (i * 31 + j) as f64 * 0.1 - 1.0).collect();
                c.push(Record::tensor(name, dims, data));
            }
            prop_assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
        }
    }
}
