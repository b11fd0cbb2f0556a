//! Binary dump formats for datasets and MC ensembles. All integers and
//! doubles are little-endian.
//!
//! Dataset dump:
//!
//! ```text
//! offset  size      field
//! 0       8         magic "MUDADS01"
//! 8       8         N (u64)
//! 16      8         D (u64)
//! 24      8         K (u64)
//! 32      4         L = domain_id byte length (u32)
//! 36      L         domain_id, UTF-8
//! 36+L    1         has_labels (0 or 1)
//! 37+L    8·N·D     inputs, row-major f64
//! ...     4·N       labels as u32 (only when has_labels = 1)
//! ```
//!
//! Ensemble dump:
//!
//! ```text
//! 0       8         magic "MUDAEN01"
//! 8       8         M (u64)
//! 16      8         N (u64)
//! 24      8         K (u64)
//! 32      8         seed (u64)
//! 40      8·M·N·K   scores, row-major [M, N, K] f64
//! ```

use std::path::Path;

use crate::data::DomainDataset;
use crate::error::{MudaError, Result};
use crate::ndcore::Tensor;
use crate::uncertainty::McEnsemble;

pub const DATASET_MAGIC: &[u8; 8] = b"MUDADS01";
pub const ENSEMBLE_MAGIC: &[u8; 8] = b"MUDAEN01";

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(MudaError::Parse {
                offset: self.bytes.len(),
                message: format!("truncated {what}"),
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        usize::try_from(self.u64(what)?).map_err(|_| MudaError::Parse {
            offset: at,
            message: format!("{what} does not fit in memory"),
        })
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count.checked_mul(8).ok_or(MudaError::Parse {
            offset: self.pos,
            message: format!("{what} size overflows"),
        })?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != expected {
            return Err(MudaError::Parse {
                offset: 0,
                message: format!("bad magic, expected {}", String::from_utf8_lossy(expected)),
            });
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(MudaError::Parse {
                offset: self.pos,
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn encode_dataset(ds: &DomainDataset) -> Vec<u8> {
    let id = ds.domain_id().as_bytes();
    let mut out = Vec::with_capacity(37 + id.len() + 8 * ds.inputs().len() + 4 * ds.len());
    out.extend_from_slice(DATASET_MAGIC);
    for v in [ds.len(), ds.dim(), ds.num_classes()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    out.push(ds.labels().is_some() as u8);
    for v in ds.inputs().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = ds.labels() {
        for &l in labels {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<DomainDataset> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(DATASET_MAGIC)?;
    let n = r.usize("N")?;
    let d = r.usize("D")?;
    let k = r.usize("K")?;
    let id_len = u32::from_le_bytes(r.take(4, "domain id length")?.try_into().expect("4 bytes")) as usize;
    let id_at = r.pos;
    let id = std::str::from_utf8(r.take(id_len, "domain id")?)
        .map_err(|_| MudaError::Parse {
            offset: id_at,
            message: "domain id is not UTF-8".into(),
        })?
        .to_string();
    let flag_at = r.pos;
    let has_labels = match r.take(1, "label flag")?[0] {
        0 => false,
        1 => true,
        other => {
            return Err(MudaError::Parse {
                offset: flag_at,
                message: format!("label flag must be 0 or 1, got {other}"),
            })
        }
    };
    let count = n.checked_mul(d).ok_or(MudaError::Parse {
        offset: 8,
        message: "N·D overflows".into(),
    })?;
    let inputs = r.f64s(count, "inputs")?;
    let labels = if has_labels {
        let raw = r.take(n.saturating_mul(4), "labels")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
                .collect(),
        )
    } else {
        None
    };
    r.finish()?;
    DomainDataset::new(Tensor::new(vec![n, d], inputs)?, labels, id, k)
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &DomainDataset) -> Result<()> {
    std::fs::write(path.as_ref(), encode_dataset(ds)).map_err(|e| MudaError::io(&path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| MudaError::io(&path, e))?;
    decode_dataset(&bytes)
}

pub fn encode_ensemble(e: &McEnsemble, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + 8 * e.scores().len());
    out.extend_from_slice(ENSEMBLE_MAGIC);
    for v in [e.passes() as u64, e.samples() as u64, e.classes() as u64, seed] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in e.scores().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Returns the ensemble and the seed recorded in the header.
pub fn decode_ensemble(bytes: &[u8]) -> Result<(McEnsemble, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    r.magic(ENSEMBLE_MAGIC)?;
    let m = r.usize("M")?;
    let n = r.usize("N")?;
    let k = r.usize("K")?;
    let seed = r.u64("seed")?;
    let count = m
        .checked_mul(n)
        .and_then(|v| v.checked_mul(k))
        .ok_or(MudaError::Parse {
            offset: 8,
            message: "M·N·K overflows".into(),
        })?;
    let scores = r.f64s(count, "scores")?;
    r.finish()?;
    Ok((McEnsemble::new(Tensor::new(vec![m, n, k], scores)?)?, seed))
}

pub fn write_ensemble(path: impl AsRef<Path>, e: &McEnsemble, seed: u64) -> Result<()> {
    std::fs::write(path.as_ref(), encode_ensemble(e, seed)).map_err(|e| MudaError::io(&path, e))
}

pub fn read_ensemble(path: impl AsRef<Path>) -> Result<(McEnsemble, u64)> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| MudaError::io(&path, e))?;
    decode_ensemble(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dataset_round_trip(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..20),
            labelled in any::<bool>(),
            id in "[a-z+_]{0,12}",
        ) {
            let labels = labelled.then(|| (0..rows.len()).map(|i| i % 4).collect());
            let ds = DomainDataset::new(Tensor::from_rows(&rows).unwrap(), labels, id, 4).unwrap();
            prop_assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);
        }
    }

    #[test]
    fn ensemble_round_trip_and_header() {
        let e = McEnsemble::new(Tensor::new(vec![2, 1, 2], vec![0.25, 0.75, 0.5, 0.5]).unwrap()).unwrap();
        let bytes = encode_ensemble(&e, 42);
        assert_eq!(&bytes[..8], b"MUDAEN01");
        assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 42);
        let (back, seed) = decode_ensemble(&bytes).unwrap();
        assert_eq!((back, seed), (e, 42));
        assert!(matches!(
            decode_ensemble(&bytes[..bytes.len() - 1]),
            Err(MudaError::Parse { .. })
        ));
    }
}
