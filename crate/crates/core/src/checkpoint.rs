//! Little-endian binary container shared by model and memory-bank checkpoints.
//!
//! Layout: 4-byte magic, `u32` format version, then a payload of `u32`/`u64`
//! header fields and `f64` blocks written by the caller.

use std::io::Read;

use crate::error::{Error, Result};

pub(crate) const FORMAT_VERSION: u32 = 1;

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn new(magic: &[u8; 4]) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Writer { buf }
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Checks magic and version before handing out the payload.
    pub(crate) fn open(mut bytes: &'a [u8], magic: &[u8; 4], what: &'static str) -> Result<Self> {
        let mut head = [0u8; 4];
        bytes
            .read_exact(&mut head)
            .map_err(|_| Error::Format(format!("{what}: file too short for header")))?;
        if &head != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&head),
                String::from_utf8_lossy(magic)
            )));
        }
        let mut r = Reader { bytes, what };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{what}: unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        Ok(r)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        self.bytes
            .read_exact(&mut out)
            .map_err(|_| Error::Format(format!("{}: truncated file", self.what)))?;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.bytes.len() < n.saturating_mul(8) {
            return Err(Error::Format(format!("{}: truncated data block", self.what)));
        }
        (0..n).map(|_| Ok(f64::from_le_bytes(self.take()?))).collect()
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len()
            )))
        }
    }
}
