//! On-disk container: fixed header, the hyper stream, then ten slice streams.

use crate::error::{format_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"FFAB";
pub const FORMAT_VERSION: u8 = 1;
pub const NUM_SLICES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub flags: u8,
    pub width: u32,
    pub height: u32,
    pub down_factor: u8,
    pub latent_channels: u16,
    pub model_hash: u64,
}

impl Header {
    /// Bytes taken by magic, version and the fields above.
    pub const LEN: usize = 4 + 1 + 1 + 4 + 4 + 1 + 2 + 8;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub z: Vec<u8>,
    pub y: Vec<Vec<u8>>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.y.len() != NUM_SLICES {
            return Err(Error::Contract(format!("expected {NUM_SLICES} slice streams, got {}", self.y.len())));
        }
        let h = &self.header;
        if h.width == 0 || h.height == 0 {
            return Err(Error::Contract("image dimensions must be positive".into()));
        }
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(h.flags);
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.push(h.down_factor);
        out.extend_from_slice(&h.latent_channels.to_le_bytes());
        out.extend_from_slice(&h.model_hash.to_le_bytes());
        for seg in std::iter::once(&self.z).chain(&self.y) {
            let len = u32::try_from(seg.len()).map_err(|_| Error::Contract("segment longer than 4 GiB".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(seg);
        }
        Ok(out)
    }

    /// Serialized size in bytes.
    pub fn len(&self) -> usize {
        Header::LEN + 4 * (1 + self.y.len()) + self.z.len() + self.y.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let version = r.u8("version")?;
        if version != FORMAT_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let flags = r.u8("flags")?;
        let width = r.u32("width")?;
        let height = r.u32("height")?;
        if width == 0 || height == 0 {
            return Err(format_err(6, format!("image dimensions {width}x{height} must be positive")));
        }
        let down_factor = r.u8("down factor")?;
        let latent_channels = u16::from_le_bytes(r.take(2, "latent channels")?.try_into().unwrap());
        let model_hash = u64::from_le_bytes(r.take(8, "model hash")?.try_into().unwrap());
        let header = Header { flags, width, height, down_factor, latent_channels, model_hash };
        let z = r.segment("hyper")?;
        let y = (0..NUM_SLICES).map(|i| r.segment(&format!("slice {i}"))).collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(format_err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Bitstream { header, z, y })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(format_err(self.pos, format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn segment(&mut self, what: &str) -> Result<Vec<u8>> {
        let n = self.u32(what)? as usize;
        Ok(self.take(n, what)?.to_vec())
    }
}
