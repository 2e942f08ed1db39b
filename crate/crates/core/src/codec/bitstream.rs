//! Container layout (integers little-endian):
//!
//! ```text
//! "RLV1" version:u8 flags:u8 width:u32 height:u32 crop_w:u32 crop_h:u32
//! frame_count:u32 gop_mode:u8 N:u8 M:u8 lambda_id:u8 model_hash:u64
//! then per frame, in coding order:
//!   'I' payload_len:u32 payload
//!   'P' motion_len:u32 motion residual_len:u32 residual
//! ```

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RLV1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 38;

/// `flags` bit 0: three-channel frames.
pub const FLAG_RGB: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GopMode {
    Uni = 0,
    Bi = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub flags: u8,
    pub width: u32,
    pub height: u32,
    pub crop_w: u32,
    pub crop_h: u32,
    pub frame_count: u32,
    pub gop_mode: GopMode,
    pub n: u8,
    pub m: u8,
    pub lambda_id: u8,
    pub model_hash: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrameRecord {
    I { payload: Vec<u8> },
    P { motion: Vec<u8>, residual: Vec<u8> },
}

impl FrameRecord {
    pub fn type_byte(&self) -> u8 {
        match self {
            FrameRecord::I { .. } => b'I',
            FrameRecord::P { .. } => b'P',
        }
    }

    /// Bytes this record occupies in the container.
    pub fn encoded_len(&self) -> usize {
        match self {
            FrameRecord::I { payload } => 5 + payload.len(),
            FrameRecord::P { motion, residual } => 9 + motion.len() + residual.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub records: Vec<FrameRecord>,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "bitstream",
        detail: detail.into(),
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(fmt_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn chunk(&mut self) -> Result<Vec<u8>> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
}

impl Header {
    pub fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.push(self.flags);
        for v in [self.width, self.height, self.crop_w, self.crop_h, self.frame_count] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&[self.gop_mode as u8, self.n, self.m, self.lambda_id]);
        out.extend_from_slice(&self.model_hash.to_le_bytes());
    }

    fn read(r: &mut Reader) -> Result<Self> {
        if r.take(4)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let flags = r.u8()?;
        let (width, height, crop_w, crop_h, frame_count) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let gop_mode = match r.u8()? {
            0 => GopMode::Uni,
            1 => GopMode::Bi,
            g => return Err(fmt_err(format!("unknown GOP mode {g}"))),
        };
        let (n, m, lambda_id) = (r.u8()?, r.u8()?, r.u8()?);
        let model_hash = r.u64()?;
        if crop_w > width || crop_h > height {
            return Err(fmt_err("crop exceeds coded size"));
        }
        Ok(Self {
            version,
            flags,
            width,
            height,
            crop_w,
            crop_h,
            frame_count,
            gop_mode,
            n,
            m,
            lambda_id,
            model_hash,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut Reader { data: bytes, pos: 0 })
    }

    pub fn channels(&self) -> usize {
        if self.flags & FLAG_RGB != 0 {
            3
        } else {
            1
        }
    }
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        self.header.write(&mut out);
        for rec in &self.records {
            out.push(rec.type_byte());
            match rec {
                FrameRecord::I { payload } => {
                    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                    out.extend_from_slice(payload);
                }
                FrameRecord::P { motion, residual } => {
                    out.extend_from_slice(&(motion.len() as u32).to_le_bytes());
                    out.extend_from_slice(motion);
                    out.extend_from_slice(&(residual.len() as u32).to_le_bytes());
                    out.extend_from_slice(residual);
                }
            }
        }
        out
    }

    /// Serialized size in bytes.
    pub fn len(&self) -> usize {
        HEADER_LEN + self.records.iter().map(FrameRecord::encoded_len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { data: bytes, pos: 0 };
        let header = Header::read(&mut r)?;
        let mut records = Vec::with_capacity(header.frame_count as usize);
        for i in 0..header.frame_count {
            let rec = match r.u8()? {
                b'I' => FrameRecord::I { payload: r.chunk()? },
                b'P' => FrameRecord::P {
                    motion: r.chunk()?,
                    residual: r.chunk()?,
                },
                t => return Err(fmt_err(format!("record {i}: unknown frame type {t:#04x}"))),
            };
            records.push(rec);
        }
        if r.pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, records })
    }
}
