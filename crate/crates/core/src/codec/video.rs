//! Raw planar 8-bit video with a JSON sidecar
//! `{"width", "height", "frames", "channels"}`, and edge padding.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::iframe::to_code;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub channels: usize,
}

impl VideoInfo {
    pub fn frame_len(&self) -> usize {
        self.width * self.height * self.channels
    }
}

/// Frames stored back to back, each as `channels` planes of
/// `height x width` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawVideo {
    pub info: VideoInfo,
    pub data: Vec<u8>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl RawVideo {
    pub fn read(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let info: VideoInfo = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::Format {
            what: "video",
            detail: format!("cannot read sidecar {}: {e}", side.display()),
        })?)?;
        if info.channels != 1 && info.channels != 3 {
            return Err(Error::Format {
                what: "video",
                detail: format!("channels must be 1 or 3, got {}", info.channels),
            });
        }
        let data = fs::read(path)?;
        if data.len() != info.frame_len() * info.frames {
            return Err(Error::Format {
                what: "video",
                detail: format!("{} bytes, sidecar implies {}", data.len(), info.frame_len() * info.frames),
            });
        }
        Ok(Self { info, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, &self.data)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&self.info)?)?;
        Ok(())
    }

    /// Each frame as a `1 x C x H x W` unit-range tensor.
    pub fn to_tensors(&self) -> Vec<Tensor<f32>> {
        let i = self.info;
        self.data
            .chunks(i.frame_len().max(1))
            .take(i.frames)
            .map(|f| {
                let v = f.iter().map(|&b| b as f32 / 255.0).collect();
                Tensor::new(vec![1, i.channels, i.height, i.width], v).expect("frame shape")
            })
            .collect()
    }

    pub fn from_tensors(frames: &[Tensor<f32>]) -> Result<Self> {
        let (_, c, h, w) = frames
            .first()
            .ok_or_else(|| Error::Config("no frames".into()))?
            .dims4()?;
        let mut data = Vec::with_capacity(frames.len() * c * h * w);
        for f in frames {
            if f.shape() != [1, c, h, w] {
                return Err(Error::Shape {
                    op: "from_tensors",
                    detail: format!("{:?} vs {:?}", f.shape(), [1, c, h, w]),
                });
            }
            data.extend(f.data().iter().map(|&v| to_code(v)));
        }
        Ok(Self {
            info: VideoInfo {
                width: w,
                height: h,
                frames: frames.len(),
                channels: c,
            },
            data,
        })
    }
}

/// Pad the bottom and right edges up to multiples of `multiple` by
/// repeating the last row and column.
pub fn pad_frame(f: &Tensor<f32>, multiple: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = f.dims4()?;
    let (h2, w2) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    let mut out = Vec::with_capacity(n * c * h2 * w2);
    for p in 0..n * c {
        let src = &f.data()[p * h * w..(p + 1) * h * w];
        for y in 0..h2 {
            let row = &src[y.min(h - 1) * w..][..w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[w - 1], w2 - w));
        }
    }
    Tensor::new(vec![n, c, h2, w2], out)
}

pub fn crop_frame(f: &Tensor<f32>, h: usize, w: usize) -> Result<Tensor<f32>> {
    let (n, c, fh, fw) = f.dims4()?;
    if h > fh || w > fw {
        return Err(Error::Shape {
            op: "crop",
            detail: format!("{h}x{w} exceeds {fh}x{fw}"),
        });
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for p in 0..n * c {
        for y in 0..h {
            out.extend_from_slice(&f.data()[(p * fh + y) * fw..][..w]);
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}
