//! `P3D1` dataset container.
//!
//! Little-endian: magic `P3D1`, u32 version, u32 sample count, u16 H, W,
//! C (= 3), joint count (= 17); then per sample u16 action, u16 subject,
//! `H·W·C` image bytes, 17×2 f32 pose2d (px), 17×3 f32 pose3d (mm).

use std::path::Path;

use super::image::Image;
use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D, N_JOINTS};
use crate::tensor::checkpoint::Reader;

pub const MAGIC: &[u8; 4] = b"P3D1";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub pose3d: Pose3D,
    pub pose2d: Pose2D,
    pub action_id: u16,
    pub subject_id: u16,
}

pub fn record_bytes(height: usize, width: usize) -> usize {
    4 + height * width * 3 + N_JOINTS * 5 * 4
}

/// Samples sharing one image size.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl DatasetFile {
    pub fn new(height: usize, width: usize, samples: Vec<Sample>) -> Result<Self> {
        if height == 0 || width == 0 || height > u16::MAX as usize || width > u16::MAX as usize {
            return Err(Error::Config(format!("unsupported image size {height}x{width}")));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.image.height != height || s.image.width != width {
                return Err(Error::shape(
                    "dataset",
                    format!("sample {i} is {}x{}, expected {height}x{width}", s.image.height, s.image.width),
                ));
            }
        }
        Ok(DatasetFile { height, width, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.len() * record_bytes(self.height, self.width));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        for v in [self.height, self.width, 3, N_JOINTS] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        for s in &self.samples {
            out.extend_from_slice(&s.action_id.to_le_bytes());
            out.extend_from_slice(&s.subject_id.to_le_bytes());
            out.extend_from_slice(&s.image.data);
            for v in s.pose2d.0.iter().flatten().chain(s.pose3d.0.iter().flatten()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).map_err(|_| bad_magic())?;
        if magic != MAGIC {
            return Err(bad_magic());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
        }
        let count = r.u32()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let channels = r.u16()?;
        if channels != 3 {
            return Err(Error::Format { offset: 16, msg: format!("expected 3 channels, found {channels}") });
        }
        let joints = r.u16()? as usize;
        if joints != N_JOINTS {
            return Err(Error::Format {
                offset: 18,
                msg: format!("joint count {joints} does not match {N_JOINTS}"),
            });
        }
        if height == 0 || width == 0 {
            return Err(Error::Format { offset: 12, msg: "zero image dimension".into() });
        }
        let want = HEADER_BYTES as u64 + count as u64 * record_bytes(height, width) as u64;
        if (bytes.len() as u64) < want {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                msg: format!("truncated: {count} samples need {want} bytes, file has {}", bytes.len()),
            });
        }
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let action_id = r.u16()?;
            let subject_id = r.u16()?;
            let data = r.take(height * width * 3)?.to_vec();
            let mut p2 = [[0.0; 2]; N_JOINTS];
            for j in p2.iter_mut().flatten() {
                *j = r.f32()? as f64;
            }
            let at = r.pos as u64;
            let mut p3 = [[0.0; 3]; N_JOINTS];
            for j in p3.iter_mut().flatten() {
                *j = r.f32()? as f64;
            }
            let pose3d = Pose3D::new(p3).map_err(|e| Error::Format { offset: at, msg: e.to_string() })?;
            samples.push(Sample {
                image: Image { height, width, data },
                pose3d,
                pose2d: Pose2D(p2),
                action_id,
                subject_id,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(DatasetFile { height, width, samples })
    }
}

fn bad_magic() -> Error {
    Error::Format { offset: 0, msg: "bad magic: not a P3D1 dataset".into() }
}

pub fn write_dataset(data: &DatasetFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, data.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    DatasetFile::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetFile {
        let mut p3 = [[0.0; 3]; N_JOINTS];
        for (j, p) in p3.iter_mut().enumerate() {
            *p = [j as f64 * 10.5, -(j as f64), 5000.25];
        }
        let s = Sample {
            image: Image::new(2, 3, (0..18).collect()).unwrap(),
            pose3d: Pose3D(p3),
            pose2d: Pose2D([[1.5, 0.25]; N_JOINTS]),
            action_id: 2,
            subject_id: 9,
        };
        DatasetFile::new(2, 3, vec![s.clone(), s]).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = DatasetFile::new(64, 48, vec![]).unwrap().to_bytes();
        assert_eq!(b.len(), HEADER_BYTES);
        assert_eq!(&b[..4], b"P3D1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &0u32.to_le_bytes());
        assert_eq!(&b[12..20], &[64, 0, 48, 0, 3, 0, 17, 0]);
    }

    #[test]
    fn round_trip() {
        let d = tiny();
        let b = d.to_bytes();
        assert_eq!(b.len(), HEADER_BYTES + 2 * record_bytes(2, 3));
        let back = DatasetFile::from_bytes(&b).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_bytes(), b);
    }

    #[test]
    fn corrupt_files_are_rejected_with_offsets() {
        let b = tiny().to_bytes();
        let mut m = b.clone();
        m[0] = b'X';
        let e = DatasetFile::from_bytes(&m).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }) && e.to_string().contains("bad magic"));
        let mut v = b.clone();
        v[4] = 2;
        assert!(matches!(DatasetFile::from_bytes(&v), Err(Error::Format { offset: 4, .. })));
        let mut j = b.clone();
        j[18] = 16;
        assert!(matches!(DatasetFile::from_bytes(&j), Err(Error::Format { offset: 18, .. })));
        assert!(matches!(DatasetFile::from_bytes(&b[..b.len() - 1]), Err(Error::Format { .. })));
        let mut t = b.clone();
        t.push(0);
        assert!(matches!(DatasetFile::from_bytes(&t), Err(Error::Format { .. })));
        assert!(DatasetFile::from_bytes(b"P3").is_err());
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let mut d = tiny();
        d.samples[1].image = Image::filled(3, 3, [0; 3]);
        assert!(DatasetFile::new(2, 3, d.samples).is_err());
    }
}
