//! Frozen per-patch target features: a fixed random ViT surrogate, or features
//! precomputed offline and stored in an EVAT file.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{streams, Prng};
use crate::tensor::Tensor;
use crate::vit::{patch_rows, EncoderConfig, EncoderState};

/// Per-patch targets for one batch, `(batch · grid) × teacher_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBatch {
    pub features: Tensor<f32>,
    pub batch: usize,
    pub grid: usize,
    pub source_id: String,
}

impl TeacherBatch {
    pub fn teacher_dim(&self) -> usize {
        self.features.rows_cols().1
    }

    /// Checks the batch against a student's grid and target dimension.
    pub fn check(&self, grid: usize, teacher_dim: usize) -> Result<()> {
        if self.grid != grid || self.teacher_dim() != teacher_dim {
            return Err(Error::Mismatch(format!(
                "teacher grid {} dim {} vs student grid {grid} dim {teacher_dim}",
                self.grid,
                self.teacher_dim()
            )));
        }
        if !self.features.all_finite() {
            return Err(Error::Mismatch(format!("teacher {} produced non-finite features", self.source_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    FrozenNet,
    File,
}

/// Source of regression targets. Always deterministic and never trained.
pub trait TeacherProvider: Sync {
    fn kind(&self) -> TeacherKind;
    fn teacher_dim(&self) -> usize;
    fn grid(&self) -> usize;
    fn source_id(&self) -> String;
    /// `patches` are the normalized, augmented images the student sees;
    /// `indices` are their dataset positions.
    fn features(&self, patches: &Tensor<f32>, indices: &[usize]) -> Result<TeacherBatch>;
}

/// Architecture of the frozen surrogate; image and patch size follow the student.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrozenNetConfig {
    pub depth: usize,
    pub width: usize,
    pub mlp_width: usize,
    pub heads: usize,
}

impl Default for FrozenNetConfig {
    fn default() -> Self {
        FrozenNetConfig { depth: 2, width: 32, mlp_width: 128, heads: 4 }
    }
}

/// Randomly initialized ViT whose final-normed patch tokens are the targets.
#[derive(Debug, Clone)]
pub struct FrozenNetTeacher {
    pub seed: u64,
    state: EncoderState<f32>,
    fingerprint: String,
}

impl FrozenNetTeacher {
    pub fn new(image_size: usize, patch_size: usize, net: FrozenNetConfig, seed: u64) -> Result<Self> {
        let cfg = EncoderConfig {
            image_size,
            patch_size,
            depth: net.depth,
            width: net.width,
            mlp_width: net.mlp_width,
            heads: net.heads,
            drop_path_rate: 0.0,
            teacher_dim: net.width,
        };
        let state = EncoderState::new(&cfg, &mut Prng::new(seed, streams::TEACHER))?;
        let fingerprint = state.params.fingerprint();
        Ok(FrozenNetTeacher { seed, state, fingerprint })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.state.encoder.cfg
    }
}

impl TeacherProvider for FrozenNetTeacher {
    fn kind(&self) -> TeacherKind {
        TeacherKind::FrozenNet
    }

    fn teacher_dim(&self) -> usize {
        self.config().width
    }

    fn grid(&self) -> usize {
        self.config().grid()
    }

    fn source_id(&self) -> String {
        format!("frozen-net:{}:{}", self.seed, self.fingerprint)
    }

    fn features(&self, patches: &Tensor<f32>, _indices: &[usize]) -> Result<TeacherBatch> {
        let cfg = self.config();
        let (rows, cols) = patches.rows_cols();
        if cols != cfg.patch_dim() || rows == 0 || rows % cfg.grid() != 0 {
            return Err(Error::Mismatch(format!(
                "teacher expects {}-pixel images in patch {} ({} x {}), got {rows} x {cols}",
                cfg.image_size,
                cfg.patch_size,
                cfg.grid(),
                cfg.patch_dim()
            )));
        }
        let batch = rows / cfg.grid();
        let out = self.state.forward_eval(patches.clone(), None)?;
        let d = cfg.width;
        let mut data = Vec::with_capacity(batch * cfg.grid() * d);
        for r in patch_rows(batch, cfg.grid()) {
            data.extend_from_slice(&out.data()[r * d..(r + 1) * d]);
        }
        Ok(TeacherBatch {
            features: Tensor::from_vec(&[batch * cfg.grid(), d], data)?,
            batch,
            grid: cfg.grid(),
            source_id: self.source_id(),
        })
    }
}

// ── EVAT file ────────────────────────────────────────────────────────

const EVAT_MAGIC: &[u8; 4] = b"EVAT";
const EVAT_VERSION: u32 = 1;
const EVAT_HEADER: usize = 20;

/// Writes `image_count · grid · teacher_dim` values, image-major.
pub fn write_evat(path: &Path, grid: usize, teacher_dim: usize, values: &[f32]) -> Result<()> {
    let per = grid * teacher_dim;
    if per == 0 || values.len() % per != 0 {
        return Err(Error::InvalidArgument(format!("{} values do not split into {grid} x {teacher_dim} images", values.len())));
    }
    let mut buf = Vec::with_capacity(EVAT_HEADER + 4 * values.len());
    buf.extend_from_slice(EVAT_MAGIC);
    buf.extend_from_slice(&EVAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&((values.len() / per) as u32).to_le_bytes());
    buf.extend_from_slice(&(grid as u32).to_le_bytes());
    buf.extend_from_slice(&(teacher_dim as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Features for every image of a dataset, loaded from an EVAT file.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    pub path: PathBuf,
    pub image_count: usize,
    grid: usize,
    teacher_dim: usize,
    values: Vec<f32>,
}

impl FileTeacher {
    pub fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < EVAT_HEADER || &bytes[..4] != EVAT_MAGIC {
            return Err(Error::Format(format!("{}: not an EVAT file", path.display())));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
        if word(1) != EVAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported EVAT version {}", word(1))));
        }
        let (image_count, grid, teacher_dim) = (word(2), word(3), word(4));
        let n = image_count * grid * teacher_dim;
        if bytes.len() != EVAT_HEADER + 4 * n {
            return Err(Error::Format(format!("EVAT length {} does not match header ({})", bytes.len(), EVAT_HEADER + 4 * n)));
        }
        let values = bytes[EVAT_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(FileTeacher { path: path.to_path_buf(), image_count, grid, teacher_dim, values })
    }

    /// Verifies the file against the student's grid and target dimension.
    pub fn check_student(&self, grid: usize, teacher_dim: usize) -> Result<()> {
        if self.grid != grid || self.teacher_dim != teacher_dim {
            return Err(Error::Mismatch(format!(
                "{}: grid {} dim {} vs student grid {grid} dim {teacher_dim}",
                self.path.display(),
                self.grid,
                self.teacher_dim
            )));
        }
        Ok(())
    }

    /// `grid × teacher_dim` stored values of one image.
    pub fn row(&self, index: usize) -> Result<&[f32]> {
        if index >= self.image_count {
            return Err(Error::OutOfRange { index, limit: self.image_count });
        }
        let per = self.grid * self.teacher_dim;
        Ok(&self.values[index * per..(index + 1) * per])
    }
}

impl TeacherProvider for FileTeacher {
    fn kind(&self) -> TeacherKind {
        TeacherKind::File
    }

    fn teacher_dim(&self) -> usize {
        self.teacher_dim
    }

    fn grid(&self) -> usize {
        self.grid
    }

    fn source_id(&self) -> String {
        format!("file:{}", self.path.display())
    }

    fn features(&self, _patches: &Tensor<f32>, indices: &[usize]) -> Result<TeacherBatch> {
        let mut data = Vec::with_capacity(indices.len() * self.grid * self.teacher_dim);
        for &i in indices {
            data.extend_from_slice(self.row(i)?);
        }
        Ok(TeacherBatch {
            features: Tensor::from_vec(&[indices.len() * self.grid, self.teacher_dim], data)?,
            batch: indices.len(),
            grid: self.grid,
            source_id: self.source_id(),
        })
    }
}

/// Stored features of image `index` as a `grid × teacher_dim` tensor.
pub fn file_features(path: &Path, index: usize) -> Result<Tensor<f32>> {
    let t = FileTeacher::open(path)?;
    Tensor::from_vec(&[t.grid, t.teacher_dim], t.row(index)?.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, seed: u64) -> Tensor<f32> {
        let mut r = Prng::new(seed, 0);
        Tensor::from_vec(&[n * 4, 48], (0..n * 4 * 48).map(|_| r.normal() as f32).collect()).unwrap()
    }

    #[test]
    fn frozen_net_is_deterministic_and_seeded() {
        let a = FrozenNetTeacher::new(8, 4, FrozenNetConfig::default(), 1).unwrap();
        let b = FrozenNetTeacher::new(8, 4, FrozenNetConfig::default(), 1).unwrap();
        let c = FrozenNetTeacher::new(8, 4, FrozenNetConfig::default(), 2).unwrap();
        let x = batch(3, 5);
        let fa = a.features(&x, &[0, 1, 2]).unwrap();
        assert_eq!(fa, b.features(&x, &[0, 1, 2]).unwrap());
        assert_eq!(fa.features.shape(), &[12, 32]);
        let fc = c.features(&x, &[0, 1, 2]).unwrap();
        assert_ne!(fa.source_id, fc.source_id);
        assert_ne!(fa.features, fc.features);
    }

    #[test]
    fn frozen_net_rejects_wrong_image_size() {
        let t = FrozenNetTeacher::new(8, 4, FrozenNetConfig::default(), 1).unwrap();
        let wrong = Tensor::<f32>::zeros(&[5, 48]);
        assert!(matches!(t.features(&wrong, &[0]), Err(Error::Mismatch(_))));
    }

    #[test]
    fn evat_round_trip_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.evat");
        let vals: Vec<f32> = (0..2 * 4 * 3).map(|i| i as f32 * 0.37 - 1.0).collect();
        write_evat(&p, 4, 3, &vals).unwrap();
        let t = FileTeacher::open(&p).unwrap();
        assert_eq!(t.row(1).unwrap(), &vals[12..]);
        assert!(matches!(t.row(2), Err(Error::OutOfRange { index: 2, limit: 2 })));
        assert!(t.check_student(4, 3).is_ok());
        assert!(t.check_student(16, 3).is_err());
        assert_eq!(file_features(&p, 0).unwrap().data(), &vals[..12]);
    }

    #[test]
    fn evat_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.evat");
        std::fs::write(&p, b"EVAX\x01\0\0\0").unwrap();
        assert!(matches!(FileTeacher::open(&p), Err(Error::Format(_))));
    }
}
