//! EVAC checkpoints: config text plus a named tensor table, little-endian.
//!
//! Layout: `"EVAC"`, version `u32`, config length `u32` + UTF-8 bytes, tensor
//! count `u32`, then per tensor: name length `u16` + bytes, rank `u8`, dims
//! `u32 × rank`, dtype `u8` (0 = f32, 1 = f64), raw elements. Optimizer state is
//! stored as `opt.m.<param>`, `opt.v.<param>` and the rank-0 f64 `opt.step`.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"EVAC";
const VERSION: u32 = 1;
pub const OPT_STEP: &str = "opt.step";

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, AnyTensor)>,
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(buf);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn elems<T: Scalar>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let w = T::DTYPE.size_in_bytes();
        let raw = self.take(n.checked_mul(w).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        Tensor::from_vec(shape, raw.chunks_exact(w).map(T::read_le).collect())
    }
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Checkpoint { config: config.into(), tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: AnyTensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument(format!("tensor name length {} not storable", name.len())));
        }
        if t.shape().len() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidArgument(format!("tensor {name}: shape {:?} not storable", t.shape())));
        }
        if self.get(&name).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate tensor name {name}")));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Parameters, then optimizer moments and step when `opt` is given.
    pub fn from_training(config: impl Into<String>, params: &ParamStore<f32>, opt: Option<&AdamW<f32>>) -> Result<Self> {
        let mut c = Checkpoint::new(config);
        for (m, t) in params.iter() {
            c.push(m.name.clone(), AnyTensor::F32(t.clone()))?;
        }
        if let Some(opt) = opt {
            for ((m, _), (mt, vt)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
                c.push(format!("opt.m.{}", m.name), AnyTensor::F32(mt.clone()))?;
                c.push(format!("opt.v.{}", m.name), AnyTensor::F32(vt.clone()))?;
            }
            c.push(OPT_STEP, AnyTensor::F64(Tensor::scalar(opt.step as f64)))?;
        }
        Ok(c)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.as_bytes();
        let len = u32::try_from(cfg.len()).map_err(|_| Error::InvalidArgument("config text too long".into()))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(cfg);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            match t {
                AnyTensor::F32(t) => put_tensor(&mut buf, t),
                AnyTensor::F64(t) => put_tensor(&mut buf, t),
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an EVAC checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported EVAC version {version}")));
        }
        let n = r.u32()? as usize;
        let config = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("config blob is not UTF-8".into()))?;
        let count = r.u32()?;
        let mut c = Checkpoint::new(config);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let tag = r.u8()?;
            let t = match DType::from_tag(tag) {
                Some(DType::F32) => AnyTensor::F32(r.elems(&shape)?),
                Some(DType::F64) => AnyTensor::F64(r.elems(&shape)?),
                None => return Err(Error::Format(format!("tensor {name}: unknown dtype {tag}"))),
            };
            c.push(name, t).map_err(|e| Error::Format(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after tensor table", bytes.len() - r.pos)));
        }
        Ok(c)
    }

    /// Written to a sibling temp file first, then renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("evac.partial");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn f32_named(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.get(name) {
            Some(AnyTensor::F32(t)) => Ok(t),
            Some(_) => Err(Error::Tensor { name: name.into(), reason: "expected f32".into() }),
            None => Err(Error::Tensor { name: name.into(), reason: "missing from checkpoint".into() }),
        }
    }

    /// Overwrites every tensor of `params`; the checkpoint must hold exactly
    /// those parameters (optimizer entries aside).
    pub fn load_params(&self, params: &mut ParamStore<f32>) -> Result<()> {
        let wanted: HashSet<&str> = params.names().collect();
        if let Some((extra, _)) = self.tensors.iter().find(|(n, _)| !n.starts_with("opt.") && !wanted.contains(n.as_str())) {
            return Err(Error::Tensor { name: extra.clone(), reason: "not part of the model".into() });
        }
        let names: Vec<String> = params.names().map(str::to_string).collect();
        let staged = names.iter().map(|n| self.f32_named(n).cloned()).collect::<Result<Vec<_>>>()?;
        for (n, t) in names.iter().zip(&staged) {
            if params.by_name(n).expect("listed").shape() != t.shape() {
                return Err(Error::Tensor { name: n.clone(), reason: format!("shape {:?} vs model {:?}", t.shape(), params.by_name(n).unwrap().shape()) });
            }
        }
        for (n, t) in names.iter().zip(staged) {
            params.set(n, t)?;
        }
        Ok(())
    }

    pub fn has_optimizer(&self) -> bool {
        self.get(OPT_STEP).is_some()
    }

    /// Restores moments and step count for the parameters of `params`.
    pub fn load_optimizer(&self, params: &ParamStore<f32>, opt: &mut AdamW<f32>) -> Result<()> {
        let step = match self.get(OPT_STEP) {
            Some(AnyTensor::F64(t)) if t.numel() == 1 => t.item(),
            _ => return Err(Error::Tensor { name: OPT_STEP.into(), reason: "missing or not an f64 scalar".into() }),
        };
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::Tensor { name: OPT_STEP.into(), reason: format!("invalid step {step}") });
        }
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (meta, t) in params.iter() {
            for (dst, kind) in [(&mut m, "m"), (&mut v, "v")] {
                let name = format!("opt.{kind}.{}", meta.name);
                let s = self.f32_named(&name)?;
                if s.shape() != t.shape() {
                    return Err(Error::Tensor { name, reason: format!("shape {:?} vs parameter {:?}", s.shape(), t.shape()) });
                }
                dst.push(s.clone());
            }
        }
        opt.m = m;
        opt.v = v;
        opt.step = step as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimConfig;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_vec(&[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30]).unwrap(), 1, false).unwrap();
        s.add("a.bias", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap(), 1, true).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = store();
        let mut opt = AdamW::<f32>::new(OptimConfig::default(), 1, &s).unwrap();
        opt.step = 17;
        opt.m[0].data_mut()[1] = 0.125;
        let mut c = Checkpoint::from_training("seed = 3\n", &s, Some(&opt)).unwrap();
        c.push("extra.f64", AnyTensor::F64(Tensor::from_f64(&[2], &[std::f64::consts::PI, -1e-300]).unwrap())).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.tensors.len(), 2 + 4 + 2);

        match back.load_params(&mut store()) {
            Err(Error::Tensor { name, .. }) => assert_eq!(name, "extra.f64"),
            other => panic!("expected the unknown tensor to be named, got {other:?}"),
        }
    }

    #[test]
    fn restores_params_and_optimizer() {
        let s = store();
        let mut opt = AdamW::<f32>::new(OptimConfig::default(), 1, &s).unwrap();
        opt.step = 5;
        opt.v[1].data_mut()[2] = 4.0;
        let c = Checkpoint::from_training("", &s, Some(&opt)).unwrap();
        let mut s2 = store();
        s2.get_mut(s2.id("a.bias").unwrap()).data_mut()[0] = 9.0;
        c.load_params(&mut s2).unwrap();
        assert_eq!(s2.fingerprint(), s.fingerprint());
        let mut o2 = AdamW::<f32>::new(OptimConfig::default(), 1, &s2).unwrap();
        c.load_optimizer(&s2, &mut o2).unwrap();
        assert_eq!((o2.step, &o2.m, &o2.v), (5, &opt.m, &opt.v));
    }

    #[test]
    fn rejects_corruption() {
        let c = Checkpoint::from_training("x", &store(), None).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(Checkpoint::from_bytes(&trailing).is_err());
    }
}
