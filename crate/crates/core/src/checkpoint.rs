//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic, format version, the four layer widths and the class
//! count, then each tensor in [`Tensor::ALL`] order as `(out, inp)` followed
//! by its weights and biases, then an optional distillation-store section.

use std::collections::BTreeMap;
use std::path::Path;

use crate::detector::{Dims, DetectorState, Tensor};
use crate::error::{Error, Result};
use crate::losses::DistillTargetStore;
use crate::model::ClassId;
use crate::nn::Linear;

pub const MAGIC: &[u8; 8] = b"IFSDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: DetectorState,
    pub distill: Option<DistillTargetStore>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode(state: &DetectorState, distill: Option<&DistillTargetStore>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let d = state.dims;
    for v in [d.d_world, d.d_feat, d.hidden, d.d_obj, state.num_classes()] {
        w.usize(v);
    }
    for t in Tensor::ALL {
        let l = state.tensor(t);
        w.usize(l.out);
        w.usize(l.inp);
        w.f64s(&l.weight);
        w.f64s(&l.bias);
    }
    match distill {
        None => w.0.push(0),
        Some(s) => {
            w.0.push(1);
            w.f64s(&[s.temperature]);
            w.0.push(s.include_background as u8);
            w.usize(s.old_classes.len());
            for c in &s.old_classes {
                w.usize(c.index());
            }
            w.usize(s.entries.len());
            for (&(scene, inst), p) in &s.entries {
                w.u64(scene);
                w.usize(inst);
                w.usize(p.len());
                w.f64s(p);
            }
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let dims = Dims {
        d_world: r.usize()?,
        d_feat: r.usize()?,
        hidden: r.usize()?,
        d_obj: r.usize()?,
    };
    let num_classes = r.usize()?;
    let expected = |t: Tensor| match t {
        Tensor::Agnostic => (dims.d_feat, dims.d_world),
        Tensor::CseHidden => (dims.hidden, dims.d_feat),
        Tensor::CseOut => (dims.d_obj, dims.hidden),
        Tensor::Objectness => (1, dims.d_obj),
        Tensor::Classifier => (num_classes + 1, dims.d_obj),
        Tensor::BoxReg => (4, dims.d_obj),
    };
    let mut layers = Vec::with_capacity(Tensor::ALL.len());
    for t in Tensor::ALL {
        let (out, inp) = (r.usize()?, r.usize()?);
        if (out, inp) != expected(t) {
            return Err(Error::Checkpoint(format!(
                "{t:?} has shape {out}x{inp}, expected {:?}",
                expected(t)
            )));
        }
        let weight = r.f64s(out * inp)?;
        let bias = r.f64s(out)?;
        layers.push(Linear { inp, out, weight, bias });
    }
    let mut it = layers.into_iter();
    let mut next = || it.next().expect("one layer per tensor");
    let state = DetectorState {
        dims,
        agnostic: next(),
        cse_hidden: next(),
        cse_out: next(),
        objectness: next(),
        classifier: next(),
        boxreg: next(),
    };
    let distill = match r.u8()? {
        0 => None,
        1 => {
            let temperature = r.f64()?;
            let include_background = r.u8()? != 0;
            let n_old = r.usize()?;
            let old_classes = (0..n_old).map(|_| r.usize().map(ClassId)).collect::<Result<Vec<_>>>()?;
            let n = r.usize()?;
            let mut entries = BTreeMap::new();
            for _ in 0..n {
                let scene = r.u64()?;
                let inst = r.usize()?;
                let len = r.usize()?;
                entries.insert((scene, inst), r.f64s(len)?);
            }
            Some(DistillTargetStore {
                temperature,
                old_classes,
                include_background,
                entries,
            })
        }
        f => return Err(Error::Checkpoint(format!("bad distillation flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { state, distill })
}

pub fn save(path: &Path, state: &DetectorState, distill: Option<&DistillTargetStore>) -> Result<()> {
    std::fs::write(path, encode(state, distill))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
