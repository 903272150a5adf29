//! Binary checkpoint format. See `docs/checkpoint-format.md` for the byte
//! layout.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::data::SamplerState;
use crate::nn::{Model, ModelSpec};
use crate::optim::MomentState;
use crate::sparsity::Mask;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPLBCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Optimizer step the state belongs to.
    pub step: u64,
    pub sampler: Option<SamplerState>,
    /// Free-form run notes (method, λ, S_T, ...).
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model, step: u64) -> Self {
        Checkpoint {
            model,
            step,
            sampler: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.model.spec.canonical();
        let mut sections: Vec<(&str, Vec<u8>)> = vec![("spec", spec.as_bytes().to_vec())];

        let mut w = Writer::default();
        w.u32(self.model.slots.len() as u32);
        for s in &self.model.slots {
            w.str(&s.name);
            w.u8(s.sparsifiable as u8);
            w.tensor(&s.value);
        }
        sections.push(("weights", w.0));

        let mut w = Writer::default();
        let masked: Vec<_> = self
            .model
            .slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.mask.as_ref().map(|m| (i, m)))
            .collect();
        w.u32(masked.len() as u32);
        for (i, m) in masked {
            w.u32(i as u32);
            w.u64(m.rows() as u64);
            w.u64(m.cols() as u64);
            w.bytes(&m.to_packed());
        }
        sections.push(("masks", w.0));

        let mut w = Writer::default();
        let scaled: Vec<_> = self
            .model
            .slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.scaling.as_ref().map(|a| (i, a)))
            .collect();
        w.u32(scaled.len() as u32);
        for (i, a) in scaled {
            w.u32(i as u32);
            w.tensor(a);
        }
        sections.push(("scaling", w.0));

        let mut w = Writer::default();
        for s in &self.model.slots {
            w.moments(&s.state);
            match &s.scaling_state {
                Some(st) => {
                    w.u8(1);
                    w.moments(st);
                }
                None => w.u8(0),
            }
        }
        sections.push(("moments", w.0));

        if let Some(p) = &self.sampler {
            let mut w = Writer::default();
            w.u64(p.seed);
            w.u64(p.stream);
            w.0.extend_from_slice(&p.word_pos.to_le_bytes());
            sections.push(("prng", w.0));
        }

        let mut w = Writer::default();
        w.u64(self.step);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        sections.push(("meta", w.0));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.model.spec.digest());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (name, body) in sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let count = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("section name is not UTF-8".into()))?
                .to_string();
            let body_len = r.len_u64()?;
            sections.insert(name, r.take(body_len)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last section".into()));
        }
        let section = |n: &str| {
            sections
                .get(n)
                .map(|b| Reader { buf: b, pos: 0 })
                .ok_or_else(|| Error::Format(format!("checkpoint misses section {n}")))
        };

        let spec_text = std::str::from_utf8(section("spec")?.buf)
            .map_err(|_| Error::Format("model spec is not UTF-8".into()))?;
        let spec = ModelSpec::parse_canonical(spec_text)?;
        if spec.digest() != digest {
            return Err(Error::Format("model spec digest does not match the header".into()));
        }
        let mut model = Model::init(&spec)?;

        let mut w = section("weights")?;
        let n = w.u32()? as usize;
        if n != model.slots.len() {
            return Err(Error::Format(format!(
                "checkpoint has {n} tensors, model expects {}",
                model.slots.len()
            )));
        }
        for slot in &mut model.slots {
            let name = w.str()?;
            let sparsifiable = w.u8()? != 0;
            let value = w.tensor()?;
            if name != slot.name || value.shape() != slot.value.shape() || sparsifiable != slot.sparsifiable {
                return Err(Error::Format(format!("tensor {name} does not fit slot {}", slot.name)));
            }
            slot.value = value;
        }

        let mut m = section("masks")?;
        for _ in 0..m.u32()? {
            let i = m.index(model.slots.len())?;
            let rows = m.len_u64()?;
            let cols = m.len_u64()?;
            let packed = m.bytes()?;
            let mask = Mask::from_packed(rows, cols, packed)?;
            if [rows, cols] != [model.slots[i].value.rows(), model.slots[i].value.cols()] {
                return Err(Error::Format(format!("mask shape mismatch for {}", model.slots[i].name)));
            }
            model.slots[i].mask = Some(mask);
        }

        let mut s = section("scaling")?;
        for _ in 0..s.u32()? {
            let i = s.index(model.slots.len())?;
            model.slots[i].scaling = Some(s.tensor()?);
        }

        let mut mo = section("moments")?;
        for slot in &mut model.slots {
            slot.state = mo.moments(slot.value.len())?;
            slot.scaling_state = match mo.u8()? {
                0 => None,
                _ => {
                    let len = slot.scaling.as_ref().map(|a| a.len()).ok_or_else(|| {
                        Error::Format(format!("moments for missing scaling of {}", slot.name))
                    })?;
                    Some(mo.moments(len)?)
                }
            };
        }

        let sampler = match sections.get("prng") {
            Some(b) => {
                let mut p = Reader { buf: b, pos: 0 };
                let seed = p.u64()?;
                let stream = p.u64()?;
                let word_pos = u128::from_le_bytes(p.take(16)?.try_into().expect("16 bytes"));
                Some(SamplerState { seed, stream, word_pos })
            }
            None => None,
        };

        let mut me = section("meta")?;
        let step = me.u64()?;
        let mut meta = BTreeMap::new();
        for _ in 0..me.u32()? {
            let k = me.str()?;
            let v = me.str()?;
            meta.insert(k, v);
        }
        Ok(Checkpoint {
            model,
            step,
            sampler,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data());
    }
    fn moments(&mut self, m: &MomentState) {
        self.u64(m.t as u64);
        self.f64s(&m.mu);
        self.f64s(&m.v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len_u64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > self.buf.len() as u64 {
            return Err(Error::Format(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }
    fn index(&mut self, bound: usize) -> Result<usize> {
        let i = self.u32()? as usize;
        if i >= bound {
            return Err(Error::Format(format!("slot index {i} out of range")));
        }
        Ok(i)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_u64()?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len_u64()?;
        self.take(n)
    }
    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let nd = self.u32()? as usize;
        if nd == 0 || nd > 3 {
            return Err(Error::Format(format!("tensor with {nd} dimensions")));
        }
        let shape = (0..nd).map(|_| self.len_u64()).collect::<Result<Vec<_>>>()?;
        let data = self.f64s()?;
        Tensor::new(&shape, data).map_err(|e| Error::Format(format!("bad tensor: {e}")))
    }
    fn moments(&mut self, len: usize) -> Result<MomentState> {
        let t = self.u64()? as usize;
        let mu = self.f64s()?;
        let v = self.f64s()?;
        if mu.len() != len || v.len() != len {
            return Err(Error::Format("moment state length mismatch".into()));
        }
        Ok(MomentState { mu, v, t })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::{compute_nm_mask, NMConfig};

    fn sample() -> Checkpoint {
        let mut model = Model::init(&ModelSpec::mlp(&[8, 16, 2], 4)).unwrap();
        let i = model.sparsifiable_indices()[0];
        model.slots[i].mask = Some(compute_nm_mask(&model.slots[i].value, &NMConfig::default()).unwrap());
        model.slots[i].scaling = Some(Tensor::filled(&[16, 2], 0.75));
        model.slots[i].scaling_state = Some(MomentState::zeros(32));
        model.slots[i].state.mu[3] = -1.5e-7;
        model.slots[i].state.t = 12;
        let mut c = Checkpoint::new(model, 12);
        c.sampler = Some(SamplerState {
            seed: 9,
            stream: 2,
            word_pos: 1 << 70,
        });
        c.meta.insert("method".into(), "cast".into());
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn tampering_is_detected() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
